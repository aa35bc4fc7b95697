"""CSV / JSON writers for evaluation results (schema-versioned)."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

from .core import ImageMetrics, MetricReport
from .stats import PairedTTestResult

SCHEMA_VERSION = 1
CSV_COLUMNS = ("name", "miou", "dice", "xor", "xor_ratio", "hd", "hd_raw", "flags")


def write_csv(path: str | Path, images: list[ImageMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema_version={SCHEMA_VERSION}\n")
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for img in images:
            row = img.as_row()
            writer.writerow({k: ("" if row[k] is None else row[k]) for k in CSV_COLUMNS})


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def summary_json(report: MetricReport, extra: dict | None = None) -> dict:
    doc = {"schema_version": SCHEMA_VERSION, **report.to_json()}
    if extra:
        doc.update(extra)
    return doc


def write_json(path: str | Path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def ttest_json(results: dict[str, PairedTTestResult]) -> dict:
    return {"schema_version": SCHEMA_VERSION, "tests": {k: asdict(v) for k, v in results.items()}}
