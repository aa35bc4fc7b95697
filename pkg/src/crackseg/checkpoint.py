"""Self-describing binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes  b"CRKSEGCK"
    version    u32
    header_len u64
    header     UTF-8 JSON: config, tensor index, train state, RNG state
    data       concatenated tensors, row-major little-endian float32
    crc32      u32 over every preceding byte

Each tensor index entry is ``{"name", "shape", "offset", "nbytes"}`` with the
offset relative to the start of the data section. Names are namespaced:
``param/<dotted.name>``, ``buffer/<dotted.name>``, ``adam_m/<name>`` and
``adam_v/<name>``.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CRKSEGCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_CRC = struct.Struct("<I")


class CheckpointError(RuntimeError):
    """A checkpoint could not be read; ``reason`` is a short machine-readable tag."""

    def __init__(self, path, reason: str, detail: str = ""):
        self.path = str(path)
        self.reason = reason
        self.detail = detail
        super().__init__(f"{path}: {reason}" + (f" ({detail})" if detail else ""))


@dataclass
class CheckpointData:
    config: dict
    tensors: dict[str, np.ndarray]
    train_state: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix/`` with the prefix stripped."""
        tag = prefix + "/"
        return {k[len(tag) :]: v for k, v in self.tensors.items() if k.startswith(tag)}


def save(path: str | Path, data: CheckpointData) -> None:
    """Write atomically: a temp file in the same directory is renamed into place."""
    path = Path(path)
    index, blobs, offset = [], [], 0
    for name, arr in data.tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {
            "format_version": data.version,
            "dtype": "float32-le",
            "config": data.config,
            "tensors": index,
            "train_state": data.train_state,
            "rng_state": data.rng_state,
        },
        sort_keys=True,
    ).encode("utf-8")
    body = _PREFIX.pack(MAGIC, data.version, len(header)) + header + b"".join(blobs)
    payload = body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def load(path: str | Path) -> CheckpointData:
    """Read and fully validate a checkpoint; nothing is returned on any error."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(path, "unreadable", str(exc)) from exc
    if len(raw) < _PREFIX.size + _CRC.size:
        raise CheckpointError(path, "truncated", f"{len(raw)} bytes")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(path, "bad_magic", repr(magic))
    if version != FORMAT_VERSION:
        raise CheckpointError(path, "version_mismatch", f"file v{version}, reader v{FORMAT_VERSION}")
    body, (crc,) = raw[: -_CRC.size], _CRC.unpack(raw[-_CRC.size :])
    start = _PREFIX.size + header_len
    if start > len(body):
        raise CheckpointError(path, "truncated", "header extends past end of file")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(path, "checksum_mismatch")
    try:
        header = json.loads(body[_PREFIX.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(path, "bad_header", str(exc)) from exc
    if not isinstance(header, dict) or not {"config", "tensors"} <= set(header):
        raise CheckpointError(path, "bad_header", "missing config or tensor index")
    data_section = body[start:]
    tensors = {}
    for entry in header["tensors"]:
        try:
            name, lo, n = entry["name"], int(entry["offset"]), int(entry["nbytes"])
            shape = tuple(int(d) for d in entry["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(path, "bad_tensor_index", repr(entry)[:80]) from exc
        if lo < 0 or lo + n > len(data_section) or n != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(path, "bad_tensor_index", name)
        tensors[name] = np.frombuffer(data_section, dtype="<f4", count=n // 4, offset=lo).reshape(shape).astype(np.float32)
    return CheckpointData(header["config"], tensors, header.get("train_state", {}), header.get("rng_state", {}), version)


def model_tensors(model) -> dict[str, np.ndarray]:
    out = {f"param/{n}": p.data for n, p in model.named_parameters()}
    out.update({f"buffer/{n}": b for n, b in model.named_buffers()})
    return out


def restore_model(model, ckpt: CheckpointData) -> None:
    """Load parameters and buffers; the model is untouched if names or shapes mismatch."""
    state = dict(ckpt.group("param"))
    state.update(ckpt.group("buffer"))
    model.load_state_dict(state)
