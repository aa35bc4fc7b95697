"""Time the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Every shape is also checked for agreement between backends before timing.
"""

import argparse
import json
import logging
import timeit

import numpy as np

from crackseg.nnops.kernels import available_backends

logger = logging.getLogger("bench_kernels")

# (batch, channels, height, width): the default model at 32, 64 and 128 pixels.
SHAPES = [(2, 3, 32, 32), (2, 64, 64, 64), (1, 64, 128, 128)]


def cases(shape, rng):
    b, c, h, w = shape
    x = rng.standard_normal(shape).astype(np.float32)
    k = rng.standard_normal((c, 3, 3)).astype(np.float32)
    cols = None

    def im2col(mod):
        return mod.im2col(x, 3, 3, 1, 1, 1, 1)

    def col2im(mod):
        nonlocal cols
        if cols is None:
            cols = available_backends()["python"].im2col(x, 3, 3, 1, 1, 1, 1)
        return mod.col2im(cols, b, c, h, w, 3, 3, 1, 1, 1, 1)

    def dw_fwd(mod):
        return mod.depthwise_forward(x, k, 1, 1)

    def dw_bwd(mod):
        return mod.depthwise_backward(x, x, k, 1, 1)

    return {"im2col": im2col, "col2im": col2im, "depthwise_forward": dw_fwd, "depthwise_backward": dw_bwd}


def _agree(a, b):
    if isinstance(a, tuple):
        return all(_agree(x, y) for x, y in zip(a, b))
    # float32 reductions over large maps differ in summation order, so scale atol to the output.
    return np.allclose(a, b, rtol=1e-4, atol=1e-5 * max(1.0, float(np.abs(b).max())))


def run(repeat: int) -> list[dict]:
    backends = available_backends()
    if "compiled" not in backends:
        logger.warning("compiled kernels are not built; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    rows = []
    for shape in SHAPES:
        for name, fn in cases(shape, rng).items():
            outs = {k: fn(m) for k, m in backends.items()}
            if "compiled" in outs and not _agree(outs["compiled"], outs["python"]):
                raise AssertionError(f"{name} {shape}: backends disagree")
            row = {"kernel": name, "shape": list(shape)}
            for k, m in backends.items():
                row[f"{k}_ms"] = 1e3 * min(timeit.repeat(lambda: fn(m), number=1, repeat=repeat))
            if "compiled_ms" in row:
                row["speedup"] = row["python_ms"] / row["compiled_ms"]
            rows.append(row)
    return rows


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5, help="best-of-N timing")
    parser.add_argument("--json", help="also write the rows here")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    rows = run(args.repeat)
    print(f"{'kernel':<20}{'shape':<20}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for r in rows:
        comp = f"{r['compiled_ms']:.2f}" if "compiled_ms" in r else "-"
        speed = f"{r['speedup']:.2f}x" if "speedup" in r else "-"
        print(f"{r['kernel']:<20}{str(tuple(r['shape'])):<20}{r['python_ms']:>12.2f}{comp:>14}{speed:>10}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
