"""Time the compiled label kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Inputs are Cityscapes-sized (1024x2048 raw ids, 512x1024 predictions).
"""
import argparse
import statistics
import time

import numpy as np

from segbench import kernels
from segbench.labels import IGNORE_ID, raw_to_train_lut


def bench(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times) * 1000


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    raw = rng.integers(0, 34, (1024, 2048)).astype(np.uint8)
    lut = raw_to_train_lut()
    train_ids = kernels.remap_labels(raw, lut, IGNORE_ID)
    half = kernels.resize_labels_nearest(train_ids, 512, 1024)
    pred = rng.integers(0, 19, half.shape).astype(np.int64)

    cases = {
        "remap 1024x2048": lambda impl: kernels.remap_labels(raw, lut, IGNORE_ID, impl=impl),
        "resize to 512x1024": lambda impl: kernels.resize_labels_nearest(train_ids, 512, 1024, impl=impl),
        "confusion 512x1024": lambda impl: kernels.confusion_update(
            np.zeros((19, 19), np.int64), half, pred, IGNORE_ID, impl=impl),
    }
    impls = kernels.backends()
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':<22}" + "".join(f"{name:>12}" for name in impls) + "     speedup")
    for label, run in cases.items():
        ms = {name: bench(lambda: run(impl), args.repeat) for name, impl in impls.items()}
        line = f"{label:<22}" + "".join(f"{v:>10.2f}ms" for v in ms.values())
        if "compiled" in ms:
            line += f"   {ms['python'] / ms['compiled']:>8.1f}x"
        print(line)


if __name__ == "__main__":
    main()
