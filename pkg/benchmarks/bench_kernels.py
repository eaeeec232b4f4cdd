"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import time

import numpy as np

from mcva import kernels


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    # pretraining-sized batch: 4 samples on a 16x16 grid, 15x15 targets
    maps = rng.normal(size=(1024, 16, 16)).astype(np.float32)
    centers = rng.uniform(0, 15, size=(1024, 2))
    grad = rng.normal(size=(1024, 15, 15)).astype(np.float32)
    # backward of a 3x3 stride-2 conv with 32 channels on 32x32 inputs
    gcols = rng.normal(size=(32, 3, 3, 4, 16, 16)).astype(np.float32)
    # leakage oracle at grid 32, 4x4 base masks
    visible = rng.random((1024, 16)) < 0.5
    yy, xx = np.divmod(np.arange(1024), 32)
    coords = np.stack([yy, xx], axis=1).astype(np.int64)
    return {
        "crop_forward": (lambda m: lambda: m.crop_forward(maps, centers, 15)),
        "crop_backward": (lambda m: lambda: m.crop_backward(grad, centers, 15, 16, 16)),
        "col2im": (lambda m: lambda: m.col2im(gcols, 2, 33, 33)),
        "nearest_donors": (lambda m: lambda: m.nearest_donors(visible, coords)),
    }


class _Path:
    def __init__(self, suffix):
        for name in ("crop_forward", "crop_backward", "col2im", "nearest_donors"):
            setattr(self, name, getattr(kernels, f"{name}_{suffix}"))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    paths = {"numpy": _Path("numpy")}
    if kernels.HAVE_NUMBA:
        paths["numba"] = _Path("numba")
    print(f"{'kernel':<16}" + "".join(f"{p:>12}" for p in paths) + "     speedup")
    for name, make in cases(np.random.default_rng(0)).items():
        secs = {p: best_of(make(impl), args.repeat) for p, impl in paths.items()}
        row = f"{name:<16}" + "".join(f"{secs[p] * 1e3:>10.2f}ms" for p in paths)
        if "numba" in secs:
            row += f"  {secs['numpy'] / secs['numba']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
