"""Compare the compiled kernels against the numpy fallback.

Usage:
    python benchmarks/bench_kernels.py [--repeat 5] [--height 96] [--width 160]

Prints the median wall time per call for each backend, the speedup and the
largest output difference between the two.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from stereoprior import _kernels_py

try:
    from stereoprior import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None


def _time(fn, repeat: int) -> tuple[float, object]:
    out = fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def make_cases(h: int, w: int, seed: int):
    rng = np.random.default_rng(seed)
    disp = np.cumsum(rng.normal(0, 0.3, size=(h, w)), axis=1) % 30.0
    img = rng.random((3, h, w))
    n = max(h * w // 64, 1)
    rows = rng.integers(0, h, n)
    cols = rng.integers(0, w, n)
    res = rng.normal(size=n)
    lr = rng.integers(0, 20, size=(h, w))
    rl = rng.integers(0, 20, size=(h, w))
    return {
        "visibility_mask": lambda k: k.visibility_mask(disp),
        "bilateral_correction": lambda k: k.bilateral_correction(img, rows, cols, res, 16.0, 0.1),
        "left_right_check": lambda k: k.left_right_check(lr, rl, 1.0),
    }


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--height", type=int, default=96)
    parser.add_argument("--width", type=int, default=160)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    if _kernels_c is None:
        print("compiled extension not available; run `pip install -e . --no-build-isolation` first")
        return 1

    cases = make_cases(args.height, args.width, args.seed)
    print(f"{'kernel':<22} {'python ms':>10} {'cython ms':>10} {'speedup':>8} {'max diff':>10}")
    for name, call in cases.items():
        t_py, out_py = _time(lambda: call(_kernels_py), args.repeat)
        t_c, out_c = _time(lambda: call(_kernels_c), args.repeat)
        diff = float(np.max(np.abs(np.asarray(out_py, dtype=np.float64) - np.asarray(out_c, dtype=np.float64))))
        print(f"{name:<22} {t_py * 1e3:>10.3f} {t_c * 1e3:>10.3f} {t_py / t_c:>7.1f}x {diff:>10.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
