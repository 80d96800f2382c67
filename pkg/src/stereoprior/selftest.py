"""Fast built-in oracle checks, runnable without the test suite."""

from __future__ import annotations

import tempfile
import time
from pathlib import Path
from typing import Callable

import numpy as np
import torch


def _check_volume() -> bool:
    from .correlation import build_volume

    g = torch.Generator().manual_seed(0)
    for _ in range(3):
        fl = torch.randn(4, 8, 8, generator=g, dtype=torch.float64)
        fr = torch.randn(4, 8, 8, generator=g, dtype=torch.float64)
        vol = build_volume(fl, fr, 5)
        ref = torch.zeros(8, 8, 6, dtype=torch.float64)
        for i in range(8):
            for j in range(8):
                for d in range(6):
                    if j - d >= 0:
                        ref[i, j, d] = (fl[:, i, j] * fr[:, i, j - d]).sum()
        if not torch.equal(vol, ref):
            return False
    return True


def _check_scale_fit() -> bool:
    from .scale_align import Calibration, SparseMatches, fit_scale_shift

    rng = np.random.default_rng(1)
    calib = Calibration(f=160.0, b=0.1)
    mono = rng.uniform(1.0, 5.0, size=(16, 16))
    rows, cols = rng.integers(0, 16, 60), rng.integers(0, 16, 60)
    depth = 3.0 * mono[rows, cols] + 0.5
    m = SparseMatches(rows, cols, calib.fb / depth, rng.uniform(0.1, 1.0, 60))
    s, t = fit_scale_shift(mono, m, calib)
    return abs(s - 3.0) < 1e-9 and abs(t - 0.5) < 1e-9


def _check_warp_gradient() -> bool:
    from .numerics import finite_diff_check, warp_horizontal

    g = torch.Generator().manual_seed(2)
    img = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
    disp = (torch.rand(1, 1, 8, 8, generator=g, dtype=torch.float64) * 3 + 0.3).requires_grad_()
    err = finite_diff_check(lambda d: (warp_horizontal(img, d)[0] ** 2).sum(), disp)
    return err < 1e-6


def _check_lora_merge() -> bool:
    from .lora import LoraAdapter

    g = torch.Generator().manual_seed(3)
    a = LoraAdapter(torch.randn(12, 10, generator=g, dtype=torch.float64), rank=4, generator=g)
    with torch.no_grad():
        a.B.normal_(generator=g)
    x = torch.randn(10, 7, generator=g, dtype=torch.float64)
    with torch.no_grad():
        before = a(x.T)
        a.merge_()
        return float((a(x.T) - before).abs().max()) < 1e-10


def _check_metrics() -> bool:
    from .metrics import compute_metrics

    gt = np.full((4, 4), 2.0)
    r = compute_metrics(np.full((4, 4), 2.2), gt)
    s = compute_metrics(1.3 * gt, gt)
    return (
        abs(r.rmse - 0.2) < 1e-12
        and abs(r.sq_rel - 0.02) < 1e-12
        and abs(s.rel - 0.3) < 1e-12
        and s.a1 == 0.0
        and s.a2 == 1.0
    )


def _check_io() -> bool:
    from . import imageio

    rng = np.random.default_rng(4)
    img = rng.integers(0, 256, size=(6, 5, 3), dtype=np.uint8)
    field = rng.normal(size=(6, 5)).astype(np.float32)
    with tempfile.TemporaryDirectory() as tmp:
        imageio.write_ppm(Path(tmp) / "a.ppm", img)
        imageio.write_pfm(Path(tmp) / "a.pfm", field)
        return np.array_equal(imageio.read_ppm(Path(tmp) / "a.ppm"), img) and np.array_equal(
            imageio.read_pfm(Path(tmp) / "a.pfm"), field
        )


def _check_kernels() -> bool:
    from . import _kernels_py, kernels

    rng = np.random.default_rng(5)
    disp = rng.uniform(0, 6, size=(8, 20))
    if not np.array_equal(kernels.visibility_mask(disp), _kernels_py.visibility_mask(disp)):
        return False
    img = rng.random((3, 12, 14))
    rows, cols, res = rng.integers(0, 12, 9), rng.integers(0, 14, 9), rng.normal(size=9)
    a = kernels.bilateral_correction(img, rows, cols, res, 4.0, 0.2)
    b = _kernels_py.bilateral_correction(img, rows, cols, res, 4.0, 0.2)
    return bool(np.allclose(a, b, rtol=0, atol=1e-12))


def _check_convex_upsample() -> bool:
    from .refiner import convex_upsample

    d = torch.full((1, 1, 3, 4), 2.5, dtype=torch.float64)
    logits = torch.randn(1, 9, 16, 3, 4, generator=torch.Generator().manual_seed(6), dtype=torch.float64)
    mask = torch.softmax(logits, 1).view(1, 144, 3, 4)
    return bool(torch.allclose(convex_upsample(d, mask), torch.full((1, 1, 12, 16), 10.0, dtype=torch.float64)))


CHECKS: dict[str, Callable[[], bool]] = {
    "correlation volume vs brute force": _check_volume,
    "scale/shift recovery": _check_scale_fit,
    "warp gradient vs finite differences": _check_warp_gradient,
    "LoRA merge equivalence": _check_lora_merge,
    "metric worked examples": _check_metrics,
    "PPM/PFM round trip": _check_io,
    "compiled vs fallback kernels": _check_kernels,
    "convex upsampling of constants": _check_convex_upsample,
}


def run_selftest(verbose: bool = True) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        try:
            passed = bool(fn())
        except Exception as exc:  # report and keep going
            passed = False
            name = f"{name} ({type(exc).__name__}: {exc})"
        ok &= passed
        if verbose:
            print(f"[{'PASS' if passed else 'FAIL'}] {name} ({time.perf_counter() - t0:.2f}s)")
    return ok
