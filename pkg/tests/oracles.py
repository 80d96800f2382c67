"""Independent reference implementations used by several test modules."""

from __future__ import annotations

import math

import numpy as np
import torch


def grid_search_scale_shift(x, y, w, s_range=(0.1, 5.0), t_range=(-2.0, 2.0), step=1e-3):
    """Exhaustive minimization of the weighted squared residual on a regular grid.

    The residual ``sum w (s x + t - y)^2`` is expanded into its moments so the
    full grid can be scored in one pass per ``s`` row.
    """
    x, y, w = (np.asarray(a, dtype=np.float64) for a in (x, y, w))
    ss = np.round(np.arange(s_range[0], s_range[1] + step / 2, step), 12)
    ts = np.round(np.arange(t_range[0], t_range[1] + step / 2, step), 12)
    sw, sx, sy = w.sum(), (w * x).sum(), (w * y).sum()
    sxx, sxy, syy = (w * x * x).sum(), (w * x * y).sum(), (w * y * y).sum()
    best = (np.inf, None, None)
    for s in ss:
        r = s * s * sxx + 2 * s * ts * sx + ts * ts * sw - 2 * s * sxy - 2 * ts * sy + syy
        k = int(np.argmin(r))
        if r[k] < best[0]:
            best = (r[k], float(s), float(ts[k]))
    return best[1], best[2]


def direct_residual(x, y, w, s, t):
    return float(np.sum(w * (s * x + t - y) ** 2))


def brute_volume(fl: torch.Tensor, fr: torch.Tensor, d_max: int) -> torch.Tensor:
    c, h, w = fl.shape
    out = torch.zeros(h, w, d_max + 1, dtype=fl.dtype)
    for i in range(h):
        for j in range(w):
            for d in range(d_max + 1):
                if j - d >= 0:
                    acc = fl.new_zeros(())
                    for k in range(c):
                        acc = acc + fl[k, i, j] * fr[k, i, j - d]
                    out[i, j, d] = acc
    return out


def visibility_scan(disparity: np.ndarray) -> np.ndarray:
    """Pairwise occlusion test: hidden if another pixel of the row hits the same column closer."""
    h, w = disparity.shape
    out = np.ones((h, w), dtype=np.uint8)
    for i in range(h):
        for j in range(w):
            cj = math.floor(j - disparity[i, j] + 0.5)
            for k in range(w):
                if k != j and math.floor(k - disparity[i, k] + 0.5) == cj and disparity[i, k] > disparity[i, j]:
                    out[i, j] = 0
                    break
    return out
