"""Numpy reference implementations of the compiled kernels."""

from __future__ import annotations

import numpy as np


def visibility_mask(disparity: np.ndarray) -> np.ndarray:
    """1 where a left pixel is visible in the right view, 0 where occluded.

    Pixel ``j`` lands in right-image column ``round(j - d_j)``. It is hidden
    when another pixel of its row lands in the same column with a larger
    disparity (a z-buffer over half-pixel bins).
    """
    disparity = np.ascontiguousarray(disparity, dtype=np.float64)
    h, w = disparity.shape
    if h == 0 or w == 0:
        return np.ones((h, w), dtype=np.uint8)
    cols = np.floor(np.arange(w, dtype=np.float64)[None, :] - disparity + 0.5).astype(np.int64)
    lo = int(cols.min())
    nb = int(cols.max()) - lo + 1
    keys = (cols - lo) + nb * np.arange(h)[:, None]
    best = np.full(h * nb, -np.inf)
    np.maximum.at(best, keys.ravel(), disparity.ravel())
    return (disparity >= best[keys]).astype(np.uint8)


def bilateral_correction(
    image: np.ndarray,
    rows: np.ndarray,
    cols: np.ndarray,
    residuals: np.ndarray,
    sigma_d: float,
    sigma_c: float,
) -> np.ndarray:
    """Normalized bilateral spread of anchor residuals over the image grid.

    Returns ``sum_q w_pq r_q / max(sum_q w_pq, 1)`` per pixel, where the sum
    runs over anchors within ``3 * sigma_d`` of the pixel.
    """
    image = np.ascontiguousarray(image, dtype=np.float64)
    _, h, w = image.shape
    num = np.zeros((h, w))
    den = np.zeros((h, w))
    radius = 3.0 * sigma_d
    r_int = int(np.floor(radius))
    inv_d = 1.0 / (2.0 * sigma_d * sigma_d)
    inv_c = 1.0 / (2.0 * sigma_c * sigma_c)
    for qi, qj, res in zip(rows.astype(np.int64), cols.astype(np.int64), residuals.astype(np.float64)):
        i0, i1 = max(qi - r_int, 0), min(qi + r_int, h - 1)
        j0, j1 = max(qj - r_int, 0), min(qj + r_int, w - 1)
        ii = np.arange(i0, i1 + 1)[:, None]
        jj = np.arange(j0, j1 + 1)[None, :]
        dist2 = (ii - qi) ** 2 + (jj - qj) ** 2
        inside = dist2 <= radius * radius
        diff = image[:, i0 : i1 + 1, j0 : j1 + 1] - image[:, qi, qj][:, None, None]
        col2 = (diff * diff).sum(0)
        wgt = np.exp(-dist2 * inv_d) * np.exp(-col2 * inv_c) * inside
        num[i0 : i1 + 1, j0 : j1 + 1] += wgt * res
        den[i0 : i1 + 1, j0 : j1 + 1] += wgt
    return num / np.maximum(den, 1.0)


def left_right_check(best_lr: np.ndarray, best_rl: np.ndarray, tol: float) -> np.ndarray:
    """Keep left pixels whose right match points back to within ``tol`` columns.

    ``best_lr[i, j]`` is the best disparity for left pixel ``(i, j)``;
    ``best_rl[i, j']`` the best disparity for right pixel ``(i, j')``, whose
    left partner is ``j' + best_rl``.
    """
    best_lr = np.asarray(best_lr, dtype=np.int64)
    best_rl = np.asarray(best_rl, dtype=np.int64)
    h, w = best_lr.shape
    jj = np.arange(w)[None, :].repeat(h, 0)
    jr = jj - best_lr
    ok = jr >= 0
    jr_c = np.clip(jr, 0, w - 1)
    back = jr_c + np.take_along_axis(best_rl, jr_c, axis=1)
    return (ok & (np.abs(back - jj) <= tol)).astype(np.uint8)
