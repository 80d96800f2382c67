"""Metric verification and correction of a monocular depth prior.

Sparse, left-right consistent stereo matches give metric depth anchors
``D_sparse = f * b / d``. The prior's scale is checked against them, fixed
with a weighted affine fit when it disagrees, and local residuals are then
spread over the image with edge-aware bilateral weights.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class DegenerateFitWarning(UserWarning):
    """All anchor prior values coincide; only a shift was fitted."""


class EmptyMatchesError(ValueError):
    pass


@dataclass(frozen=True)
class Calibration:
    f: float
    b: float

    def __post_init__(self):
        if not (self.f > 0 and self.b > 0):
            raise ValueError(f"focal and baseline must be positive, got f={self.f}, b={self.b}")

    @property
    def fb(self) -> float:
        return self.f * self.b


@dataclass
class SparseMatches:
    rows: np.ndarray
    cols: np.ndarray
    disparity: np.ndarray
    conf: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.disparity = np.asarray(self.disparity, dtype=np.float64)
        self.conf = np.asarray(self.conf, dtype=np.float64)
        if not (len(self.rows) == len(self.cols) == len(self.disparity) == len(self.conf)):
            raise ValueError("match arrays differ in length")

    def __len__(self) -> int:
        return len(self.rows)

    def depth(self, calib: Calibration) -> np.ndarray:
        return calib.fb / self.disparity

    @classmethod
    def empty(cls) -> "SparseMatches":
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0))


@dataclass
class AlignmentResult:
    alpha: float
    reliable: bool
    s_hat: float
    t_hat: float
    depth_0: np.ndarray
    depth_refined: np.ndarray
    status: str = "reliable"
    num_matches: int = 0
    notes: list[str] = field(default_factory=list)


# ---------------------------------------------------------------- matching


def patch_descriptors(image: np.ndarray, radius: int = 2) -> np.ndarray:
    """Per-pixel ``(2r+1)^2 * C`` patch vectors with the patch mean removed.

    Pixels closer than ``radius`` to the border get zero descriptors.
    """
    image = np.asarray(image, dtype=np.float64)
    c, h, w = image.shape
    k = 2 * radius + 1
    out = np.zeros((c * k * k, h, w))
    padded = np.pad(image, ((0, 0), (radius, radius), (radius, radius)), mode="edge")
    idx = 0
    for di in range(k):
        for dj in range(k):
            out[idx * c : (idx + 1) * c] = padded[:, di : di + h, dj : dj + w]
            idx += 1
    out = out.reshape(k * k, c, h, w)
    out = out - out.mean(axis=0, keepdims=True)
    out = out.reshape(c * k * k, h, w)
    out[:, :radius] = 0
    out[:, h - radius :] = 0
    out[:, :, :radius] = 0
    out[:, :, w - radius :] = 0
    return out


def _cosine_volume(f_left: np.ndarray, f_right: np.ndarray, d_max: int) -> np.ndarray:
    def unit(f):
        n = np.sqrt((f * f).sum(0, keepdims=True))
        return np.divide(f, n, out=np.zeros_like(f), where=n > 1e-12)

    fl, fr = unit(f_left), unit(f_right)
    _, h, w = fl.shape
    # per-row all-pairs similarity, then keep the band j' = j - d
    sim = np.matmul(fl.transpose(1, 2, 0), fr.transpose(1, 0, 2))  # [h, w, w']
    j = np.arange(w)[:, None]
    jr = j - np.arange(d_max + 1)[None, :]
    vol = np.take_along_axis(sim, np.broadcast_to(np.clip(jr, 0, None), (h, w, d_max + 1)), axis=2)
    vol[:, jr < 0] = -np.inf
    return vol


def sparse_match(
    f_left: np.ndarray,
    f_right: np.ndarray,
    d_max: int | None = None,
    stride: int = 1,
    min_similarity: float = 0.6,
    min_margin: float = 0.05,
    temperature: float = 0.1,
    tol: float = 1.0,
    subpixel: bool = False,
    border: int = 0,
) -> SparseMatches:
    """Winner-take-all horizontal matching with a bidirectional check.

    Similarity is the cosine between feature vectors. A candidate survives
    when its best similarity exceeds ``min_similarity``, the softmax margin
    between the best and runner-up disparity exceeds ``min_margin``, the
    right-to-left best match returns within ``tol`` columns, and ``d > 0``.
    ``conf`` is the softmax margin clamped to ``(0, 1]``.
    """
    f_left = np.asarray(f_left, dtype=np.float64)
    f_right = np.asarray(f_right, dtype=np.float64)
    if f_left.shape != f_right.shape:
        raise ValueError("feature maps differ in shape")
    _, h, w = f_left.shape
    if d_max is None:
        d_max = w // 2
    d_max = min(d_max, w - 1)
    vol = _cosine_volume(f_left, f_right, d_max)
    best_lr = np.argmax(vol, axis=2)

    # right pixel j' pairs with left pixel j' + d
    rl = np.full((h, w, d_max + 1), -np.inf)
    for d in range(d_max + 1):
        rl[:, : w - d, d] = vol[:, d:, d]
    best_rl = np.argmax(rl, axis=2)
    consistent = kernels.left_right_check(best_lr, best_rl, tol).astype(bool)

    best = np.take_along_axis(vol, best_lr[..., None], axis=2)[..., 0]
    finite = np.where(np.isfinite(vol), vol, -np.inf)
    z = finite / temperature
    z = z - z.max(axis=2, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=2, keepdims=True)
    top2 = np.sort(p, axis=2)[..., -2:] if p.shape[2] > 1 else np.concatenate([np.zeros_like(p), p], 2)
    margin = top2[..., 1] - top2[..., 0]

    cand = np.zeros((h, w), dtype=bool)
    lo = max(border, 0)
    cand[lo : h - lo : stride, lo : w - lo : stride] = True
    keep = (
        cand
        & consistent
        & (best >= min_similarity)
        & (margin >= min_margin)
        & (best_lr > 0)
    )
    rows, cols = np.nonzero(keep)
    disp = best_lr[rows, cols].astype(np.float64)
    if subpixel and len(rows):
        d0 = best_lr[rows, cols]
        inner = (d0 > 0) & (d0 < d_max)
        cm = vol[rows, cols, np.clip(d0 - 1, 0, d_max)]
        c0 = vol[rows, cols, d0]
        cp = vol[rows, cols, np.clip(d0 + 1, 0, d_max)]
        denom = cm - 2 * c0 + cp
        ok = inner & np.isfinite(cm) & np.isfinite(cp) & (denom < -1e-12)
        off = np.zeros_like(disp)
        off[ok] = np.clip(0.5 * (cm[ok] - cp[ok]) / denom[ok], -0.5, 0.5)
        disp = disp + off
    conf = np.clip(margin[rows, cols], 1e-6, 1.0)
    good = disp > 0
    return SparseMatches(rows[good], cols[good], disp[good], conf[good])


# ---------------------------------------------------------------- conversion


def disparity_depth_convert(
    x: np.ndarray, calib: Calibration, direction: str = "to_depth", mask: np.ndarray | None = None
) -> np.ndarray:
    """``D = f b / d`` (``to_depth``) or ``d = f b / D`` (``to_disparity``).

    Pixels where ``mask`` is False are left at 0 and not validated.
    """
    if direction not in ("to_depth", "to_disparity"):
        raise ValueError(f"unknown direction {direction!r}")
    x = np.asarray(x, dtype=np.float64)
    m = np.ones(x.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if np.any(~(x[m] > 0)):
        raise ValueError("conversion requires strictly positive values at unmasked pixels")
    out = np.zeros_like(x)
    out[m] = calib.fb / x[m]
    return out


# ---------------------------------------------------------------- scale


def scale_check(
    mono: np.ndarray, matches: SparseMatches, calib: Calibration, tau: float = 0.1
) -> tuple[float, bool]:
    if len(matches) == 0:
        raise EmptyMatchesError("no sparse matches to verify the prior against")
    m = mono[matches.rows, matches.cols]
    if np.any(m <= 0):
        raise ValueError("prior depth must be positive at matched pixels")
    alpha = float(np.mean(matches.depth(calib) / m))
    return alpha, abs(alpha - 1.0) < tau


def solve_scale_shift(x: np.ndarray, y: np.ndarray, weights: np.ndarray) -> tuple[float, float, bool]:
    """Weighted least squares for ``y ~ s x + t`` via the 2x2 normal equations.

    Returns ``(s, t, degenerate)``; a degenerate system fixes ``s = 1``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    wt = np.asarray(weights, dtype=np.float64)
    sw = wt.sum()
    if sw <= 0:
        raise ValueError("weights must have a positive sum")
    sx, sy = (wt * x).sum(), (wt * y).sum()
    sxx, sxy = (wt * x * x).sum(), (wt * x * y).sum()
    det = sw * sxx - sx * sx
    xbar = sx / sw
    spread = (wt * (x - xbar) ** 2).sum()
    if len(x) < 2 or spread <= 1e-12 * max(sxx, 1e-300):
        return 1.0, float((sy - sx) / sw), True
    s = (sw * sxy - sx * sy) / det
    t = (sy - s * sx) / sw
    return float(s), float(t), False


def fit_scale_shift(
    mono: np.ndarray, matches: SparseMatches, calib: Calibration
) -> tuple[float, float]:
    if len(matches) == 0:
        raise EmptyMatchesError("no sparse matches to fit against")
    m = mono[matches.rows, matches.cols]
    s, t, degenerate = solve_scale_shift(m, matches.depth(calib), matches.conf)
    if degenerate:
        warnings.warn("prior is constant over the anchors; fitted shift only", DegenerateFitWarning, stacklevel=2)
    return s, t


def weighted_residual(x, y, weights, s: float, t: float) -> float:
    return float(np.sum(weights * (s * x + t - y) ** 2))


# ---------------------------------------------------------------- refinement


def bilateral_weight(p, q, color_p, color_q, sigma_d: float, sigma_c: float) -> float:
    """Unnormalized weight between two pixels (for inspection and tests)."""
    dp = np.subtract(p, q, dtype=np.float64)
    dc = np.subtract(color_p, color_q, dtype=np.float64)
    return float(np.exp(-(dp @ dp) / (2 * sigma_d**2)) * np.exp(-(dc @ dc) / (2 * sigma_c**2)))


def bilateral_refine(
    depth_0: np.ndarray,
    matches: SparseMatches,
    image: np.ndarray,
    calib: Calibration,
    sigma_d: float = 16.0,
    sigma_c: float = 0.1,
) -> np.ndarray:
    """Add bilateral-weighted anchor residuals ``D_sparse(q) - depth_0(q)``."""
    if sigma_d <= 0 or sigma_c <= 0:
        raise ValueError("sigmas must be positive")
    depth_0 = np.asarray(depth_0, dtype=np.float64)
    if len(matches) == 0:
        return depth_0.copy()
    res = matches.depth(calib) - depth_0[matches.rows, matches.cols]
    corr = kernels.bilateral_correction(image, matches.rows, matches.cols, res, sigma_d, sigma_c)
    return depth_0 + corr


def align_prior(
    mono: np.ndarray,
    matches: SparseMatches,
    image: np.ndarray,
    calib: Calibration,
    tau: float = 0.1,
    sigma_d: float = 16.0,
    sigma_c: float = 0.1,
    refine: bool = True,
    min_depth: float = 0.05,
) -> AlignmentResult:
    """Verify the prior's scale, correct it if needed, then refine locally."""
    mono = np.asarray(mono, dtype=np.float64)
    if len(matches) == 0:
        return AlignmentResult(
            alpha=float("nan"), reliable=False, s_hat=1.0, t_hat=0.0,
            depth_0=mono, depth_refined=mono.copy(), status="unverified", num_matches=0,
        )
    alpha, reliable = scale_check(mono, matches, calib, tau)
    notes: list[str] = []
    if reliable:
        s, t, depth_0, status = 1.0, 0.0, mono, "reliable"
    else:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", DegenerateFitWarning)
            s, t = fit_scale_shift(mono, matches, calib)
        notes += [str(c.message) for c in caught]
        if s <= 0:
            # an inverted affine map would flip the depth ordering; keep the ratio scale
            notes.append(f"non-positive fitted scale {s:.4g}; using the anchor ratio {alpha:.4g}")
            s, t = alpha, 0.0
        depth_0 = s * mono + t
        if np.any(depth_0 < min_depth):
            notes.append("corrected prior clamped at the minimum depth")
            depth_0 = np.maximum(depth_0, min_depth)
        status = "corrected"
    refined = bilateral_refine(depth_0, matches, image, calib, sigma_d, sigma_c) if refine else depth_0.copy()
    return AlignmentResult(
        alpha=alpha, reliable=reliable, s_hat=s, t_hat=t, depth_0=depth_0,
        depth_refined=refined, status=status, num_matches=len(matches), notes=notes,
    )
