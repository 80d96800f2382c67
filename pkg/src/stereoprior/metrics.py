"""Depth and disparity error metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

METRIC_NAMES = ("rel", "sq_rel", "rmse", "log_rmse", "a1", "a2", "a3")


@dataclass
class MetricsReport:
    rel: float
    sq_rel: float
    rmse: float
    log_rmse: float
    a1: float
    a2: float
    a3: float
    valid_pixel_fraction: float = 1.0

    def to_dict(self) -> dict[str, float]:
        return asdict(self)

    @classmethod
    def mean(cls, reports: list["MetricsReport"]) -> "MetricsReport":
        if not reports:
            raise ValueError("cannot average an empty list of reports")
        vals = {k: float(np.mean([getattr(r, k) for r in reports])) for k in asdict(reports[0])}
        return cls(**vals)


def valid_depth_mask(gt: np.ndarray, max_depth: float = 50.0) -> np.ndarray:
    gt = np.asarray(gt)
    return np.isfinite(gt) & (gt > 0) & (gt <= max_depth)


def compute_metrics(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> MetricsReport:
    """Standard depth metrics over the pixels selected by ``mask``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mask = np.ones(gt.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty evaluation mask")
    p, g = pred[mask], gt[mask]
    if np.any(~(g > 0)):
        raise ValueError("ground truth must be positive on masked-in pixels")
    if np.any(~(p > 0)):
        raise ValueError("predictions must be positive on masked-in pixels")
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return MetricsReport(
        rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        log_rmse=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        a1=float(np.mean(ratio < 1.25)),
        a2=float(np.mean(ratio < 1.25**2)),
        a3=float(np.mean(ratio < 1.25**3)),
        valid_pixel_fraction=float(mask.mean()),
    )


def end_point_error(pred_disp: np.ndarray, gt_disp: np.ndarray, mask: np.ndarray | None = None) -> float:
    err = np.abs(np.asarray(pred_disp, dtype=np.float64) - np.asarray(gt_disp, dtype=np.float64))
    if mask is not None:
        err = err[np.asarray(mask, dtype=bool)]
    if err.size == 0:
        raise ValueError("empty evaluation mask")
    return float(err.mean())
