"""Tensor primitives shared by every trainable module.

Gradients come from torch's autograd tape. The sampler and pooling ops are
written out here rather than delegated to ``grid_sample``/``avg_pool2d`` so
that out-of-bounds behaviour (value 0, mask 0) and the divisibility rules
are explicit.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up where a finite value is required."""


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        bad = int((~torch.isfinite(x)).sum())
        raise NonFiniteError(f"{what}: {bad} non-finite value(s)")
    return x


def _as_batched(x: torch.Tensor, ndim: int) -> tuple[torch.Tensor, bool]:
    if x.dim() == ndim - 1:
        return x.unsqueeze(0), True
    if x.dim() != ndim:
        raise ValueError(f"expected {ndim - 1}-D or {ndim}-D tensor, got shape {tuple(x.shape)}")
    return x, False


def bilinear_sample(
    src: torch.Tensor, coords: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample ``src`` at continuous pixel positions.

    Args:
        src: ``[C, H, W]`` or ``[N, C, H, W]``.
        coords: ``[2, H', W']`` or ``[N, 2, H', W']`` holding (x, y) in pixels,
            where (0, 0) is the centre of the top-left pixel.

    Returns:
        ``(out, mask)`` with ``out`` shaped ``[.., C, H', W']`` and ``mask``
        shaped ``[.., 1, H', W']``. Samples outside ``[0, W-1] x [0, H-1]``
        are 0 with mask 0.
    """
    src_b, squeeze = _as_batched(src, 4)
    coords_b, squeeze_c = _as_batched(coords, 4)
    if squeeze != squeeze_c:
        raise ValueError("src and coords must both be batched or both unbatched")
    n, c, h, w = src_b.shape
    if coords_b.shape[0] != n or coords_b.shape[1] != 2:
        raise ValueError(
            f"coords shape {tuple(coords.shape)} does not match src shape {tuple(src.shape)}"
        )
    ho, wo = coords_b.shape[2:]
    x = coords_b[:, 0]
    y = coords_b[:, 1]
    valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)

    x0 = torch.floor(x).detach()
    y0 = torch.floor(y).detach()
    wx = x - x0
    wy = y - y0
    x0i = x0.long().clamp(0, w - 1)
    y0i = y0.long().clamp(0, h - 1)
    x1i = (x0i + 1).clamp(max=w - 1)
    y1i = (y0i + 1).clamp(max=h - 1)

    flat = src_b.reshape(n, c, h * w)

    def gather(yi: torch.Tensor, xi: torch.Tensor) -> torch.Tensor:
        idx = (yi * w + xi).reshape(n, 1, ho * wo).expand(n, c, ho * wo)
        return flat.gather(2, idx).reshape(n, c, ho, wo)

    wx = wx.unsqueeze(1)
    wy = wy.unsqueeze(1)
    out = (
        gather(y0i, x0i) * (1 - wx) * (1 - wy)
        + gather(y0i, x1i) * wx * (1 - wy)
        + gather(y1i, x0i) * (1 - wx) * wy
        + gather(y1i, x1i) * wx * wy
    )
    mask = valid.unsqueeze(1).to(src_b.dtype)
    out = out * mask
    if squeeze:
        return out[0], mask[0]
    return out, mask


def pixel_grid(n: int, h: int, w: int, dtype=torch.float64, device=None) -> torch.Tensor:
    """Identity sampling coordinates ``[N, 2, H, W]``."""
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype, device=device),
        torch.arange(w, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack([xs, ys]).unsqueeze(0).expand(n, 2, h, w)


def warp_horizontal(
    src: torch.Tensor, disparity: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Fetch ``src`` at ``(x - d, y)``: reconstructs the left view from the right.

    ``src`` is ``[N, C, H, W]`` and ``disparity`` is ``[N, 1, H, W]``.
    """
    n, _, h, w = src.shape
    grid = pixel_grid(n, h, w, dtype=src.dtype, device=src.device)
    coords = torch.cat([grid[:, :1] - disparity, grid[:, 1:]], dim=1)
    return bilinear_sample(src, coords)


def linear_sample_1d(values: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
    """Linear interpolation along the last axis with zero outside ``[0, L-1]``.

    ``values`` is ``[..., L]``; ``pos`` is ``[..., K]`` with the same leading
    shape. Differentiable in both arguments.
    """
    length = values.shape[-1]
    p0 = torch.floor(pos).detach()
    frac = pos - p0
    i0 = p0.long()
    i1 = i0 + 1
    in0 = (i0 >= 0) & (i0 <= length - 1)
    in1 = (i1 >= 0) & (i1 <= length - 1)
    v0 = values.gather(-1, i0.clamp(0, length - 1)) * in0
    v1 = values.gather(-1, i1.clamp(0, length - 1)) * in1
    out = v0 * (1 - frac) + v1 * frac
    valid = (pos >= 0) & (pos <= length - 1)
    return out * valid


def avg_pool2d(src: torch.Tensor, k: int) -> torch.Tensor:
    """Mean over non-overlapping ``k x k`` blocks of the last two axes."""
    if k < 1:
        raise ValueError("k must be >= 1")
    h, w = src.shape[-2:]
    if h % k or w % k:
        raise ValueError(f"spatial size {h}x{w} not divisible by {k}")
    if k == 1:
        return src
    lead = src.shape[:-2]
    x = src.reshape(-1, h // k, k, w // k, k)
    return x.mean(dim=(2, 4)).reshape(*lead, h // k, w // k)


def avg_pool_last(src: torch.Tensor, k: int = 2) -> torch.Tensor:
    """Mean over non-overlapping groups of ``k`` along the last axis."""
    length = src.shape[-1]
    if length % k:
        raise ValueError(f"axis length {length} not divisible by {k}")
    return src.reshape(*src.shape[:-1], length // k, k).mean(-1)


def upsample_nearest(src: torch.Tensor, k: int) -> torch.Tensor:
    return src.repeat_interleave(k, dim=-2).repeat_interleave(k, dim=-1)


def upsample_bilinear(src: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    return F.interpolate(src, size=size, mode="bilinear", align_corners=False)


def _flat_params(x) -> list[torch.Tensor]:
    if isinstance(x, torch.Tensor):
        return [x]
    return list(x)


def finite_diff_check(
    f: Callable[..., torch.Tensor],
    x: torch.Tensor | Sequence[torch.Tensor],
    eps: float = 1e-6,
    n_probe: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative disagreement between autograd and central differences.

    ``f`` is called as ``f(x)`` for a single tensor or ``f()`` when ``x`` is a
    sequence of leaf tensors (e.g. module parameters) it closes over. With
    ``n_probe`` set, only that many coordinates (seeded) are checked.

    The per-coordinate error is ``|a - n| / (|a| + |n| + 1e-12)``.
    """
    params = _flat_params(x)
    call = (lambda: f(params[0])) if isinstance(x, torch.Tensor) else f
    with torch.enable_grad():
        for p in params:
            p.requires_grad_(True)
        out = call()
        if out.numel() != 1:
            raise ValueError("f must return a scalar")
        check_finite(out.detach(), "f(x)")
        grads = torch.autograd.grad(out, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    if n_probe is None or n_probe >= total:
        picks = np.arange(total)
    else:
        picks = np.sort(np.random.default_rng(seed).choice(total, size=n_probe, replace=False))
    offsets = np.cumsum([0] + sizes)

    worst = 0.0
    with torch.no_grad():
        for flat_idx in picks:
            which = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
            local = int(flat_idx - offsets[which])
            p = params[which].view(-1)
            orig = p[local].item()
            p[local] = orig + eps
            fp = call().item()
            p[local] = orig - eps
            fm = call().item()
            p[local] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"f is non-finite near coordinate {int(flat_idx)}")
            numeric = (fp - fm) / (2 * eps)
            analytic = grads[which].reshape(-1)[local].item()
            err = abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst
