"""Self-supervised objectives for the mono and stereo stages.

All image tensors are ``[N, C, H, W]`` and disparities ``[N, 1, H, W]``;
unbatched inputs are accepted where noted. Every loss is a mean, so values
are comparable across resolutions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F

from . import kernels
from .lora import LoraAdapter
from .numerics import warp_horizontal

C1 = 0.01**2
C2 = 0.03**2


@dataclass
class LossWeights:
    alpha_photo: float = 0.15
    lambda1: float = 1e-3
    lambda3: float = 1e-3
    lambda4: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.alpha_photo <= 1.0:
            raise ValueError("alpha_photo must lie in [0, 1]")
        if min(self.lambda1, self.lambda3, self.lambda4) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class Masks:
    m_occ: torch.Tensor
    m_out: torch.Tensor


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 3 else x


def _mean3x3(x: torch.Tensor) -> torch.Tensor:
    return F.avg_pool2d(F.pad(x, (1, 1, 1, 1), mode="reflect"), 3, stride=1)


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-pixel SSIM over 3x3 windows, averaged over channels.

    Returns ``[N, H, W]`` (or ``[H, W]`` for unbatched ``[C, H, W]`` input).
    """
    squeeze = a.dim() == 3
    a, b = _batched(a), _batched(b)
    mu_a, mu_b = _mean3x3(a), _mean3x3(b)
    var_a = _mean3x3(a * a) - mu_a**2
    var_b = _mean3x3(b * b) - mu_b**2
    cov = _mean3x3(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a**2 + mu_b**2 + C1) * (var_a + var_b + C2)
    s = (num / den).mean(1)
    return s[0] if squeeze else s


def _masked_mean(x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    if mask is None:
        return x.mean()
    mask = mask.expand_as(x)
    return (x * mask).sum() / mask.sum().clamp(min=1.0)


def photometric(
    rec: torch.Tensor, target: torch.Tensor, alpha_photo: float, mask: torch.Tensor | None = None
) -> torch.Tensor:
    """``alpha * |rec - target|_1 + (1 - alpha) * (1 - SSIM) / 2``, averaged."""
    rec, target = _batched(rec), _batched(target)
    l1 = (rec - target).abs().mean(1)
    dssim = (1 - ssim(rec, target)) / 2
    per_pixel = alpha_photo * l1 + (1 - alpha_photo) * dssim
    if mask is not None:
        mask = _batched(mask)[:, 0] if mask.dim() >= 3 else mask
    return _masked_mean(per_pixel, mask)


def occlusion_mask(d1: torch.Tensor) -> torch.Tensor:
    """``[N, 1, H, W]`` visibility (1 visible, 0 occluded) from a left disparity."""
    d = d1.detach().to(torch.float64).cpu().numpy()
    vis = [kernels.visibility_mask(d[i, 0]) for i in range(d.shape[0])]
    return torch.as_tensor(np.stack(vis)[:, None], dtype=d1.dtype, device=d1.device)


def occlusion_composite(
    img_left: torch.Tensor, img_mono_rec: torch.Tensor, d1: torch.Tensor
) -> tuple[torch.Tensor, Masks]:
    """Blend the left image with the mono reconstruction at occluded pixels.

    ``img_mono_rec`` is the right image warped with ``d1``. Returns the
    composited target and the masks; ``m_out`` is 1 where the ``d1`` warp
    leaves the image.
    """
    img_left, img_mono_rec, d1 = _batched(img_left), _batched(img_mono_rec), _batched(d1)
    if (d1 < 0).any():
        raise ValueError("disparity must be non-negative")
    m_occ = occlusion_mask(d1)
    n, _, h, w = d1.shape
    cols = torch.arange(w, dtype=d1.dtype, device=d1.device).view(1, 1, 1, w)
    m_out = ((cols - d1) < 0).to(d1.dtype)
    composite = m_occ * img_left + (1 - m_occ) * img_mono_rec
    return composite, Masks(m_occ=m_occ, m_out=m_out)


def _grad_x(x: torch.Tensor) -> torch.Tensor:
    return x[..., :, 1:] - x[..., :, :-1]


def _grad_y(x: torch.Tensor) -> torch.Tensor:
    return x[..., 1:, :] - x[..., :-1, :]


def smoothness(d: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """Edge-aware first-order smoothness of the mean-normalized disparity."""
    d, image = _batched(d), _batched(image)
    mean = d.mean(dim=(2, 3), keepdim=True)
    dn = d / (mean + 1e-7)
    wx = torch.exp(-_grad_x(image).abs().mean(1, keepdim=True))
    wy = torch.exp(-_grad_y(image).abs().mean(1, keepdim=True))
    return (_grad_x(dn).abs() * wx).mean() + (_grad_y(dn).abs() * wy).mean()


def guidance(d1: torch.Tensor, d_final: torch.Tensor, m_out: torch.Tensor) -> torch.Tensor:
    """Gradient agreement with the prior plus absolute agreement where ``m_out``."""
    gx = (_grad_x(d1) - _grad_x(d_final)).abs().mean()
    gy = (_grad_y(d1) - _grad_y(d_final)).abs().mean()
    return gx + gy + (m_out * (d1 - d_final).abs()).mean()


def lora_l1(adapters: Iterable[LoraAdapter]) -> torch.Tensor | float:
    total = 0.0
    for a in adapters:
        if a.in_sparse_stage:
            total = total + a.l1_penalty()
    return total


def total_objectives(
    stage: str,
    weights: LossWeights,
    rec: torch.Tensor,
    smooth: torch.Tensor,
    guide: torch.Tensor | None = None,
    adapters: Iterable[LoraAdapter] | None = None,
) -> torch.Tensor:
    """Stage objective, plus the adapters' l1 term for those in their sparse stage."""
    if stage == "mono":
        total = rec + weights.lambda1 * smooth
    elif stage == "stereo":
        if guide is None:
            raise ValueError("stereo objective needs the guidance term")
        total = rec + weights.lambda3 * smooth + weights.lambda4 * guide
    else:
        raise ValueError(f"unknown stage {stage!r}")
    if adapters is not None:
        total = total + lora_l1(adapters)
    return total


def stereo_terms(
    img_left: torch.Tensor,
    img_right: torch.Tensor,
    d1: torch.Tensor,
    d_final: torch.Tensor,
    weights: LossWeights,
) -> dict[str, torch.Tensor]:
    """Reconstruction, smoothness and guidance terms for one stereo prediction."""
    mono_rec, _ = warp_horizontal(img_right, d1)
    target, masks = occlusion_composite(img_left, mono_rec.detach(), d1.detach())
    # out-of-image samples read as zero and stay in the average, so pushing
    # disparities off the image is penalized rather than excused
    rec, _ = warp_horizontal(img_right, d_final)
    return {
        "rec": photometric(rec, target.detach(), weights.alpha_photo),
        "smooth": smoothness(d_final, img_left),
        "guide": guidance(d1.detach(), d_final, masks.m_out),
    }


def mono_terms(
    img_left: torch.Tensor, img_right: torch.Tensor, d_mono: torch.Tensor, weights: LossWeights
) -> dict[str, torch.Tensor]:
    """Terms of the mono objective; occlusions come from the prediction itself."""
    rec, _ = warp_horizontal(img_right, d_mono)
    target, _ = occlusion_composite(img_left, rec, d_mono.detach())
    return {
        "rec": photometric(rec, target, weights.alpha_photo),
        "smooth": smoothness(d_mono, img_left),
    }
