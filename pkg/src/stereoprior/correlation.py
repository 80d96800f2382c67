"""All-pairs horizontal correlation volume, its pyramid, and the lookup op.

Volumes are laid out ``[N, H, W, D]`` (or ``[H, W, D]`` unbatched) with
``D = d_max + 1`` and entry ``(i, j, d) = <f_L(i, j), f_R(i, j - d)>``.
Entries with ``j - d < 0`` hold 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .numerics import avg_pool_last, linear_sample_1d

NUM_LEVELS = 4


def default_d_max(width: int) -> int:
    """Half the feature width, rounded up so that ``d_max + 1`` is a multiple of 8."""
    d = max(width // 2, 7)
    while (d + 1) % 8:
        d += 1
    return d


def build_volume(f_left: torch.Tensor, f_right: torch.Tensor, d_max: int) -> torch.Tensor:
    if f_left.shape != f_right.shape:
        raise ValueError(f"feature shapes differ: {tuple(f_left.shape)} vs {tuple(f_right.shape)}")
    squeeze = f_left.dim() == 3
    if squeeze:
        f_left, f_right = f_left.unsqueeze(0), f_right.unsqueeze(0)
    width = f_left.shape[-1]
    if d_max >= width:
        raise ValueError(f"d_max={d_max} must be smaller than the feature width {width}")
    n, _, h, _ = f_left.shape
    slices = []
    for d in range(d_max + 1):
        prod = (f_left[..., d:] * f_right[..., : width - d]).sum(1)
        if d:
            prod = torch.cat([prod.new_zeros(n, h, d), prod], dim=-1)
        slices.append(prod)
    vol = torch.stack(slices, dim=-1)
    return vol[0] if squeeze else vol


def pad_disparity_axis(volume: torch.Tensor, multiple: int = 8) -> torch.Tensor:
    """Append zero (always-masked) disparity slices up to a multiple of ``multiple``."""
    extra = (-volume.shape[-1]) % multiple
    if not extra:
        return volume
    return torch.cat([volume, volume.new_zeros(*volume.shape[:-1], extra)], dim=-1)


@dataclass
class CorrelationPyramid:
    levels: list[torch.Tensor]
    d_max: int

    @property
    def num_levels(self) -> int:
        return len(self.levels)


def build_pyramid(volume: torch.Tensor, d_max: int | None = None) -> CorrelationPyramid:
    length = volume.shape[-1]
    if length % (2 ** (NUM_LEVELS - 1)):
        raise ValueError(f"disparity axis length {length} not divisible by {2 ** (NUM_LEVELS - 1)}")
    levels = [volume]
    for _ in range(NUM_LEVELS - 1):
        levels.append(avg_pool_last(levels[-1], 2))
    return CorrelationPyramid(levels=levels, d_max=length - 1 if d_max is None else d_max)


def lookup(pyr: CorrelationPyramid, disparity: torch.Tensor, radius: int) -> torch.Tensor:
    """Sample each level at ``d / 2**l + delta`` for ``delta in [-radius, radius]``.

    ``disparity`` is ``[N, 1, H, W]`` (or ``[H, W]`` for an unbatched pyramid).
    Returns ``[N, (2r+1)*L, H, W]``, level-major, offsets ascending.
    """
    unbatched = pyr.levels[0].dim() == 3
    if unbatched:
        disparity = disparity.reshape(1, 1, *disparity.shape[-2:])
    offsets = torch.arange(-radius, radius + 1, dtype=disparity.dtype, device=disparity.device)
    d = disparity[:, 0].unsqueeze(-1)  # [N, H, W, 1]
    out = []
    for lvl, vol in enumerate(pyr.levels):
        if unbatched:
            vol = vol.unsqueeze(0)
        pos = d / (2**lvl) + offsets
        out.append(linear_sample_1d(vol, pos))
    feats = torch.cat(out, dim=-1).permute(0, 3, 1, 2).contiguous()
    return feats[0] if unbatched else feats
