"""Recurrent disparity refinement at 1/4 resolution with convex upsampling.

Each step looks up the correlation pyramid around the current disparity,
encodes it together with features of the disparity map and the context,
runs the ConvGRU stack coarse-to-fine (1/16, 1/8, 1/4) and adds the
predicted increment: ``d <- max(d + delta, 0)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .correlation import CorrelationPyramid, lookup
from .encoder import CONTEXT_SCALES, ContextFeatures
from .numerics import NonFiniteError, avg_pool2d

UPSAMPLE = 4

_CELL_LEVELS = {2: (8, 4), 3: (16, 8, 4), 4: (16, 8, 4, 4)}


@dataclass
class RefinerConfig:
    gru_layers: int = 3
    hidden_dim: int = 128
    iterations: int = 32
    lookup_radius: int = 4

    def __post_init__(self):
        if self.gru_layers not in _CELL_LEVELS:
            raise ValueError(f"gru_layers must be one of {sorted(_CELL_LEVELS)}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.hidden_dim < 8 or self.lookup_radius < 0:
            raise ValueError("invalid hidden_dim or lookup_radius")


@dataclass
class RefinerState:
    hidden: dict[int, torch.Tensor]
    d: torch.Tensor
    iteration: int = 0


@dataclass
class RefinerOutput:
    disparities: list[torch.Tensor]
    full_res: torch.Tensor
    full_res_per_iter: list[torch.Tensor] = field(default_factory=list)
    state: RefinerState | None = None


def _conv(cin, cout, k=3):
    return nn.Conv2d(cin, cout, k, padding=k // 2)


class ConvGRU(nn.Module):
    def __init__(self, hidden: int, inp: int):
        super().__init__()
        self.hidden = hidden
        self.convzr = _conv(hidden + inp, 2 * hidden)
        self.convq = _conv(hidden + inp, hidden)

    def forward(self, h: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        hx = torch.cat([h, x], 1)
        z, r = torch.sigmoid(self.convzr(hx)).split(self.hidden, 1)
        q = torch.tanh(self.convq(torch.cat([r * h, x], 1)))
        return (1 - z) * h + z * q


def _pool2(x: torch.Tensor) -> torch.Tensor:
    return F.avg_pool2d(x, 3, stride=2, padding=1)


def _up_to(x: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, size=ref.shape[-2:], mode="bilinear", align_corners=False)


def convex_upsample(d_low: torch.Tensor, mask: torch.Tensor, atol: float = 1e-6) -> torch.Tensor:
    """Full-resolution disparity as a convex mix of each 3x3 coarse neighbourhood.

    ``d_low`` is ``[N,1,h,w]`` (or ``[h,w]``); ``mask`` is ``[N, 9*16, h, w]``
    (or ``[144, h, w]``), already normalized over the 9 neighbours. Values are
    multiplied by 4 to convert to full-resolution pixels. Borders replicate.
    """
    squeeze = d_low.dim() == 2
    if squeeze:
        d_low, mask = d_low[None, None], mask[None]
    n, _, h, w = d_low.shape
    f = UPSAMPLE
    m = mask.view(n, 1, 9, f, f, h, w)
    sums = m.sum(2)
    if not torch.allclose(sums, torch.ones_like(sums), atol=atol) or bool((m < -atol).any()):
        raise ValueError("upsampling mask must be non-negative and sum to 1 over the 9 neighbours")
    padded = F.pad(f * d_low, (1, 1, 1, 1), mode="replicate")
    patches = F.unfold(padded, 3).view(n, 1, 9, 1, 1, h, w)
    up = (m * patches).sum(2)  # [n,1,f,f,h,w]
    up = up.permute(0, 1, 4, 2, 5, 3).reshape(n, 1, f * h, f * w)
    return up[0, 0] if squeeze else up


class Refiner(nn.Module):
    def __init__(self, config: RefinerConfig):
        super().__init__()
        self.config = config
        hd = config.hidden_dim
        corr_ch = (2 * config.lookup_radius + 1) * 4
        self.corr_enc = nn.Sequential(_conv(corr_ch, 64, k=1), nn.ReLU(), _conv(64, 64), nn.ReLU())
        self.disp_enc = nn.Sequential(_conv(1, 32), nn.ReLU(), _conv(32, 32), nn.ReLU())
        self.fuse = _conv(64 + 32 + hd, hd - 1)
        self.levels = _CELL_LEVELS[config.gru_layers]
        cells = []
        for i, lvl in enumerate(self.levels):
            cells.append(ConvGRU(hd, self._cell_input(i, lvl)))
        self.cells = nn.ModuleList(cells)
        self.delta_head = nn.Sequential(_conv(hd, 128), nn.ReLU(), _conv(128, 1))
        self.mask_head = nn.Sequential(_conv(hd, 256), nn.ReLU(), _conv(256, 9 * UPSAMPLE * UPSAMPLE, k=1))
        with torch.no_grad():
            self.delta_head[-1].weight.mul_(0.1)
            self.delta_head[-1].bias.zero_()

    def _cell_input(self, i: int, lvl: int) -> int:
        hd = self.config.hidden_dim
        active = set(self.levels)
        if lvl == 4:
            if i > 0 and self.levels[i - 1] == 4:
                return hd + hd  # stacked finest cell: motion + first finest state
            return hd + (hd if 8 in active else 0)
        if lvl == 8:
            return hd + hd + (hd if 16 in active else 0)  # ctx, pooled h4, up h16
        return hd + hd  # ctx, pooled h8

    def init_state(self, ctx: ContextFeatures, d1: torch.Tensor) -> RefinerState:
        if d1.shape[-2:] != ctx[4].shape[-2:]:
            raise ValueError(
                f"initial disparity {tuple(d1.shape[-2:])} does not match context {tuple(ctx[4].shape[-2:])}"
            )
        hidden = {s: torch.tanh(ctx[s]) for s in CONTEXT_SCALES}
        return RefinerState(hidden=hidden, d=d1, iteration=0)

    def upsample_mask(self, h4: torch.Tensor) -> torch.Tensor:
        n, _, h, w = h4.shape
        logits = 0.25 * self.mask_head(h4).to(self.delta_head[-1].weight.dtype)
        return torch.softmax(logits.view(n, 9, -1, h, w), dim=1).view(n, -1, h, w)

    def gru_step(
        self,
        state: RefinerState,
        pyr: CorrelationPyramid,
        ctx: ContextFeatures,
        detach_lookup: bool = False,
    ) -> tuple[RefinerState, torch.Tensor]:
        d = state.d
        corr = lookup(pyr, d.detach() if detach_lookup else d, self.config.lookup_radius)
        motion = self.fuse(torch.cat([self.corr_enc(corr), self.disp_enc(d), ctx[4]], 1))
        motion = torch.cat([F.relu(motion), d], 1)

        h = dict(state.hidden)
        finest_prev = None
        for cell, lvl in zip(self.cells, self.levels):
            if lvl == 16:
                x = torch.cat([ctx[16], _pool2(h[8])], 1)
            elif lvl == 8:
                parts = [ctx[8], _pool2(h[4])]
                if 16 in self.levels:
                    parts.append(_up_to(h[16], h[8]))
                x = torch.cat(parts, 1)
            elif finest_prev is not None:
                x = torch.cat([motion, finest_prev], 1)
            else:
                parts = [motion]
                if 8 in self.levels:
                    parts.append(_up_to(h[8], h[4]))
                x = torch.cat(parts, 1)
            h[lvl] = cell(h[lvl], x)
            if lvl == 4:
                finest_prev = h[4]
        delta = self.delta_head(h[4])
        d_new = torch.clamp(d + delta, min=0.0)
        return RefinerState(hidden=h, d=d_new, iteration=state.iteration + 1), delta

    def forward(
        self,
        pyr: CorrelationPyramid,
        ctx: ContextFeatures,
        d1: torch.Tensor,
        iterations: int | None = None,
        detach_lookup: bool = False,
        upsample_all: bool = False,
    ) -> RefinerOutput:
        iterations = self.config.iterations if iterations is None else iterations
        state = self.init_state(ctx, d1)
        ds, full = [], []
        for it in range(iterations):
            state, _ = self.gru_step(state, pyr, ctx, detach_lookup=detach_lookup)
            if not bool(torch.isfinite(state.d).all()):
                raise NonFiniteError(f"non-finite disparity at refinement iteration {it + 1}")
            ds.append(state.d)
            if upsample_all or it == iterations - 1:
                full.append(convex_upsample(state.d, self.upsample_mask(state.hidden[4])))
        return RefinerOutput(disparities=ds, full_res=full[-1], full_res_per_iter=full, state=state)


def downsample_disparity(d_full: torch.Tensor) -> torch.Tensor:
    """Full-resolution disparity to 1/4 resolution (block mean, rescaled)."""
    return avg_pool2d(d_full, UPSAMPLE) / UPSAMPLE
