"""Convolutional trunk with LoRA attachment points, mono head and context encoder.

The trunk is five strided stages (32, 48, 64, 96, 128 channels). Every trunk
convolution is a :class:`~stereoprior.lora.LoraConv2d`, so the base kernels
stay frozen and only the adapters train.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .lora import LoraConv2d, iter_adapters

PYRAMID_SCALES = (4, 8, 16, 32)
CONTEXT_SCALES = (4, 8, 16)
TRUNK_CHANNELS = (32, 48, 64, 96, 128)


@dataclass
class FeaturePyramid:
    levels: dict[int, torch.Tensor]

    def __getitem__(self, scale: int) -> torch.Tensor:
        return self.levels[scale]


@dataclass
class ContextFeatures:
    levels: dict[int, torch.Tensor]

    def __getitem__(self, scale: int) -> torch.Tensor:
        return self.levels[scale]


def normalize_image(img: torch.Tensor) -> torch.Tensor:
    return (img - 0.5) / 0.25


class Encoder(nn.Module):
    def __init__(self, generator: torch.Generator | None = None, **lora_kwargs):
        super().__init__()
        chans = (3,) + TRUNK_CHANNELS
        stages = []
        for i in range(len(TRUNK_CHANNELS)):
            cin, cout = chans[i], chans[i + 1]
            stages.append(
                nn.ModuleList(
                    [
                        LoraConv2d(cin, cout, 3, stride=2, generator=generator, **lora_kwargs),
                        LoraConv2d(cout, cout, 3, stride=1, generator=generator, **lora_kwargs),
                    ]
                )
            )
        self.stages = nn.ModuleList(stages)

    def forward(self, image: torch.Tensor, max_scale: int = 32) -> FeaturePyramid:
        x = normalize_image(image)
        levels = {}
        scale = 1
        for down, conv in self.stages:
            x = F.relu(down(x))
            x = F.relu(conv(x)) + x
            scale *= 2
            if scale in PYRAMID_SCALES:
                levels[scale] = x
            if scale >= max_scale:
                break
        return FeaturePyramid(levels)

    def adapters(self):
        return list(iter_adapters(self))

    def merge_adapters(self) -> None:
        for a in self.adapters():
            a.merge_()

    def attach_fresh_adapters(self, generator: torch.Generator | None = None) -> None:
        for m in self.modules():
            if isinstance(m, LoraConv2d):
                m.attach_fresh(generator)

    def base_kernels(self) -> list[torch.Tensor]:
        return [a.W0 for a in self.adapters()]


def _check_divisible(image: torch.Tensor, k: int) -> None:
    h, w = image.shape[-2:]
    if h % k or w % k:
        raise ValueError(f"input size {h}x{w} must be divisible by {k}")


def extract_pyramid(encoder: Encoder, image: torch.Tensor) -> FeaturePyramid:
    """Features at 1/4, 1/8, 1/16 and 1/32 resolution. Accepts ``[3,H,W]`` or batched."""
    _check_divisible(image, 32)
    squeeze = image.dim() == 3
    pyr = encoder(image.unsqueeze(0) if squeeze else image)
    if squeeze:
        return FeaturePyramid({s: v[0] for s, v in pyr.levels.items()})
    return pyr


def _conv(cin, cout, k=3, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


class MonoDecoder(nn.Module):
    """Upsample-concat-conv fusion down to 1/4 resolution and a disparity head.

    The head regresses disparity as a fraction of the image width, bounded to
    ``[min_frac, max_frac]``; metric depth follows from the calibration as
    ``f * b / (W * frac)``.
    """

    def __init__(self, min_frac: float = 0.005, max_frac: float = 0.4, init_frac: float = 0.1):
        super().__init__()
        c4, c8, c16, c32 = TRUNK_CHANNELS[1:]
        self.reduce32 = _conv(c32, 96)
        self.fuse16 = _conv(96 + c16, 64)
        self.fuse8 = _conv(64 + c8, 48)
        self.fuse4 = _conv(48 + c4, 48)
        self.head = nn.Sequential(_conv(48, 32), nn.ReLU(), _conv(32, 1))
        self.min_frac = min_frac
        self.max_frac = max_frac
        init = (init_frac - min_frac) / (max_frac - min_frac)
        with torch.no_grad():
            self.head[-1].bias.fill_(float(torch.logit(torch.tensor(init))))

    def forward(self, pyr: FeaturePyramid, out_size: tuple[int, int]) -> torch.Tensor:
        x = F.relu(self.reduce32(pyr[32]))
        for scale, conv in ((16, self.fuse16), (8, self.fuse8), (4, self.fuse4)):
            skip = pyr[scale]
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = F.relu(conv(torch.cat([x, skip], 1)))
        x = self.head(x)
        x = F.interpolate(x, size=out_size, mode="bilinear", align_corners=False)
        return self.min_frac + (self.max_frac - self.min_frac) * torch.sigmoid(x)


class MatchHead(nn.Module):
    """Matching features ``f_L``/``f_R`` at 1/4 resolution."""

    def __init__(self, out_ch: int = 64):
        super().__init__()
        c4, c8 = TRUNK_CHANNELS[1], TRUNK_CHANNELS[2]
        self.fuse = _conv(c4 + c8, 96)
        self.out = _conv(96, out_ch, k=1)

    def forward(self, pyr: FeaturePyramid) -> torch.Tensor:
        up = F.interpolate(pyr[8], size=pyr[4].shape[-2:], mode="bilinear", align_corners=False)
        return self.out(F.relu(self.fuse(torch.cat([pyr[4], up], 1))))


class ContextEncoder(nn.Module):
    """``h_l = align_l(pyramid_l) + cnn_l(image)`` for l in {4, 8, 16}."""

    def __init__(self, hidden_dim: int = 128):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.align = nn.ModuleDict(
            {str(s): _conv(c, hidden_dim) for s, c in zip(CONTEXT_SCALES, TRUNK_CHANNELS[1:4])}
        )
        self.stem = nn.Sequential(
            _conv(3, 32, stride=2), nn.ReLU(), _conv(32, 64, stride=2), nn.ReLU()
        )
        self.cnn = nn.ModuleDict(
            {
                "4": _conv(64, hidden_dim),
                "8": _conv(hidden_dim, hidden_dim, stride=2),
                "16": _conv(hidden_dim, hidden_dim, stride=2),
            }
        )

    def cnn_branch(self, image: torch.Tensor) -> dict[int, torch.Tensor]:
        x = self.stem(normalize_image(image))
        out = {}
        for s in CONTEXT_SCALES:
            x = self.cnn[str(s)](x if s == 4 else F.relu(x))
            out[s] = x
        return out

    def forward(self, image: torch.Tensor, pyr: FeaturePyramid) -> ContextFeatures:
        cnn = self.cnn_branch(image)
        levels = {}
        for s in CONTEXT_SCALES:
            aligned = self.align[str(s)](pyr[s])
            if aligned.shape[1] != cnn[s].shape[1]:
                raise ValueError("alignment and CNN branch channel counts differ")
            levels[s] = aligned + cnn[s]
        return ContextFeatures(levels)


def combined_context(
    context: ContextEncoder, encoder: Encoder, image: torch.Tensor
) -> ContextFeatures:
    """Context features for a ``[3,H,W]`` or batched image."""
    _check_divisible(image, 16)
    squeeze = image.dim() == 3
    img = image.unsqueeze(0) if squeeze else image
    ctx = context(img, encoder(img, max_scale=16))
    if squeeze:
        return ContextFeatures({s: v[0] for s, v in ctx.levels.items()})
    return ctx
