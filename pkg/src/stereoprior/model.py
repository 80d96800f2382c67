"""Full network: LoRA trunk, mono prior head, matching head, context and refiner.

The metric prior path (mono head, sparse matching, scale alignment) runs
without gradients; the refiner starts from the aligned prior and is trained
through the self-supervised stereo objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .correlation import build_pyramid, build_volume, default_d_max, pad_disparity_axis
from .encoder import ContextEncoder, Encoder, MatchHead, MonoDecoder
from .lora import adapters_disabled
from .refiner import Refiner, RefinerConfig, RefinerOutput, downsample_disparity
from .scale_align import AlignmentResult, Calibration, align_prior, patch_descriptors, sparse_match

MIN_DEPTH = 0.05
MAX_DEPTH = 50.0


@dataclass
class PriorResult:
    disparity: np.ndarray  # aligned prior, full resolution, pixels
    mono_depth: np.ndarray
    alignment: AlignmentResult


class StereoModel(nn.Module):
    def __init__(
        self,
        refiner: RefinerConfig,
        lora_kwargs: dict | None = None,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.encoder = Encoder(generator=gen, **(lora_kwargs or {}))
        torch.manual_seed(seed)
        self.mono = MonoDecoder()
        self.match = MatchHead()
        self.context = ContextEncoder(refiner.hidden_dim)
        self.refiner = Refiner(refiner)
        self.to(dtype)

    # ------------------------------------------------------------ mono

    def mono_disparity(self, image: torch.Tensor) -> torch.Tensor:
        """``[N,1,H,W]`` mono disparity in pixels."""
        return image.shape[-1] * self.mono(self.encoder(image), image.shape[-2:])

    @torch.no_grad()
    def mono_depth_prior(self, image: torch.Tensor, fb: float) -> torch.Tensor:
        """Prior depth from the base trunk (stage-2 adapters switched off)."""
        with adapters_disabled(self.encoder):
            return fb / self.mono_disparity(image)

    # ------------------------------------------------------------ stereo

    def correlation(self, img_left: torch.Tensor, img_right: torch.Tensor, pyr_left=None):
        pyr_left = self.encoder(img_left, max_scale=16) if pyr_left is None else pyr_left
        pyr_right = self.encoder(img_right, max_scale=8)
        dtype = next(self.refiner.parameters()).dtype
        f_l, f_r = self.match(pyr_left).to(dtype), self.match(pyr_right).to(dtype)
        c = f_l.shape[1]
        width = f_l.shape[-1]
        d_max = min(default_d_max(width), width - 1)
        vol = build_volume(f_l, f_r, d_max) / c**0.5
        return build_pyramid(pad_disparity_axis(vol), d_max=d_max), pyr_left

    def forward(
        self,
        img_left: torch.Tensor,
        img_right: torch.Tensor,
        d1_full: torch.Tensor,
        iterations: int | None = None,
        detach_lookup: bool = True,
        upsample_all: bool = False,
        mixed_precision: bool = False,
    ) -> RefinerOutput:
        """Refine the full-resolution prior disparity ``d1_full [N,1,H,W]``.

        With ``mixed_precision`` the convolutions run in bfloat16 while the
        correlation volume and the disparity itself stay in full precision.
        """
        with torch.autocast("cpu", dtype=torch.bfloat16, enabled=mixed_precision):
            return self._refine(img_left, img_right, d1_full, iterations, detach_lookup, upsample_all)

    def _refine(self, img_left, img_right, d1_full, iterations, detach_lookup, upsample_all) -> RefinerOutput:
        corr, pyr_left = self.correlation(img_left, img_right)
        ctx = self.context(img_left, pyr_left)
        d1 = downsample_disparity(d1_full)
        out = self.refiner(
            corr, ctx, d1, iterations=iterations, detach_lookup=detach_lookup, upsample_all=upsample_all
        )
        dtype = d1_full.dtype
        out.full_res_per_iter = [d.to(dtype) for d in out.full_res_per_iter]
        out.full_res = out.full_res_per_iter[-1]
        return out


def compute_prior(
    model: StereoModel,
    img_left: torch.Tensor,
    img_right: torch.Tensor,
    calib: Calibration,
    align_kwargs: dict | None = None,
    matches=None,
) -> PriorResult:
    """Aligned metric prior for a single ``[3,H,W]`` pair (no gradients)."""
    kw = dict(align_kwargs or {})
    match_kw = {k: kw.pop(k) for k in ("min_similarity", "min_margin", "subpixel", "border") if k in kw}
    mono = model.mono_depth_prior(img_left[None].to(next(model.parameters()).dtype), calib.fb)[0, 0]
    mono = mono.double().numpy()
    left = img_left.double().numpy()
    if matches is None:
        matches = sparse_match(
            patch_descriptors(left), patch_descriptors(img_right.double().numpy()), **match_kw
        )
    result = align_prior(mono, matches, left, calib, **kw)
    depth = np.clip(result.depth_refined, MIN_DEPTH, MAX_DEPTH)
    # disparities beyond the matcher's search range cannot be verified by any anchor
    disparity = np.minimum(calib.fb / depth, max_disparity_px(left.shape[-1]))
    return PriorResult(disparity=disparity, mono_depth=mono, alignment=result)


def max_disparity_px(width: int) -> float:
    """Search range shared by the sparse matcher and the prior clamp."""
    return float(width // 2)
