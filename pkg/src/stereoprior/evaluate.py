"""Evaluation of a trained checkpoint on a dataset directory."""

from __future__ import annotations

import json
import logging
import warnings
from pathlib import Path

import numpy as np
import torch

from . import imageio
from .metrics import MetricsReport, compute_metrics, end_point_error, valid_depth_mask
from .model import MAX_DEPTH, MIN_DEPTH, PriorResult, StereoModel, compute_prior
from .train import Scene, load_model, scene_from_sample, split_indices
from .synthdata import list_samples, read_sample

log = logging.getLogger(__name__)


class MissingGroundTruth(UserWarning):
    pass


def disparity_to_depth(disp: np.ndarray, fb: float) -> np.ndarray:
    return np.clip(fb / np.maximum(disp, 1e-12), MIN_DEPTH, MAX_DEPTH)


@torch.no_grad()
def refine_scene(model: StereoModel, scene: Scene, prior: PriorResult, mixed_precision: bool = False):
    """Per-iteration full-resolution disparities for one scene."""
    dtype = next(model.refiner.parameters()).dtype
    d1 = torch.as_tensor(prior.disparity, dtype=dtype)[None, None]
    out = model(
        scene.left[None].to(dtype), scene.right[None].to(dtype), d1, detach_lookup=False, upsample_all=True,
        mixed_precision=mixed_precision,
    )
    return [d[0, 0].double().numpy() for d in out.full_res_per_iter]


def non_increasing(seq: list[float]) -> bool:
    return all(b <= a for a, b in zip(seq, seq[1:]))


def evaluate_scene(model: StereoModel, scene: Scene, prior: PriorResult, mixed_precision: bool = False) -> dict:
    per_iter = refine_scene(model, scene, prior, mixed_precision)
    final = per_iter[-1]
    gt_d, gt_z = scene.gt_disparity, scene.gt_depth
    mask = valid_depth_mask(gt_z)
    fb = scene.calib.fb
    refined = compute_metrics(disparity_to_depth(final, fb), gt_z, mask)
    prior_m = compute_metrics(disparity_to_depth(prior.disparity, fb), gt_z, mask)
    iter_epe = [end_point_error(d, gt_d, mask) for d in per_iter]
    return {
        "name": scene.name,
        "seed": scene.seed,
        "refined": refined.to_dict(),
        "prior": prior_m.to_dict(),
        "epe_refined": iter_epe[-1],
        "epe_prior": end_point_error(prior.disparity, gt_d, mask),
        "epe_per_iter": iter_epe,
        "epe_non_increasing": non_increasing(iter_epe),
        "alignment": {
            "status": prior.alignment.status,
            "alpha": prior.alignment.alpha,
            "s": prior.alignment.s_hat,
            "t": prior.alignment.t_hat,
            "matches": prior.alignment.num_matches,
        },
        "_final": final,
    }


def summarize(per_scene: list[dict]) -> dict:
    if not per_scene:
        raise ValueError("no scenes evaluated")
    refined = MetricsReport.mean([MetricsReport(**r["refined"]) for r in per_scene])
    prior = MetricsReport.mean([MetricsReport(**r["prior"]) for r in per_scene])
    epe_ref = float(np.mean([r["epe_refined"] for r in per_scene]))
    epe_pri = float(np.mean([r["epe_prior"] for r in per_scene]))
    return {
        "num_scenes": len(per_scene),
        "refined": refined.to_dict(),
        "prior": prior.to_dict(),
        "epe_refined": epe_ref,
        "epe_prior": epe_pri,
        "epe_reduction": 1.0 - epe_ref / epe_pri if epe_pri > 0 else 0.0,
        "epe_per_iter": np.mean([r["epe_per_iter"] for r in per_scene], axis=0).tolist(),
        "monotone_fraction": float(np.mean([r["epe_non_increasing"] for r in per_scene])),
    }


def evaluate_scenes(
    model: StereoModel,
    scenes: list[Scene],
    priors: list[PriorResult] | None = None,
    align_kwargs=None,
    mixed_precision: bool = False,
) -> list[dict]:
    model.eval()
    out = []
    for i, scene in enumerate(scenes):
        prior = priors[i] if priors is not None else compute_prior(
            model, scene.left, scene.right, scene.calib, align_kwargs
        )
        out.append(evaluate_scene(model, scene, prior, mixed_precision))
    return out


def _write_depth(dump_dir: Path, name: str, depth: np.ndarray) -> None:
    dump_dir.mkdir(parents=True, exist_ok=True)
    imageio.write_pfm(dump_dir / f"{name}_depth.pfm", depth)
    imageio.write_ppm(dump_dir / f"{name}_depth.ppm", imageio.colorize(1.0 / depth))


def run_eval(
    ckpt: str | Path,
    data_dir: str | Path,
    report: str | Path | None = None,
    dump_depth: str | Path | None = None,
    split: str = "all",
) -> dict:
    """Evaluate ``ckpt`` on every scene of ``data_dir`` (or its seeded ``val`` split)."""
    model, config, _ = load_model(ckpt)
    paths = list_samples(data_dir)
    if not paths:
        raise ValueError(f"no scenes found in {data_dir}")
    if split == "val":
        _, val_idx = split_indices(len(paths), config.seed, config.data.val_fraction)
        paths = [paths[i] for i in val_idx]
    elif split != "all":
        raise ValueError(f"unknown split {split!r}")

    per_scene, skipped = [], []
    align_kw = vars(config.align).copy()
    for p in paths:
        sample = read_sample(p)
        if sample.gt_depth is None or sample.gt_disparity is None:
            warnings.warn(f"{p.name}: missing ground truth, skipped", MissingGroundTruth, stacklevel=2)
            skipped.append(p.name)
            continue
        scene = scene_from_sample(p.name, sample)
        res = evaluate_scenes(model, [scene], align_kwargs=align_kw, mixed_precision=config.mixed_precision)[0]
        if dump_depth is not None:
            _write_depth(Path(dump_depth), p.name, disparity_to_depth(res["_final"], scene.calib.fb))
        per_scene.append(res)
    if not per_scene:
        raise ValueError("no scene with ground truth to evaluate")
    result = summarize(per_scene)
    result["skipped"] = skipped
    result["scenes"] = [{k: v for k, v in r.items() if not k.startswith("_")} for r in per_scene]
    if report is not None:
        Path(report).write_text(json.dumps(result, indent=1, sort_keys=True))
    log.info(
        "evaluated %d scenes (skipped %d): EPE %.3f (prior %.3f), A1 %.3f",
        len(per_scene), len(skipped), result["epe_refined"], result["epe_prior"], result["refined"]["a1"],
    )
    return result
