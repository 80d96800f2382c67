"""Two-stage training: mono adaptation, merge, then stereo refinement."""

from __future__ import annotations

import logging
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import checkpoint
from .config import RunConfig
from .losses import lora_l1, mono_terms, stereo_terms, total_objectives
from .model import PriorResult, StereoModel, compute_prior
from .scale_align import Calibration
from .synthdata import Sample, gen_random_scene, list_samples, read_sample, sample_seed

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "stereoprior_model"


class NonFiniteLoss(FloatingPointError):
    def __init__(self, message: str, seeds: list[int]):
        super().__init__(message)
        self.seeds = seeds


@dataclass
class Scene:
    name: str
    left: torch.Tensor
    right: torch.Tensor
    calib: Calibration
    seed: int
    gt_disparity: np.ndarray | None = None
    gt_depth: np.ndarray | None = None


@dataclass
class TrainResult:
    model: StereoModel
    history: list[dict] = field(default_factory=list)
    train_names: list[str] = field(default_factory=list)
    val_names: list[str] = field(default_factory=list)
    checkpoint_bytes: bytes = b""


def set_determinism(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def scene_from_sample(name: str, s: Sample, dtype=torch.float32) -> Scene:
    return Scene(
        name=name,
        left=torch.as_tensor(s.I_L, dtype=dtype),
        right=torch.as_tensor(s.I_R, dtype=dtype),
        calib=s.calib,
        seed=s.seed,
        gt_disparity=s.gt_disparity,
        gt_depth=s.gt_depth,
    )


def load_scenes(data_dir: str | Path | None, config: RunConfig) -> list[Scene]:
    """Scenes from a dataset directory, or generated in memory from ``config``."""
    if data_dir is not None:
        paths = list_samples(data_dir)
        return [scene_from_sample(p.name, read_sample(p)) for p in paths]
    count = config.data.train_count + config.val_count
    scenes = []
    for i in range(count):
        s = gen_random_scene(config.data, sample_seed(config.seed, i))
        scenes.append(scene_from_sample(f"scene_{i:05d}", s))
    return scenes


def split_indices(n: int, seed: int, val_fraction: float = 0.2) -> tuple[list[int], list[int]]:
    """Seeded train/validation split (validation gets ``round(val_fraction * n)``)."""
    if n < 2:
        raise ValueError("need at least two scenes to split")
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5917])).permutation(n)
    n_val = min(max(int(round(val_fraction * n)), 1), n - 1)
    return sorted(perm[n_val:].tolist()), sorted(perm[:n_val].tolist())


def _batches(indices: list[int], batch_size: int, rng: np.random.Generator):
    order = rng.permutation(indices).tolist()
    for i in range(0, len(order), batch_size):
        yield order[i : i + batch_size]


def _stack(scenes: list[Scene], idx: list[int]):
    left = torch.stack([scenes[i].left for i in idx])
    right = torch.stack([scenes[i].right for i in idx])
    fb = torch.tensor([scenes[i].calib.fb for i in idx], dtype=left.dtype).view(-1, 1, 1, 1)
    return left, right, fb


def _param_groups(lora_params, other_params, weight_decay: float):
    groups = []
    if lora_params:
        groups.append({"params": lora_params, "weight_decay": 0.0})
    if other_params:
        groups.append({"params": other_params, "weight_decay": weight_decay})
    return groups


def _check(loss: torch.Tensor, scenes: list[Scene], idx: list[int], stage: str) -> None:
    if not bool(torch.isfinite(loss)):
        seeds = [scenes[i].seed for i in idx]
        log.error("non-finite %s loss on batch with seeds %s", stage, seeds)
        raise NonFiniteLoss(f"non-finite {stage} loss (batch seeds {seeds})", seeds)


def _l1_value(adapters) -> float:
    v = lora_l1(adapters)
    return float(v.detach()) if torch.is_tensor(v) else float(v)


def _epoch_log(history, stage, epoch, sums, count, extra=None):
    entry = {"stage": stage, "epoch": epoch}
    entry.update({k: v / max(count, 1) for k, v in sums.items()})
    if extra:
        entry.update(extra)
    history.append(entry)
    log.info("%s epoch %d: %s", stage, epoch, {k: round(v, 5) for k, v in entry.items() if isinstance(v, float)})


def train_stage1(model: StereoModel, scenes, train_idx, config: RunConfig, history, rng) -> None:
    adapters = model.encoder.adapters()
    steps = config.stage1_epochs * math.ceil(len(train_idx) / config.batch_size)
    for a in adapters:
        a.start_schedule(steps)
    lora_params = [p for a in adapters for p in a.parameters()]
    opt = torch.optim.AdamW(
        _param_groups(lora_params, list(model.mono.parameters()), config.weight_decay), lr=config.lr_stage1
    )
    model.train()
    for epoch in range(config.stage1_epochs):
        sums = {"l_sup": 0.0, "l_train": 0.0, "rec": 0.0, "smooth": 0.0}
        n = 0
        for idx in _batches(train_idx, config.batch_size, rng):
            left, right, _ = _stack(scenes, idx)
            d_mono = model.mono_disparity(left)
            terms = mono_terms(left, right, d_mono, config.loss)
            sup = total_objectives("mono", config.loss, terms["rec"], terms["smooth"])
            _check(sup, scenes, idx, "mono")
            opt.zero_grad(set_to_none=True)
            sup.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_([p for g in opt.param_groups for p in g["params"]], config.grad_clip)
            opt.step()
            l1 = _l1_value(adapters)
            for a in adapters:
                a.shrink_()
            sums["l_sup"] += float(sup.detach())
            sums["l_train"] += float(sup.detach()) + l1
            sums["rec"] += float(terms["rec"].detach())
            sums["smooth"] += float(terms["smooth"].detach())
            n += 1
        ranks = [a.effective_rank() for a in adapters]
        _epoch_log(history, "mono", epoch, sums, n, {"mean_rank": float(np.mean(ranks))})


def compute_priors(model: StereoModel, scenes: list[Scene], config: RunConfig) -> list[PriorResult]:
    model.eval()
    align_kw = vars(config.align).copy()
    return [compute_prior(model, s.left, s.right, s.calib, align_kw) for s in scenes]


def _stereo_loss(model, left, right, d1, config: RunConfig):
    out = model(
        left, right, d1, detach_lookup=True, upsample_all=config.iteration_loss,
        mixed_precision=config.mixed_precision,
    )
    preds = out.full_res_per_iter if config.iteration_loss else [out.full_res]
    total, last = 0.0, None
    k = len(preds)
    for i, d in enumerate(preds):
        terms = stereo_terms(left, right, d1, d, config.loss)
        sup = total_objectives("stereo", config.loss, terms["rec"], terms["smooth"], terms["guide"])
        weight = config.iteration_gamma ** (k - 1 - i) if config.iteration_loss else 1.0
        total = total + weight * sup
        last = terms
    return total, last


def train_stage2(
    model: StereoModel, scenes, train_idx, val_idx, priors, config: RunConfig, history, rng,
    val_fn: Callable | None = None,
) -> None:
    adapters = model.encoder.adapters()
    steps = config.stage2_epochs * math.ceil(len(train_idx) / config.batch_size)
    for a in adapters:
        a.start_schedule(steps)
    lora_params = [p for a in adapters for p in a.parameters()]
    others = [p for m in (model.match, model.context, model.refiner) for p in m.parameters()]
    opt = torch.optim.AdamW(_param_groups(lora_params, others, config.weight_decay), lr=config.learning_rate)
    for epoch in range(config.stage2_epochs):
        model.train()
        sums = {"l_sup": 0.0, "l_train": 0.0, "rec": 0.0, "smooth": 0.0, "guide": 0.0}
        n = 0
        for idx in _batches(train_idx, config.batch_size, rng):
            left, right, _ = _stack(scenes, idx)
            d1 = torch.stack([torch.as_tensor(priors[i].disparity, dtype=left.dtype) for i in idx])[:, None]
            sup, terms = _stereo_loss(model, left, right, d1, config)
            _check(sup, scenes, idx, "stereo")
            opt.zero_grad(set_to_none=True)
            sup.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_([p for g in opt.param_groups for p in g["params"]], config.grad_clip)
            opt.step()
            l1 = _l1_value(adapters)
            for a in adapters:
                a.shrink_()
            sums["l_sup"] += float(sup.detach())
            sums["l_train"] += float(sup.detach()) + l1
            for key in ("rec", "smooth", "guide"):
                sums[key] += float(terms[key].detach())
            n += 1
        extra = {"mean_rank": float(np.mean([a.effective_rank() for a in adapters]))}
        if val_fn is not None:
            extra.update(val_fn(model))
        _epoch_log(history, "stereo", epoch, sums, n, extra)


def model_tensors(model: StereoModel) -> dict[str, torch.Tensor]:
    tensors = {k: v.detach() for k, v in model.state_dict().items()}
    for name, mod in model.named_modules():
        if hasattr(mod, "state_tensors") and hasattr(mod, "step_count"):
            tensors[f"{name}.schedule"] = mod.state_tensors()["schedule"]
    return tensors


def build_model(config: RunConfig) -> StereoModel:
    return StereoModel(config.refiner, config.lora.kwargs(), seed=config.seed)


def save_model(path: str | Path | None, model: StereoModel, config: RunConfig, history: list[dict]) -> bytes:
    meta = {"kind": CHECKPOINT_KIND, "config": config.to_dict(), "history": history}
    data = checkpoint.dumps(model_tensors(model), meta)
    if path is not None:
        Path(path).write_bytes(data)
    return data


def load_model(path: str | Path) -> tuple[StereoModel, RunConfig, dict]:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise ValueError(f"{path} is not a model checkpoint")
    config = RunConfig.from_dict(meta["config"])
    model = build_model(config)
    sched = {k[: -len(".schedule")]: tensors.pop(k) for k in list(tensors) if k.endswith(".schedule")}
    model.load_state_dict(tensors)
    mods = dict(model.named_modules())
    for name, s in sched.items():
        step, total, merged = (int(v) for v in s)
        mod = mods[name]
        mod.step_count, mod.total_steps, mod.merged = step, (None if total < 0 else total), bool(merged)
    model.eval()
    return model, config, meta


def run_train(
    config: RunConfig,
    data_dir: str | Path | None = None,
    out: str | Path | None = None,
    scenes: list[Scene] | None = None,
    val_fn: Callable | None = None,
) -> TrainResult:
    set_determinism(config.seed)
    t0 = time.perf_counter()
    if scenes is None:
        scenes = load_scenes(data_dir, config)
    if not scenes:
        raise ValueError("no training scenes")
    train_idx, val_idx = split_indices(len(scenes), config.seed, config.data.val_fraction)
    log.info("%d scenes: %d train / %d val", len(scenes), len(train_idx), len(val_idx))
    model = build_model(config)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xB47C]))
    history: list[dict] = []

    train_stage1(model, scenes, train_idx, config, history, rng)
    model.encoder.merge_adapters()
    log.info("stage 1 done in %.1fs; adapters merged", time.perf_counter() - t0)

    model.encoder.attach_fresh_adapters(torch.Generator().manual_seed(config.seed + 1))
    model.to(next(model.refiner.parameters()).dtype)
    priors = compute_priors(model, scenes, config)
    log.info("priors ready at %.1fs", time.perf_counter() - t0)
    if val_fn is not None:
        val_fn_bound = lambda m: val_fn(m, [scenes[i] for i in val_idx], [priors[i] for i in val_idx])  # noqa: E731
    else:
        val_fn_bound = None
    train_stage2(model, scenes, train_idx, val_idx, priors, config, history, rng, val_fn_bound)
    log.info("stage 2 done in %.1fs", time.perf_counter() - t0)
    model.eval()
    data = save_model(out, model, config, history)
    return TrainResult(
        model=model,
        history=history,
        train_names=[scenes[i].name for i in train_idx],
        val_names=[scenes[i].name for i in val_idx],
        checkpoint_bytes=data,
    )
