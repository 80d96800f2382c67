"""Importance-weighted low-rank adapters with proximal rank pruning.

An adapter wraps a frozen matrix ``W0 [d, k]`` and learns ``B [d, r]``,
``A [r, k]`` and a per-component importance vector ``w [r]``::

    h = W0 x + sum_i w_i B[:, i] (A[i, :] x)

Training runs a dense stage (no thresholding) for ``dense_fraction`` of the
steps, then a sparse stage in which ``w`` is soft-thresholded after every
gradient step with a threshold ramped linearly from 0 to ``kappa_max``.
``merge`` folds the surviving components into ``W0``.
"""

from __future__ import annotations

import math
import warnings
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint


class MergeWarning(UserWarning):
    """Merge requested on an adapter that holds no update."""


def soft_threshold(w: torch.Tensor, kappa: float) -> torch.Tensor:
    """``sign(w) * max(|w| - kappa, 0)``."""
    if kappa < 0:
        raise ValueError(f"threshold must be non-negative, got {kappa}")
    return torch.sign(w) * torch.clamp(w.abs() - kappa, min=0.0)


class LoraAdapter(nn.Module):
    def __init__(
        self,
        W0: torch.Tensor,
        rank: int = 16,
        lambda_l1: float = 1e-4,
        kappa_max: float = 0.01,
        dense_fraction: float = 0.45,
        ramp_fraction: float = 1.0,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if W0.dim() != 2:
            raise ValueError("W0 must be a matrix")
        if rank < 1:
            raise ValueError("rank must be >= 1")
        if kappa_max < 0:
            raise ValueError("kappa_max must be non-negative")
        if not 0.0 <= dense_fraction <= 1.0:
            raise ValueError("dense_fraction must lie in [0, 1]")
        d, k = W0.shape
        self.register_buffer("W0", W0.detach().clone())
        self.rank = rank
        self.lambda_l1 = lambda_l1
        self.kappa_max = kappa_max
        self.dense_fraction = dense_fraction
        self.ramp_fraction = ramp_fraction
        self.A = nn.Parameter(torch.empty(rank, k, dtype=W0.dtype))
        self.B = nn.Parameter(torch.empty(d, rank, dtype=W0.dtype))
        self.w = nn.Parameter(torch.empty(rank, dtype=W0.dtype))
        self.step_count = 0
        self.total_steps: int | None = None
        self.merged = False
        self.reset_parameters(generator)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        """A ~ N(0, 0.02^2), B = 0, w ~ U[0.5, 1.5]; schedule cleared."""
        with torch.no_grad():
            self.A.copy_(torch.randn(self.A.shape, generator=generator, dtype=torch.float64) * 0.02)
            self.B.zero_()
            self.w.copy_(torch.rand(self.w.shape, generator=generator, dtype=torch.float64) + 0.5)
        self.step_count = 0
        self.total_steps = None
        self.merged = False

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.W0.shape)

    def delta_weight(self) -> torch.Tensor:
        return (self.B * self.w) @ self.A

    def weight(self) -> torch.Tensor:
        return self.W0 + self.delta_weight()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.W0.shape[1]:
            raise ValueError(f"input length {x.shape[-1]} != k={self.W0.shape[1]}")
        return x @ self.W0.T + ((x @ self.A.T) * self.w) @ self.B.T

    def effective_rank(self) -> int:
        return int((self.w.detach() != 0).sum())

    def l1_penalty(self) -> torch.Tensor:
        return self.lambda_l1 * self.w.abs().sum()

    # schedule -----------------------------------------------------------

    def start_schedule(self, total_steps: int) -> None:
        if total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        self.total_steps = int(total_steps)
        self.step_count = 0

    @property
    def dense_steps(self) -> int:
        self._require_schedule()
        return math.ceil(self.dense_fraction * self.total_steps)

    @property
    def in_sparse_stage(self) -> bool:
        return self.total_steps is not None and self.step_count >= self.dense_steps

    def current_kappa(self) -> float:
        """Threshold applied at the current step (0 during the dense stage)."""
        self._require_schedule()
        if not self.in_sparse_stage:
            return 0.0
        sparse_len = max(self.total_steps - self.dense_steps, 1)
        ramp_len = max(round(self.ramp_fraction * sparse_len), 1)
        progress = (self.step_count - self.dense_steps + 1) / ramp_len
        return self.kappa_max * min(progress, 1.0)

    def _require_schedule(self) -> None:
        if self.total_steps is None:
            raise RuntimeError("schedule not initialized; call start_schedule(total_steps)")

    @torch.no_grad()
    def shrink_(self) -> float:
        """Threshold ``w`` for the current step and advance the step counter.

        Returns the threshold that was applied.
        """
        kappa = self.current_kappa()
        if kappa > 0:
            self.w.copy_(soft_threshold(self.w, kappa))
        self.step_count += 1
        return kappa

    @torch.no_grad()
    def proximal_update(self, grad_w: torch.Tensor, lr: float) -> torch.Tensor:
        """Plain gradient step on ``w`` followed by :meth:`shrink_`."""
        self._require_schedule()
        if grad_w.shape != self.w.shape:
            raise ValueError("grad_w shape mismatch")
        self.w.sub_(lr * grad_w)
        self.shrink_()
        return self.w

    @torch.no_grad()
    def merge_(self) -> torch.Tensor:
        """Fold the weighted update into ``W0`` and zero ``w``."""
        if self.merged:
            warnings.warn("adapter already merged; merge is a no-op", MergeWarning, stacklevel=2)
            return self.W0
        keep = self.w != 0
        if bool(keep.any()):
            self.W0.add_((self.B[:, keep] * self.w[keep]) @ self.A[keep])
        self.w.zero_()
        self.merged = True
        return self.W0

    # serialization -------------------------------------------------------

    def state_tensors(self, prefix: str = "") -> dict[str, torch.Tensor]:
        return {
            prefix + "W0": self.W0,
            prefix + "A": self.A.detach(),
            prefix + "B": self.B.detach(),
            prefix + "w": self.w.detach(),
            prefix + "schedule": torch.tensor(
                [self.step_count, -1 if self.total_steps is None else self.total_steps, int(self.merged)],
                dtype=torch.int64,
            ),
            prefix + "hyper": torch.tensor(
                [self.rank, self.lambda_l1, self.kappa_max, self.dense_fraction, self.ramp_fraction],
                dtype=torch.float64,
            ),
        }

    @torch.no_grad()
    def load_state_tensors(self, tensors: dict[str, torch.Tensor], prefix: str = "") -> None:
        self.W0.copy_(tensors[prefix + "W0"])
        self.A.copy_(tensors[prefix + "A"])
        self.B.copy_(tensors[prefix + "B"])
        self.w.copy_(tensors[prefix + "w"])
        step, total, merged = (int(v) for v in tensors[prefix + "schedule"])
        self.step_count = step
        self.total_steps = None if total < 0 else total
        self.merged = bool(merged)
        _, self.lambda_l1, self.kappa_max, self.dense_fraction, self.ramp_fraction = (
            float(v) for v in tensors[prefix + "hyper"]
        )

    def save(self, path: str | Path) -> None:
        checkpoint.save(path, self.state_tensors(), meta={"kind": "lora_adapter"})

    @classmethod
    def load(cls, path: str | Path) -> "LoraAdapter":
        tensors, _ = checkpoint.load(path)
        hyper = tensors["hyper"]
        adapter = cls(tensors["W0"], rank=int(hyper[0]))
        adapter.load_state_tensors(tensors)
        return adapter


def adapter_forward(adapter: LoraAdapter, x: torch.Tensor) -> torch.Tensor:
    return adapter(x)


def proximal_update(adapter: LoraAdapter, grad_w: torch.Tensor, lr: float) -> torch.Tensor:
    return adapter.proximal_update(grad_w, lr)


def merge_weights(adapter: LoraAdapter) -> torch.Tensor:
    return adapter.merge_()


def effective_rank(adapter: LoraAdapter) -> int:
    return adapter.effective_rank()


class LoraConv2d(nn.Module):
    """Convolution whose frozen kernel carries a :class:`LoraAdapter`.

    The kernel ``[out, in, k, k]`` is viewed as a ``[out, in*k*k]`` matrix.
    """

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel_size: int = 3,
        stride: int = 1,
        padding: int | None = None,
        generator: torch.Generator | None = None,
        **lora_kwargs,
    ):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        fan_in = in_ch * kernel_size * kernel_size
        W0 = torch.randn(out_ch, fan_in, generator=generator, dtype=torch.float64) * math.sqrt(2.0 / fan_in)
        self.register_buffer("bias", torch.zeros(out_ch, dtype=torch.float64))
        self.lora_kwargs = lora_kwargs
        self.adapter = LoraAdapter(W0, generator=generator, **lora_kwargs)
        self.adapter_enabled = True

    def kernel(self) -> torch.Tensor:
        W = self.adapter.weight() if self.adapter_enabled else self.adapter.W0
        return W.reshape(self.out_ch, self.in_ch, self.kernel_size, self.kernel_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, self.kernel(), self.bias, stride=self.stride, padding=self.padding)

    def attach_fresh(self, generator: torch.Generator | None = None) -> LoraAdapter:
        """Replace the adapter with a new one built on the current (merged) base."""
        ref = self.adapter
        self.adapter = LoraAdapter(
            ref.W0,
            rank=ref.rank,
            lambda_l1=ref.lambda_l1,
            kappa_max=ref.kappa_max,
            dense_fraction=ref.dense_fraction,
            ramp_fraction=ref.ramp_fraction,
            generator=generator,
        ).to(ref.W0.dtype)
        return self.adapter


def iter_adapters(module: nn.Module) -> Iterator[LoraAdapter]:
    for m in module.modules():
        if isinstance(m, LoraAdapter):
            yield m


@contextmanager
def adapters_disabled(module: nn.Module):
    """Run ``module`` on its base kernels only."""
    convs = [m for m in module.modules() if isinstance(m, LoraConv2d)]
    saved = [c.adapter_enabled for c in convs]
    for c in convs:
        c.adapter_enabled = False
    try:
        yield module
    finally:
        for c, s in zip(convs, saved):
            c.adapter_enabled = s
