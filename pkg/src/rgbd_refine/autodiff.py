"""Gradient and optimizer plumbing on top of torch autograd.

Every optimizable quantity lives in a :class:`ParamGroup` holding one leaf
tensor. Gradients come from reverse-mode autograd; updates use a small
hand-written Adam so that the step semantics (bias correction, NaN guard,
pose re-orthonormalization) are explicit and testable.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

DTYPE = torch.float64

GROUP_KINDS = ("vertices", "texels", "pose_delta", "discriminator_weights")


class GroupNotRecordedError(RuntimeError):
    """The loss graph never touched a requested parameter group."""


class NonFiniteGradientError(FloatingPointError):
    """A gradient buffer contains NaN or Inf; parameters were left unchanged."""


@dataclass
class ParamGroup:
    """A named, optimizable tensor with its own learning rate."""

    kind: str
    values: torch.Tensor
    learning_rate: float

    def __post_init__(self):
        if self.kind not in GROUP_KINDS:
            raise ValueError(f"unknown group kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not isinstance(self.values, torch.Tensor):
            self.values = torch.as_tensor(np.asarray(self.values), dtype=DTYPE)
        self.values = self.values.detach().clone().to(DTYPE).requires_grad_(True)

    @property
    def size(self) -> int:
        return self.values.numel()

    def numpy(self) -> np.ndarray:
        return self.values.detach().numpy().copy()

    def freeze(self):
        self.values.requires_grad_(False)

    def unfreeze(self):
        self.values.requires_grad_(True)


@dataclass
class AdamState:
    first_moment: torch.Tensor
    second_moment: torch.Tensor
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_group(cls, group: ParamGroup, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        z = torch.zeros_like(group.values, dtype=DTYPE).detach()
        return cls(z, z.clone(), 0, beta1, beta2, eps)


def gradients(loss: torch.Tensor, groups: Sequence[ParamGroup], allow_unrecorded: bool = False,
              retain_graph: bool = False) -> list[torch.Tensor]:
    """d(loss)/d(group.values) for each group.

    Parameters that feed into the graph but do not influence the loss get
    exact zeros. A group absent from the graph raises
    :class:`GroupNotRecordedError` unless ``allow_unrecorded`` is set, in
    which case it also gets zeros.
    """
    tensors = [g.values for g in groups]
    if not all(t.requires_grad for t in tensors):
        missing = [g.kind for g in groups if not g.values.requires_grad]
        if not allow_unrecorded:
            raise GroupNotRecordedError(f"groups are frozen: {missing}")
    live = [t for t in tensors if t.requires_grad]
    grads = torch.autograd.grad(loss, live, allow_unused=True, retain_graph=retain_graph) if (
        live and loss.requires_grad) else [None] * len(live)
    out, k = [], 0
    for g, t in zip(groups, tensors):
        gr = None
        if t.requires_grad:
            gr = grads[k]
            k += 1
        if gr is None:
            if not allow_unrecorded:
                raise GroupNotRecordedError(f"group {g.kind!r} was not recorded by the loss")
            gr = torch.zeros_like(t)
        out.append(gr.detach())
    return out


def adam_step(group: ParamGroup, grad: torch.Tensor, state: AdamState, lr: float | None = None) -> None:
    """One bias-corrected Adam update, in place on ``group`` and ``state``.

    Raises NonFiniteGradientError before touching anything if ``grad`` has
    NaN/Inf entries.
    """
    grad = grad.detach().to(DTYPE)
    if grad.shape != group.values.shape:
        raise ValueError(f"gradient shape {tuple(grad.shape)} != parameter shape {tuple(group.values.shape)}")
    if not torch.isfinite(grad).all():
        raise NonFiniteGradientError(f"non-finite gradient for group {group.kind!r}")
    lr = group.learning_rate if lr is None else lr
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    state.first_moment.mul_(b1).add_(grad, alpha=1 - b1)
    state.second_moment.mul_(b2).addcmul_(grad, grad, value=1 - b2)
    m_hat = state.first_moment / (1 - b1 ** state.step_count)
    v_hat = state.second_moment / (1 - b2 ** state.step_count)
    with torch.no_grad():
        group.values.sub_(lr * m_hat / (v_hat.sqrt() + state.eps))
        if group.kind == "pose_delta":
            clamp_axis_angle_(group.values)


def clamp_axis_angle_(deltas: torch.Tensor, limit: float = np.pi - 1e-3) -> None:
    """Keep each rotation increment's magnitude below pi (in place)."""
    aa = deltas.view(-1, 6)[:, :3]
    n = aa.norm(dim=1, keepdim=True)
    scale = torch.where(n > limit, limit / n.clamp_min(1e-30), torch.ones_like(n))
    aa.mul_(scale)


def finite_diff_check(loss_fn: Callable[[torch.Tensor], torch.Tensor], group: ParamGroup,
                      eps: float = 1e-4, indices: Sequence[int] | None = None) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn`` maps the group's value tensor to a scalar tensor. The relative
    error of each entry uses ``max(|analytic|, |numeric|, 1e-6)`` as the
    denominator. ``indices`` restricts the check to a subset of flat entries.
    """
    x = group.values
    loss = loss_fn(x)
    (analytic,) = gradients(loss, [group], allow_unrecorded=True)
    analytic = analytic.reshape(-1)
    base = x.detach().clone()
    flat = base.reshape(-1)
    idx = range(flat.numel()) if indices is None else indices
    worst = 0.0
    with torch.no_grad():
        for i in idx:
            plus = flat.clone()
            plus[i] += eps
            minus = flat.clone()
            minus[i] -= eps
            fp = float(loss_fn(plus.view_as(base)))
            fm = float(loss_fn(minus.view_as(base)))
            num = (fp - fm) / (2 * eps)
            ana = float(analytic[i])
            denom = max(abs(ana), abs(num), 1e-6)
            worst = max(worst, abs(ana - num) / denom)
    return worst


def skew_t(v: torch.Tensor) -> torch.Tensor:
    """Batched skew-symmetric matrices, (..., 3) -> (..., 3, 3)."""
    x, y, z = v.unbind(-1)
    o = torch.zeros_like(x)
    return torch.stack([
        torch.stack([o, -z, y], -1),
        torch.stack([z, o, -x], -1),
        torch.stack([-y, x, o], -1),
    ], -2)


def axis_angle_exp(aa: torch.Tensor) -> torch.Tensor:
    """Rodrigues' formula, smooth (and differentiable) at zero rotation."""
    t2 = (aa * aa).sum(-1, keepdim=True).unsqueeze(-1)
    small = t2 < 1e-8
    t2s = torch.where(small, torch.ones_like(t2), t2)
    ts = t2s.sqrt()
    a = torch.where(small, 1 - t2 / 6, torch.sin(ts) / ts)
    b = torch.where(small, 0.5 - t2 / 24, (1 - torch.cos(ts)) / t2s)
    k = skew_t(aa)
    eye = torch.eye(3, dtype=aa.dtype).expand_as(k)
    return eye + a * k + b * (k @ k)


def set_deterministic(enabled: bool = True, threads: int | None = None) -> None:
    """Fixed-order reductions: single-threaded deterministic torch kernels."""
    torch.use_deterministic_algorithms(enabled, warn_only=True)
    if threads is not None:
        torch.set_num_threads(max(1, int(threads)))
    elif enabled:
        torch.set_num_threads(1)
