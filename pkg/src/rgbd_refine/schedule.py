"""Patience-based stage switching for interleaved optimization."""
from __future__ import annotations

import math
from dataclasses import dataclass

KEEP = "keep"
NEXT = "next"


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class AdaptiveState:
    """Controller state for one optimization stage.

    ``best`` is unset until the first loss arrives and is then initialized to
    it, so the very first step never counts as an improvement.
    """

    delta: float = 1e-3
    patience: int = 50
    t_max: int = 1000
    best: float | None = None
    counter: int = 0
    t: int = 0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.patience < 1 or self.t_max < 1:
            raise ValueError("patience and t_max must be at least 1")

    def reset(self):
        self.best = None
        self.counter = 0
        self.t = 0


def controller_step(state: AdaptiveState, loss: float) -> str:
    """Feed one monitored loss value; returns ``"keep"`` or ``"next"``.

    A step improves only if ``loss < best * (1 - delta)``; otherwise the
    patience counter grows. ``next`` is returned once the counter reaches
    ``patience`` or the step cap is hit.
    """
    if state.t >= state.t_max:
        raise RuntimeError("controller already reached its step cap")
    if not math.isfinite(loss):
        raise NonFiniteLossError(f"monitored loss is {loss}")
    if state.best is None:
        state.best = loss
    return _advance(state, loss < state.best * (1 - state.delta), loss)


def record_failed_step(state: AdaptiveState) -> str:
    """Count a discarded (non-finite) step as a non-improvement."""
    return _advance(state, False, None)


def _advance(state: AdaptiveState, improved: bool, loss: float | None) -> str:
    if improved:
        state.counter = 0
        state.best = loss
    else:
        state.counter += 1
    state.t += 1
    return NEXT if (state.counter >= state.patience or state.t >= state.t_max) else KEEP
