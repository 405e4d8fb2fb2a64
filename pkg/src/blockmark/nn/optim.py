"""SGD with momentum plus a one-cycle triangular learning-rate schedule.

The update is the classic coupled-decay form: with momentum m and weight
decay d, ``v <- m*v + (grad + d*theta)`` then ``theta <- theta - lr(step)*v``.
Weight decay is folded into the gradient (not decoupled) and applied to every
parameter tensor, matching common framework defaults.

The schedule is a single triangular cycle: linear warm-up from
``max_lr / div_factor`` to ``max_lr`` at the peak step, then linear anneal
down to ``max_lr / (div_factor * final_div_factor)``. It stays within
(0, max_lr] and hits max_lr exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeMismatchError


@dataclass(frozen=True)
class OneCycleSchedule:
    total_steps: int
    max_lr: float = 0.2
    warmup_frac: float = 0.3
    div_factor: float = 10.0
    final_div_factor: float = 100.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.max_lr <= 0:
            raise ValueError("max_lr must be positive")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must lie in (0, 1)")
        if self.div_factor < 1.0 or self.final_div_factor < 1.0:
            raise ValueError("div factors must be >= 1")

    @property
    def peak_step(self) -> int:
        return round(self.warmup_frac * (self.total_steps - 1))

    @property
    def initial_lr(self) -> float:
        return self.max_lr / self.div_factor

    @property
    def final_lr(self) -> float:
        return self.initial_lr / self.final_div_factor

    def lr_at(self, step: int) -> float:
        """Learning rate for `step`; valid steps are 0 <= step < total_steps."""
        if not 0 <= step < self.total_steps:
            raise ValueError(
                f"step {step} outside schedule range [0, {self.total_steps})"
            )
        peak = self.peak_step
        if step <= peak:
            if peak == 0:
                return self.max_lr
            frac = step / peak
            return self.initial_lr + frac * (self.max_lr - self.initial_lr)
        frac = (step - peak) / (self.total_steps - 1 - peak)
        return self.max_lr + frac * (self.final_lr - self.max_lr)


@dataclass
class OptimizerState:
    """Per-parameter momentum buffers plus the step counter."""

    velocity: dict[str, np.ndarray]
    schedule: OneCycleSchedule
    momentum: float = 0.9
    weight_decay: float = 0.0005
    step: int = 0


def init_optimizer(
    model,
    schedule: OneCycleSchedule,
    momentum: float = 0.9,
    weight_decay: float = 0.0005,
) -> OptimizerState:
    velocity = {
        name: np.zeros_like(value) for name, value in model.params.items()
    }
    return OptimizerState(
        velocity=velocity,
        schedule=schedule,
        momentum=momentum,
        weight_decay=weight_decay,
    )


def sgd_step(model, grads: dict[str, np.ndarray], state: OptimizerState) -> None:
    """Apply one momentum-SGD update in place and advance the step counter."""
    if set(grads) != set(model.params):
        missing = set(model.params) ^ set(grads)
        raise ShapeMismatchError(f"gradient/parameter name mismatch: {sorted(missing)}")
    lr = state.schedule.lr_at(state.step)
    for name, theta in model.params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeMismatchError(
                f"gradient for {name} has shape {g.shape}, expected {theta.shape}"
            )
        if not np.isfinite(g).all():
            raise ValueError(f"non-finite gradient for {name} at step {state.step}")
        v = state.velocity[name]
        v *= theta.dtype.type(state.momentum)
        v += g + theta.dtype.type(state.weight_decay) * theta
        theta -= theta.dtype.type(lr) * v
    state.step += 1
