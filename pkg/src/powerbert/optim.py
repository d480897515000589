"""Adam with bias correction and a linear learning-rate warmup."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """Update ``params`` in place; refuses the whole step on any non-finite gradient."""
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradient(f"non-finite gradient for {', '.join(sorted(bad))}")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(g)
            state.second_moment[name] = np.zeros_like(g)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


@dataclass(frozen=True)
class WarmupSchedule:
    base_lr: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 1

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.warmup_steps < 0 or self.total_steps <= 0:
            raise ValueError("warmup_steps must be >= 0 and total_steps > 0")


def lr_at(schedule: WarmupSchedule, step: int) -> float:
    """Linear ramp from 0 to base_lr over warmup_steps, constant afterwards."""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if schedule.warmup_steps == 0 or step >= schedule.warmup_steps:
        return schedule.base_lr
    return schedule.base_lr * step / schedule.warmup_steps
