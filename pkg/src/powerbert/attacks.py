"""FDIA injection crafting and TDA command delay.

An FDIA adds ``a = M c`` to the tie-line measurements.  Because ``a`` lies in
the column space of ``M`` the WLS estimate shifts by exactly ``c`` and the
residual is untouched, so bad data detection never fires.  A TDA holds AGC
commands to one area for ``tau`` slots without altering them.
"""

from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .estimation import Estimator

FDIA = "fdia"
TDA = "tda"
TAU_MIN, TAU_MAX = 1, 20


class AttackSpecError(ValueError):
    pass


# The ramp does not saturate inside a default-length attack: integral AGC
# cancels any held bias within a few slots, a still-rising injection keeps a
# tracking offset of ramp / (K dt) in the targeted areas' ACE.
DEFAULT_CAP = 0.5
DEFAULT_RAMP = 0.005


def ramp_profile(cap: float, ramp: float, duration: int) -> np.ndarray:
    """Magnitudes ramp by ``ramp`` per slot until ``cap`` and then hold."""
    return np.minimum(cap, ramp * np.arange(1, duration + 1))


@dataclass
class FdiaSpec:
    target: tuple[int, int] = (1, 3)
    cap: float = DEFAULT_CAP
    ramp: float = DEFAULT_RAMP
    duration: int = 100
    start: int | None = None
    sign: float = 1.0
    profile: Sequence[float] | None = None
    direction: Sequence[float] | None = None
    kind: str = field(default=FDIA, init=False)

    def __post_init__(self):
        self.target = tuple(int(a) for a in self.target)
        if self.cap <= 0 or self.ramp <= 0:
            raise AttackSpecError("FDIA cap and ramp must be positive")
        if self.duration < 1:
            raise AttackSpecError("FDIA duration must be >= 1")
        if self.profile is not None:
            path = np.asarray(self.profile, dtype=float)
            if len(path) != self.duration:
                raise AttackSpecError(f"profile has {len(path)} slots, duration is {self.duration}")
            if np.any(np.abs(path) > self.cap + 1e-12):
                raise AttackSpecError(f"profile exceeds magnitude cap {self.cap}")
            if np.any(np.abs(np.diff(np.concatenate([[0.0], path]))) > self.ramp + 1e-12):
                raise AttackSpecError(f"profile exceeds ramp rate {self.ramp} per slot")

    @property
    def tau(self) -> int:
        return 0

    def magnitudes(self) -> np.ndarray:
        if self.profile is not None:
            return np.asarray(self.profile, dtype=float)
        return ramp_profile(self.cap, self.ramp, self.duration)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target"] = list(self.target)
        for key in ("profile", "direction"):
            if d[key] is not None:
                d[key] = [float(v) for v in d[key]]
        return d


@dataclass
class TdaSpec:
    target_area: int = 1
    tau: int = 10
    duration: int = 100
    start: int | None = None
    kind: str = field(default=TDA, init=False)

    def __post_init__(self):
        if int(self.tau) != self.tau:
            raise AttackSpecError("TDA delay must be an integer number of slots")
        self.tau = int(self.tau)
        # tau = 0 is allowed as the disabled path
        if not 0 <= self.tau <= TAU_MAX:
            raise AttackSpecError(f"TDA delay must be in [{TAU_MIN}, {TAU_MAX}], got {self.tau}")
        if self.duration < 1:
            raise AttackSpecError("TDA duration must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def spec_from_dict(d: dict) -> FdiaSpec | TdaSpec:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind == FDIA:
        return FdiaSpec(**d)
    if kind == TDA:
        return TdaSpec(**d)
    raise AttackSpecError(f"unknown attack kind {kind!r}")


def fdia_direction(spec: FdiaSpec, est: Estimator, tie_lines) -> np.ndarray:
    """State-space direction of the injection (unit vector on the target line by default)."""
    if spec.direction is not None:
        c = np.asarray(spec.direction, dtype=float)
        if c.shape != (est.n_states,):
            raise AttackSpecError(f"direction must have {est.n_states} entries")
        return c
    lines = [tuple(l) for l in tie_lines]
    a, b = spec.target
    c = np.zeros(est.n_states)
    if (a, b) in lines:
        c[lines.index((a, b))] = 1.0
    elif (b, a) in lines:
        c[lines.index((b, a))] = -1.0
    else:
        raise AttackSpecError(f"no tie line between areas {a} and {b}")
    return c * spec.sign


def craft_fdia(spec: FdiaSpec, est: Estimator, tie_lines) -> np.ndarray:
    """Per-slot measurement injections, shape (duration, n_measurements)."""
    c = fdia_direction(spec, est, tie_lines)
    return np.outer(spec.magnitudes(), est.M @ c)


class CommandBuffer:
    """Delay line between one area's AGC controller and its actuator."""

    def __init__(self, spec: TdaSpec, start: int):
        self.spec = spec
        self.start = start
        self.end = start + spec.duration
        self.queue: deque[tuple[int, float]] = deque()
        self.last_delivered: float | None = None

    def deliver(self, slot: int, command: float) -> float:
        return apply_tda(self, self.spec, slot, command)


def apply_tda(buffer: CommandBuffer, spec: TdaSpec, slot: int, command: float) -> float:
    if spec.tau == 0 or not buffer.start <= slot < buffer.end:
        # outside the window: passthrough, anything still queued is dropped
        buffer.queue.clear()
        out = command
    else:
        buffer.queue.append((slot + spec.tau, command))
        out = buffer.last_delivered if buffer.last_delivered is not None else 0.0
        while buffer.queue and buffer.queue[0][0] <= slot:
            _, out = buffer.queue.popleft()
    buffer.last_delivered = out
    return out


def schedule(spec: FdiaSpec | TdaSpec, trace_length: int, rng: np.random.Generator) -> int:
    """Start slot for the attack window; uniform over every feasible start."""
    latest = trace_length - spec.duration - spec.tau
    if latest < 0:
        raise AttackSpecError(
            f"attack of {spec.duration} slots (+ delay {spec.tau}) does not fit a {trace_length}-slot trace"
        )
    if spec.start is not None:
        if not 0 <= spec.start <= latest:
            raise AttackSpecError(f"fixed start {spec.start} outside [0, {latest}]")
        return int(spec.start)
    return int(rng.integers(0, latest + 1))


def sample_attack(kind: str, rng: np.random.Generator, *, duration: int = 100, cap: float = DEFAULT_CAP,
                  ramp: float = DEFAULT_RAMP, target=(1, 3), target_area: int = 1,
                  tau_range=(TAU_MIN, TAU_MAX)) -> FdiaSpec | TdaSpec:
    """Draw the per-trace random parts of an attack (delay, injection sign)."""
    if kind == FDIA:
        return FdiaSpec(target=target, cap=cap, ramp=ramp, duration=duration,
                        sign=float(rng.choice([-1.0, 1.0])))
    if kind == TDA:
        lo, hi = tau_range
        return TdaSpec(target_area=target_area, tau=int(rng.integers(lo, hi + 1)), duration=duration)
    raise AttackSpecError(f"unknown attack kind {kind!r}")
