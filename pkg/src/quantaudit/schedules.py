"""Learning-rate schedules: cosine-with-warmup, SGDR warm restarts, and the
oscillatory lock-in (OLI) bump/cool schedule, all evaluable at any step.

The cosine defaults reproduce the Pythia-160m training schedule
(eta_max 6e-4, eta_min 6e-5, 1,430 warmup steps, 143,000 total).  Warmup is
linear from zero; the cosine phase is parameterized over
(step - warmup) / (total - warmup).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterator, Union


class ScheduleError(Exception):
    pass


class PhaseTag(enum.Enum):
    BUMP = "bump"
    COOL = "cool"


@dataclass
class CosineWarmup:
    eta_max: float = 6e-4
    eta_min: float = 6e-5
    warmup_steps: int = 1_430
    total_steps: int = 143_000

    def __post_init__(self):
        if not (0 < self.eta_min <= self.eta_max):
            raise ScheduleError("need 0 < eta_min <= eta_max")
        if not (0 <= self.warmup_steps < self.total_steps):
            raise ScheduleError("need 0 <= warmup_steps < total_steps")


@dataclass
class SGDRSpec:
    """Cosine warm restarts: eta_max -> eta_min within each period of T0 steps."""

    eta_max: float = 6e-4
    eta_min: float = 6e-5
    period: int = 10_000
    fork_step: int = 0

    def __post_init__(self):
        if self.period < 1:
            raise ScheduleError("period must be >= 1")


@dataclass
class OLISpec:
    """Bump/cool oscillation on top of a cosine baseline.

    Each period starts with a bump (LR = bump_multiplier * eta_max for
    bump_len steps) followed by a cool phase that follows the base cosine at
    the absolute step.  Defaults: 5x bumps of 75 steps, 300-step cools,
    period 375.
    """

    base: CosineWarmup = field(default_factory=CosineWarmup)
    bump_multiplier: float = 5.0
    bump_len: int = 75
    cool_len: int = 300
    fork_step: int = 0

    def __post_init__(self):
        if self.bump_len < 1 or self.cool_len < 0:
            raise ScheduleError("need bump_len >= 1 and cool_len >= 0")

    @property
    def period(self) -> int:
        return self.bump_len + self.cool_len

    @property
    def bump_lr(self) -> float:
        return self.bump_multiplier * self.base.eta_max


ScheduleSpec = Union[CosineWarmup, SGDRSpec, OLISpec]


def lr_at(spec: ScheduleSpec, step: int) -> float:
    """Learning rate of the schedule at an absolute training step."""
    if isinstance(spec, CosineWarmup):
        if step < 0:
            raise ScheduleError(f"step must be >= 0, got {step}")
        if step < spec.warmup_steps:
            return spec.eta_max * step / spec.warmup_steps
        progress = (step - spec.warmup_steps) / (spec.total_steps - spec.warmup_steps)
        progress = min(progress, 1.0)
        return spec.eta_min + 0.5 * (spec.eta_max - spec.eta_min) * (
            1.0 + math.cos(math.pi * progress)
        )
    if isinstance(spec, SGDRSpec):
        if step < spec.fork_step:
            raise ScheduleError(f"step {step} precedes fork_step {spec.fork_step}")
        pos = (step - spec.fork_step) % spec.period
        return spec.eta_min + 0.5 * (spec.eta_max - spec.eta_min) * (
            1.0 + math.cos(math.pi * pos / spec.period)
        )
    if isinstance(spec, OLISpec):
        if classify_step(spec, step) is PhaseTag.BUMP:
            return spec.bump_lr
        return lr_at(spec.base, step)
    raise ScheduleError(f"unknown schedule spec {type(spec).__name__}")


def eta_max_of(spec: ScheduleSpec) -> float:
    return spec.base.eta_max if isinstance(spec, OLISpec) else spec.eta_max


def classify_step(spec: OLISpec, step: int) -> PhaseTag:
    """Bump iff the step falls in the first bump_len steps of its period."""
    if step < spec.fork_step:
        raise ScheduleError(f"step {step} precedes fork_step {spec.fork_step}")
    return PhaseTag.BUMP if (step - spec.fork_step) % spec.period < spec.bump_len else PhaseTag.COOL


def emit_curve(spec: ScheduleSpec, start: int, end: int,
               stride: int = 1) -> Iterator[tuple[int, float]]:
    """Sample (step, lr) over [start, end) at the given stride."""
    if start > end:
        raise ScheduleError("start must be <= end")
    if stride < 1:
        raise ScheduleError("stride must be >= 1")
    for step in range(start, end, stride):
        yield step, lr_at(spec, step)


def calibrate_bump_amplitude(K: float, scale_median: float, grad_median: float,
                             eta_max: float) -> float:
    """Bump LR from the scale/gradient ratio, hard-capped at 5*eta_max.

    Near convergence the adaptive optimizer has compressed gradients to the
    point where the raw ratio degenerates (values in the hundreds), so the
    cap is the expected operating point.
    """
    if not grad_median > 0:
        raise ScheduleError(f"grad_median must be positive, got {grad_median}")
    return min(K * scale_median / grad_median, 5.0 * eta_max)


def schedule_to_dict(spec: ScheduleSpec) -> dict:
    """JSON-friendly encoding, inverse of schedule_from_dict."""
    if isinstance(spec, CosineWarmup):
        return {"kind": "cosine", "eta_max": spec.eta_max, "eta_min": spec.eta_min,
                "warmup_steps": spec.warmup_steps, "total_steps": spec.total_steps}
    if isinstance(spec, SGDRSpec):
        return {"kind": "sgdr", "eta_max": spec.eta_max, "eta_min": spec.eta_min,
                "period": spec.period, "fork_step": spec.fork_step}
    if isinstance(spec, OLISpec):
        return {"kind": "oli", "base": schedule_to_dict(spec.base),
                "bump_multiplier": spec.bump_multiplier, "bump_len": spec.bump_len,
                "cool_len": spec.cool_len, "fork_step": spec.fork_step}
    raise ScheduleError(f"unknown schedule spec {type(spec).__name__}")


def schedule_from_dict(d: dict) -> ScheduleSpec:
    kind = d.get("kind")
    if kind == "cosine":
        return CosineWarmup(eta_max=d["eta_max"], eta_min=d["eta_min"],
                            warmup_steps=d["warmup_steps"], total_steps=d["total_steps"])
    if kind == "sgdr":
        return SGDRSpec(eta_max=d["eta_max"], eta_min=d["eta_min"],
                        period=d["period"], fork_step=d["fork_step"])
    if kind == "oli":
        base = schedule_from_dict(d["base"])
        assert isinstance(base, CosineWarmup)
        return OLISpec(base=base, bump_multiplier=d["bump_multiplier"],
                       bump_len=d["bump_len"], cool_len=d["cool_len"],
                       fork_step=d["fork_step"])
    raise ScheduleError(f"unknown schedule kind {kind!r}")
