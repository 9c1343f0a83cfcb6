"""Noise schedules for variance-preserving, variance-exploding and rectified-flow models."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


class ScheduleKind(enum.IntEnum):
    VARIANCE_PRESERVING = 0
    VARIANCE_EXPLODING = 1
    RECTIFIED_FLOW = 2


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Discrete forward-process schedule.

    ``values`` holds the per-step array that defines the schedule: cumulative
    ``alpha_bar`` for VP, ``sigma`` for VE, and the time grid for rectified flow.
    Step ``T - 1`` is always the highest noise level.
    """

    kind: ScheduleKind
    values: np.ndarray
    sigma_max: float

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        _check_schedule(self.kind, values, self.sigma_max)

    @property
    def num_steps(self) -> int:
        return len(self.values)

    @property
    def alpha_bar(self) -> np.ndarray:
        if self.kind != ScheduleKind.VARIANCE_PRESERVING:
            raise AttributeError("alpha_bar is only defined for VP schedules")
        return self.values

    @property
    def sigma(self) -> np.ndarray:
        if self.kind != ScheduleKind.VARIANCE_EXPLODING:
            raise AttributeError("sigma is only defined for VE schedules")
        return self.values

    @property
    def max_step(self) -> int:
        return self.num_steps - 1

    def check_step(self, step: int) -> int:
        if int(step) != step or not 0 <= step < self.num_steps:
            raise ValueError(f"step {step!r} outside [0, {self.num_steps})")
        return int(step)

    def time(self, step: int) -> float:
        """Normalized time in [0, 1] used as the network's time input."""
        step = self.check_step(step)
        if self.kind == ScheduleKind.RECTIFIED_FLOW:
            return float(self.values[step])
        if self.kind == ScheduleKind.VARIANCE_PRESERVING:
            return (step + 1) / self.num_steps
        return step / max(self.num_steps - 1, 1)

    def times(self, steps) -> np.ndarray:
        """Vectorized :meth:`time`."""
        steps = np.asarray(steps)
        if self.kind == ScheduleKind.RECTIFIED_FLOW:
            return self.values[steps]
        if self.kind == ScheduleKind.VARIANCE_PRESERVING:
            return (steps + 1) / self.num_steps
        return steps / max(self.num_steps - 1, 1)

    def noise_scale(self, step: int) -> float:
        """Standard deviation of the noise term at ``step`` (the ε-to-score factor)."""
        step = self.check_step(step)
        if self.kind == ScheduleKind.VARIANCE_PRESERVING:
            return math.sqrt(1.0 - self.values[step])
        if self.kind == ScheduleKind.VARIANCE_EXPLODING:
            return float(self.values[step])
        return float(self.values[step])

    def signal_scale(self, step: int) -> float:
        step = self.check_step(step)
        if self.kind == ScheduleKind.VARIANCE_PRESERVING:
            return math.sqrt(self.values[step])
        if self.kind == ScheduleKind.VARIANCE_EXPLODING:
            return 1.0
        return 1.0 - float(self.values[step])

    def inference_steps(self, n: int) -> np.ndarray:
        """Evenly spaced step indices from highest noise downward.

        VP: ``n`` evaluation indices ending at 0. Rectified flow: ``n + 1`` grid
        indices from ``T - 1`` to 0, so consecutive pairs define Euler steps.
        """
        if n <= 0:
            raise ValueError("inference step count must be positive")
        if n > self.num_steps:
            raise ValueError(f"{n} inference steps exceed schedule length {self.num_steps}")
        if self.kind == ScheduleKind.RECTIFIED_FLOW:
            idx = np.linspace(self.num_steps - 1, 0, n + 1)
        else:
            idx = np.linspace(self.num_steps - 1, 0, n)
        idx = np.round(idx).astype(int)
        if len(np.unique(idx)) != len(idx):
            raise ValueError(f"{n} inference steps do not fit a {self.num_steps}-step schedule")
        return idx

    def __eq__(self, other):
        if not isinstance(other, NoiseSchedule):
            return NotImplemented
        return (self.kind == other.kind and self.sigma_max == other.sigma_max
                and np.array_equal(self.values, other.values))

    def __hash__(self):
        return hash((int(self.kind), self.sigma_max, self.values.tobytes()))


def _check_schedule(kind, values, sigma_max):
    if values.ndim != 1 or len(values) < 1:
        raise ValueError("schedule needs a nonempty 1-D array")
    if not np.all(np.isfinite(values)) or not sigma_max > 0:
        raise ValueError("schedule values must be finite and sigma_max positive")
    if kind == ScheduleKind.VARIANCE_PRESERVING:
        if np.any(values <= 0) or np.any(values > 1):
            raise ValueError("alpha_bar must lie in (0, 1]")
        if len(values) > 1 and np.any(np.diff(values) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if sigma_max != 1.0:
            raise ValueError("VP schedules have sigma_max = 1")
    elif kind == ScheduleKind.VARIANCE_EXPLODING:
        if np.any(values <= 0) or (len(values) > 1 and np.any(np.diff(values) <= 0)):
            raise ValueError("sigma must be positive and strictly increasing")
        if values[-1] != sigma_max:
            raise ValueError("sigma[T-1] must equal sigma_max")
    else:
        n = len(values)
        if n < 2 or not np.array_equal(values, np.arange(n) / (n - 1)):
            raise ValueError("rectified-flow grid must be i / (T - 1)")
        if sigma_max != 1.0:
            raise ValueError("rectified flow has sigma_max = 1")


def vp_cosine(num_steps: int = 100, alpha_bar_min: float = 0.005, offset: float = 0.008) -> NoiseSchedule:
    """Cosine alpha_bar schedule, rescaled so the last step hits ``alpha_bar_min``.

    The rescaling keeps a nonzero signal at the highest noise level, where the
    noise aligner evaluates the model.
    """
    if num_steps < 2:
        raise ValueError("num_steps must be >= 2")
    c0 = math.cos(0.5 * math.pi * offset / (1 + offset)) ** 2
    u_end = math.acos(math.sqrt(alpha_bar_min * c0)) * 2 / math.pi * (1 + offset) - offset
    u = np.arange(1, num_steps + 1) / num_steps * u_end
    alpha_bar = np.cos(0.5 * np.pi * (u + offset) / (1 + offset)) ** 2 / c0
    alpha_bar[-1] = alpha_bar_min
    return NoiseSchedule(ScheduleKind.VARIANCE_PRESERVING, alpha_bar, 1.0)


def vp_from_alpha_bar(alpha_bar) -> NoiseSchedule:
    return NoiseSchedule(ScheduleKind.VARIANCE_PRESERVING, np.asarray(alpha_bar, float), 1.0)


def ve_geometric(num_steps: int = 100, sigma_min: float = 0.002, sigma_max: float = 80.0) -> NoiseSchedule:
    sigma = np.geomspace(sigma_min, sigma_max, num_steps)
    sigma[-1] = sigma_max
    return NoiseSchedule(ScheduleKind.VARIANCE_EXPLODING, sigma, float(sigma_max))


def rectified_flow(num_steps: int = 101) -> NoiseSchedule:
    return NoiseSchedule(ScheduleKind.RECTIFIED_FLOW, np.arange(num_steps) / (num_steps - 1), 1.0)


def perturb(schedule: NoiseSchedule, x0, step: int, eps) -> np.ndarray:
    """Forward-corrupt clean data ``x0`` with noise ``eps`` at ``step``."""
    step = schedule.check_step(step)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and eps {eps.shape} differ in shape")
    if schedule.kind == ScheduleKind.VARIANCE_PRESERVING:
        ab = schedule.values[step]
        return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps
    if schedule.kind == ScheduleKind.VARIANCE_EXPLODING:
        return x0 + schedule.values[step] * eps
    t = schedule.values[step]
    return (1.0 - t) * x0 + t * eps


def perturb_batch(schedule: NoiseSchedule, x0: np.ndarray, steps: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Row-wise :func:`perturb` with a step index per row."""
    v = schedule.values[steps][:, None]
    if schedule.kind == ScheduleKind.VARIANCE_PRESERVING:
        return np.sqrt(v) * x0 + np.sqrt(1.0 - v) * eps
    if schedule.kind == ScheduleKind.VARIANCE_EXPLODING:
        return x0 + v * eps
    return (1.0 - v) * x0 + v * eps


def initial_noise_std(schedule: NoiseSchedule) -> float:
    return float(schedule.sigma_max)
