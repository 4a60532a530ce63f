"""Truncated-sigma flow matching for the latent refiner.

The refiner starts from a noised version of the degraded latent rather than
pure noise, so only noise levels in ``(0, sigma_start]`` are ever visited.
The network itself is out of scope; velocity functions are injected.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidInputError, SamplingError

SIGMA_START = 0.909375
DISTILLED_SIGMAS = (0.909375, 0.725, 0.421875, 0.0)
MAX_DRAWS = 10_000


@dataclass(frozen=True)
class LatentPair:
    x_l: np.ndarray
    x_h: np.ndarray

    def __post_init__(self):
        x_l, x_h = np.asarray(self.x_l, dtype=float), np.asarray(self.x_h, dtype=float)
        if x_l.shape != x_h.shape:
            raise InvalidInputError(f"latent shapes differ: {x_l.shape} vs {x_h.shape}")
        if not (np.all(np.isfinite(x_l)) and np.all(np.isfinite(x_h))):
            raise InvalidInputError("latents must be finite")
        object.__setattr__(self, "x_l", x_l)
        object.__setattr__(self, "x_h", x_h)


@dataclass(frozen=True)
class SigmaSchedule:
    steps: tuple[float, ...] = DISTILLED_SIGMAS

    def __post_init__(self):
        steps = tuple(float(s) for s in self.steps)
        if len(steps) < 2:
            raise InvalidInputError("schedule needs a start and an end")
        if not 0 < steps[0] <= 1:
            raise InvalidInputError(f"sigma_start must be in (0, 1], got {steps[0]}")
        if steps[-1] != 0:
            raise InvalidInputError("schedule must end at 0")
        if any(b >= a for a, b in zip(steps, steps[1:])):
            raise InvalidInputError("schedule must be strictly descending")
        object.__setattr__(self, "steps", steps)

    @property
    def sigma_start(self) -> float:
        return self.steps[0]

    def pairs(self):
        return list(zip(self.steps, self.steps[1:]))


@dataclass(frozen=True)
class LogitNormalParams:
    mean: float = 0.0
    std: float = 1.0
    shift: float = 0.0

    def __post_init__(self):
        if not self.std > 0:
            raise InvalidInputError(f"logit-normal std must be positive, got {self.std}")


def _check_sigma_start(sigma_start: float, allow_zero: bool = True) -> float:
    s = float(sigma_start)
    if not (0 <= s <= 1) or (s == 0 and not allow_zero):
        raise InvalidInputError(f"sigma_start out of range: {sigma_start}")
    return s


def make_source(x_l, sigma_start: float, noise) -> np.ndarray:
    """``x_1 = (1 - sigma_start) x_l + sigma_start * noise``."""
    x_l, noise = np.asarray(x_l, dtype=float), np.asarray(noise, dtype=float)
    if x_l.shape != noise.shape:
        raise InvalidInputError(f"noise shape {noise.shape} != latent shape {x_l.shape}")
    s = _check_sigma_start(sigma_start)
    return (1.0 - s) * x_l + s * noise


def sample_sigma(params: LogitNormalParams, sigma_start: float, rng: np.random.Generator,
                 size: int | None = None, max_draws: int = MAX_DRAWS):
    """Shifted logit-normal noise level, rejection-sampled into ``(0, sigma_start]``.

    ``sigma = sigmoid(mean + std * n) + shift``. Each returned value gets at
    most ``max_draws`` attempts before :class:`SamplingError` is raised.
    """
    s = _check_sigma_start(sigma_start, allow_zero=False)
    count = 1 if size is None else int(size)
    out = np.empty(count)
    for k in range(count):
        for _ in range(max_draws):
            z = params.mean + params.std * rng.standard_normal()
            sigma = 1.0 / (1.0 + np.exp(-z)) + params.shift
            if 0.0 < sigma <= s:
                out[k] = sigma
                break
        else:
            raise SamplingError(f"no sigma in (0, {s}] after {max_draws} draws with {params}")
    return float(out[0]) if size is None else out


def sample_sigmas(params: LogitNormalParams, sigma_start: float, rng: np.random.Generator, size: int,
                  max_draws: int = MAX_DRAWS) -> np.ndarray:
    """Vectorised :func:`sample_sigma`; same distribution, block rejection."""
    s = _check_sigma_start(sigma_start, allow_zero=False)
    out = np.empty(0)
    draws = 0
    while out.size < size:
        need = size - out.size
        z = params.mean + params.std * rng.standard_normal(max(2 * need, 64))
        sigma = 1.0 / (1.0 + np.exp(-z)) + params.shift
        out = np.concatenate([out, sigma[(sigma > 0) & (sigma <= s)]])
        draws += z.size
        if out.size == 0 and draws >= max_draws:
            raise SamplingError(f"no sigma in (0, {s}] after {draws} draws with {params}")
    return out[:size]


def interpolate(x_h, x_1, sigma_t: float, sigma_start: float) -> np.ndarray:
    """``x_t = (1 - a) x_h + a x_1`` with ``a = sigma_t / sigma_start``."""
    s = _check_sigma_start(sigma_start, allow_zero=False)
    if not 0 < sigma_t <= s:
        raise InvalidInputError(f"sigma_t must be in (0, {s}], got {sigma_t}")
    x_h, x_1 = np.asarray(x_h, dtype=float), np.asarray(x_1, dtype=float)
    if x_h.shape != x_1.shape:
        raise InvalidInputError("x_h and x_1 shapes differ")
    a = sigma_t / s
    return (1.0 - a) * x_h + a * x_1


def target_velocity(x_1, x_h, sigma_start: float) -> np.ndarray:
    """``v* = (x_1 - x_h) / sigma_start``, the constant d x_t / d sigma_t."""
    x_1, x_h = np.asarray(x_1, dtype=float), np.asarray(x_h, dtype=float)
    if x_1.shape != x_h.shape:
        raise InvalidInputError("x_1 and x_h shapes differ")
    if sigma_start == 0:
        raise InvalidInputError("sigma_start must be nonzero")
    return (x_1 - x_h) / sigma_start


def refiner_loss(pred_v, v_star, mask=None) -> float:
    """Mean squared velocity error.

    ``mask`` (broadcastable, truthy = included) drops tokens from the mean;
    reference-conditioning tokens are excluded this way.
    """
    pred_v, v_star = np.asarray(pred_v, dtype=float), np.asarray(v_star, dtype=float)
    if pred_v.shape != v_star.shape:
        raise InvalidInputError(f"prediction shape {pred_v.shape} != target shape {v_star.shape}")
    sq = (pred_v - v_star) ** 2
    if mask is None:
        return float(np.mean(sq))
    m = np.broadcast_to(np.asarray(mask, dtype=bool), sq.shape)
    if not m.any():
        raise InvalidInputError("loss mask excludes every element")
    return float(np.mean(sq[m]))


@dataclass
class RefineTrace:
    steps: list[dict] = field(default_factory=list)

    def record(self, sigma: float, x: np.ndarray):
        self.steps.append({"sigma": float(sigma), "mean_abs": float(np.mean(np.abs(x)))})


def euler_refine(x_start, schedule: SigmaSchedule, velocity_fn: Callable[[np.ndarray, float], np.ndarray],
                 trace: RefineTrace | None = None) -> np.ndarray:
    """``x <- x - (sigma_i - sigma_{i+1}) v(x, sigma_i)`` over consecutive schedule levels."""
    x = np.array(x_start, dtype=float)
    if trace is not None:
        trace.record(schedule.steps[0], x)
    for hi, lo in schedule.pairs():
        x = x - (hi - lo) * np.asarray(velocity_fn(x, hi), dtype=float)
        if trace is not None:
            trace.record(lo, x)
    return x


def oracle_velocity(x_1, x_h, sigma_start: float) -> Callable[[np.ndarray, float], np.ndarray]:
    v = target_velocity(x_1, x_h, sigma_start)
    return lambda x, sigma: v


def schedule_from(steps: Sequence[float] | None) -> SigmaSchedule:
    return SigmaSchedule() if steps is None else SigmaSchedule(tuple(steps))
