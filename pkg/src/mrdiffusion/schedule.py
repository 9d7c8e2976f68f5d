"""Linear noise schedule and closed-form forward-process quantities.

All tables are 1-indexed by diffusion step: entry 0 holds the ``t = 0``
boundary values (alpha_bar_0 = 1, beta_0 = 0) so that ``alpha_bars[t - 1]``
is always defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import InvalidInputError

BETA_START = 1e-4
BETA_END = 2e-2
_BETA_START_Q = Fraction(1, 10_000)
_BETA_END_Q = Fraction(2, 100)


def linear_beta(t: int, T: int) -> float:
    if T < 1:
        raise InvalidInputError(f"T must be >= 1, got {T}")
    if not 1 <= t <= T:
        raise InvalidInputError(f"t must be in [1, {T}], got {t}")
    if T == 1:
        return BETA_START
    # rational evaluation, rounded once: endpoints come out exactly 1e-4 and 2e-2
    exact = (_BETA_START_Q * (T - t) + _BETA_END_Q * (t - 1)) / (T - 1)
    return float(exact)


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_vars: np.ndarray

    def check_t(self, t: int) -> int:
        if not 1 <= int(t) <= self.T:
            raise InvalidInputError(f"t must be in [1, {self.T}], got {t}")
        return int(t)


def build_schedule(T: int) -> DiffusionSchedule:
    if T < 1:
        raise InvalidInputError(f"T must be >= 1, got {T}")
    betas = np.zeros(T + 1, dtype=np.float64)
    betas[1:] = [linear_beta(t, T) for t in range(1, T + 1)]
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)  # alphas[0] == 1
    post = np.zeros(T + 1, dtype=np.float64)
    post[1:] = (1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:]) * betas[1:]
    for arr in (betas, alphas, alpha_bars, post):
        arr.setflags(write=False)
    return DiffusionSchedule(T, betas, alphas, alpha_bars, post)


def _check_shapes(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise InvalidInputError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(x0, t: int, eps, sched: DiffusionSchedule):
    """Noise ``x0`` directly to step ``t``. Works on numpy arrays and torch tensors."""
    _check_shapes(x0, eps)
    t = sched.check_t(t)
    ab = float(sched.alpha_bars[t])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def predict_x0(xt, eps, t: int, sched: DiffusionSchedule):
    _check_shapes(xt, eps)
    t = sched.check_t(t)
    ab = float(sched.alpha_bars[t])
    return (xt - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
