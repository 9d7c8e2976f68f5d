"""Conditional reverse diffusion with multi-round ensembling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .denoiser import ConditionalDenoiser, map_timestep
from .errors import InvalidInputError, NumericalError
from .schedule import DiffusionSchedule


@dataclass(frozen=True)
class SampleConfig:
    T: int = 50
    R: int = 4
    seed: int = 0
    record_trajectory: bool = False
    literal_coefficient: bool = False

    def __post_init__(self):
        if self.T < 1 or self.R < 1:
            raise InvalidInputError(f"T and R must be >= 1, got T={self.T}, R={self.R}")


def reverse_step(
    p,
    x_t: torch.Tensor,
    cond: torch.Tensor,
    t: int,
    z: torch.Tensor | None,
    sched: DiffusionSchedule,
    literal_coefficient: bool = False,
) -> torch.Tensor:
    """One ancestral step ``x_t -> x_{t-1}``.

    ``x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(alpha_t) + [t > 1] sqrt(beta~_t) z``

    With ``literal_coefficient`` the leading factor is ``sqrt(alpha_t)``
    instead of its reciprocal (kept only for comparison runs).
    ``p`` is a denoiser or any callable ``(x_t, cond, t) -> eps``.
    """
    t = sched.check_t(t)
    alpha = float(sched.alphas[t])
    coef = (1.0 - alpha) / math.sqrt(1.0 - float(sched.alpha_bars[t]))
    t_model = t
    if isinstance(p, ConditionalDenoiser):
        t_model = map_timestep(t, sched.T, p.cfg.T_max)
    eps = p(x_t, cond, torch.full((x_t.shape[0],), t_model, dtype=torch.long))
    lead = math.sqrt(alpha) if literal_coefficient else 1.0 / math.sqrt(alpha)
    out = lead * (x_t - coef * eps)
    if t > 1:
        if z is None:
            raise InvalidInputError("z is required for t > 1")
        out = out + math.sqrt(float(sched.posterior_vars[t])) * z
    return out


def _as_batch(cond):
    cond = torch.as_tensor(cond)
    single = cond.ndim == 2
    return (cond[None] if single else cond), single


@torch.no_grad()
def sample_one(
    p,
    cond,
    sched: DiffusionSchedule,
    seed: int,
    clamp: bool = True,
    literal_coefficient: bool = False,
    trajectory: list | None = None,
) -> torch.Tensor:
    """Run the chain ``t = T .. 1`` from Gaussian noise.

    ``cond`` is (H, W) or a batch (B, H, W); the whole batch shares one
    generator seeded by ``seed``. With ``trajectory`` given, every
    ``ceil(T / 10)``-th state is appended to it.
    """
    cond, single = _as_batch(cond)
    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn(cond.shape, generator=gen, dtype=cond.dtype)
    every = math.ceil(sched.T / 10)
    for t in range(sched.T, 0, -1):
        z = torch.randn(cond.shape, generator=gen, dtype=cond.dtype)
        x = reverse_step(p, x, cond, t, z, sched, literal_coefficient)
        if not torch.isfinite(x).all():
            raise NumericalError(f"non-finite sampler state at step t={t}")
        if trajectory is not None and (t % every == 0 or t == 1):
            trajectory.append((t - 1, x.clone()))
    if clamp:
        x = x.clamp(0.0, 1.0)
    return x[0] if single else x


@torch.no_grad()
def ensemble_rounds(p, cond, sched, R: int, seed: int, literal_coefficient: bool = False) -> torch.Tensor:
    """Raw outputs of the ``R`` rounds, stacked on a new leading axis.

    Round ``r`` (1-based) uses seed ``seed + r``.
    """
    if R < 1:
        raise InvalidInputError(f"R must be >= 1, got {R}")
    return torch.stack(
        [sample_one(p, cond, sched, seed + r, clamp=False, literal_coefficient=literal_coefficient) for r in range(1, R + 1)]
    )


@torch.no_grad()
def ensemble_sample(
    p,
    cond,
    sched: DiffusionSchedule,
    R: int,
    seed: int,
    clamp: bool = True,
    literal_coefficient: bool = False,
) -> torch.Tensor:
    """Average of ``R`` independent reverse chains, clamped to [0, 1] by default."""
    x = ensemble_rounds(p, cond, sched, R, seed, literal_coefficient).mean(0)
    return x.clamp(0.0, 1.0) if clamp else x
