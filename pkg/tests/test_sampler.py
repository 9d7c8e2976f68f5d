import math

import numpy as np
import pytest
import torch

from mrdiffusion.denoiser import DenoiserConfig, init_params
from mrdiffusion.errors import InvalidInputError, NumericalError
from mrdiffusion.sampler import SampleConfig, ensemble_rounds, ensemble_sample, reverse_step, sample_one
from mrdiffusion.schedule import build_schedule

SCHED = build_schedule(10)


def zero_eps(x, cond, t):
    return torch.zeros_like(x)


def shrink(x, cond, t):
    return 0.3 * x - 0.1 * cond


def test_config_validation():
    with pytest.raises(InvalidInputError):
        SampleConfig(R=0)
    with pytest.raises(InvalidInputError):
        SampleConfig(T=0)


def test_zero_eps_zero_noise_divides_by_sqrt_alpha():
    x = torch.randn(2, 5, 5, dtype=torch.float64)
    for t in (1, 4, 10):
        out = reverse_step(zero_eps, x, x, t, torch.zeros_like(x), SCHED)
        torch.testing.assert_close(out, x / math.sqrt(SCHED.alphas[t]), rtol=1e-14, atol=0)
        lit = reverse_step(zero_eps, x, x, t, torch.zeros_like(x), SCHED, literal_coefficient=True)
        torch.testing.assert_close(lit, x * math.sqrt(SCHED.alphas[t]), rtol=1e-14, atol=0)


def test_last_step_ignores_noise():
    x = torch.randn(1, 4, 4, dtype=torch.float64)
    a = reverse_step(shrink, x, x, 1, torch.randn_like(x), SCHED)
    b = reverse_step(shrink, x, x, 1, None, SCHED)
    assert torch.equal(a, b)
    with pytest.raises(InvalidInputError):
        reverse_step(shrink, x, x, 2, None, SCHED)
    with pytest.raises(InvalidInputError):
        reverse_step(shrink, x, x, 11, None, SCHED)


def test_mean_matches_gaussian_posterior():
    rng = np.random.default_rng(0)
    x0 = torch.from_numpy(rng.random((1, 6, 6)))
    eps = torch.from_numpy(rng.standard_normal((1, 6, 6)))
    t = 3
    ab, ab_prev = SCHED.alpha_bars[t], SCHED.alpha_bars[t - 1]
    beta, alpha = SCHED.betas[t], SCHED.alphas[t]
    xt = math.sqrt(ab) * x0 + math.sqrt(1 - ab) * eps
    oracle = (math.sqrt(ab_prev) * beta / (1 - ab)) * x0 + (math.sqrt(alpha) * (1 - ab_prev) / (1 - ab)) * xt
    out = reverse_step(lambda x, c, tt: eps, xt, xt, t, torch.zeros_like(xt), SCHED)
    assert (out - oracle).abs().max().item() < 1e-10
    z = torch.ones_like(xt)
    noisy = reverse_step(lambda x, c, tt: eps, xt, xt, t, z, SCHED)
    torch.testing.assert_close(noisy - out, z * math.sqrt(SCHED.posterior_vars[t]))


def test_seeding():
    cond = torch.rand(3, 8, 8)
    a = sample_one(shrink, cond, SCHED, seed=5)
    b = sample_one(shrink, cond, SCHED, seed=5)
    c = sample_one(shrink, cond, SCHED, seed=6)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)
    assert a.min() >= 0 and a.max() <= 1
    single = sample_one(shrink, cond[0], SCHED, seed=5)
    assert single.shape == (8, 8)


def test_trajectory_recording():
    traj = []
    out = sample_one(shrink, torch.rand(8, 8), SCHED, seed=1, clamp=False, trajectory=traj)
    steps = [s for s, _ in traj]
    assert steps == [9, 8, 7, 6, 5, 4, 3, 2, 1, 0]
    assert torch.equal(traj[-1][1][0], out)


def test_nonfinite_state_raises():
    with pytest.raises(NumericalError, match="t=10"):
        sample_one(lambda x, c, t: torch.full_like(x, float("nan")), torch.rand(4, 4), SCHED, seed=0)


def test_ensemble_structure():
    cond = torch.rand(2, 8, 8, dtype=torch.float64)
    one = ensemble_sample(shrink, cond, SCHED, R=1, seed=10)
    assert torch.equal(one, sample_one(shrink, cond, SCHED, seed=11))
    rounds = ensemble_rounds(shrink, cond, SCHED, R=4, seed=10)
    assert rounds.shape == (4, 2, 8, 8)
    for r in range(4):
        assert torch.equal(rounds[r], sample_one(shrink, cond, SCHED, seed=11 + r, clamp=False))
    mean = ensemble_sample(shrink, cond, SCHED, R=4, seed=10, clamp=False)
    torch.testing.assert_close(mean, rounds.mean(0), rtol=0, atol=1e-15)
    perm = rounds[torch.tensor([2, 0, 3, 1])].mean(0)
    torch.testing.assert_close(perm, mean, rtol=0, atol=1e-14)
    with pytest.raises(InvalidInputError):
        ensemble_rounds(shrink, cond, SCHED, R=0, seed=0)


def test_ensemble_variance_scales_inverse_in_R():
    cond = torch.rand(16, 16, dtype=torch.float64)
    Rs = [1, 2, 4, 8]
    variances = []
    for R in Rs:
        ens = torch.stack([ensemble_sample(shrink, cond, SCHED, R, seed=1000 * k, clamp=False) for k in range(40)])
        variances.append(ens.var(0).mean().item())
    slope = np.polyfit(np.log(Rs), np.log(variances), 1)[0]
    assert -1.3 <= slope <= -0.7


def test_denoiser_timestep_mapping():
    model = init_params(
        DenoiserConfig(base_channels=4, channel_multipliers=(1,), n_rrdb=1, T_max=10, in_h=8, in_w=8), seed=1
    )
    seen = []
    orig = model.forward

    def spy(x, c, t):
        seen.append(int(t[0]))
        return orig(x, c, t)

    model.forward = spy
    sample_one(model, torch.rand(8, 8), build_schedule(5), seed=0)
    assert seen == [10, 8, 6, 4, 2]
