import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cmsr.denoiser import DenoiserModel, GaussianOracle, UNetConfig
from cmsr.errors import ConfigError, ContractError, NumericError
from cmsr.samplers import SamplerRun, cm_sample, ddim_sample, ddim_step, ddpm_sample, ddpm_step, q_sample
from cmsr.schedule import BoundaryScalings, linear_beta_schedule, strided_timesteps

MU0, SIGMA0 = 0.3, 0.2


def test_q_sample_closed_form(schedule, rng):
    x0 = rng.uniform(-1, 1, (4, 3))
    eps = rng.standard_normal((4, 3))
    ab = schedule.alpha_bar(250)
    np.testing.assert_allclose(q_sample(x0, 250, eps, schedule), math.sqrt(ab) * x0 + math.sqrt(1 - ab) * eps, rtol=1e-15)


def test_q_sample_per_sample_timesteps(schedule, rng):
    x0, eps = rng.standard_normal((3, 2, 2)), rng.standard_normal((3, 2, 2))
    out = q_sample(x0, np.array([1, 500, 1000]), eps, schedule)
    for i, t in enumerate([1, 500, 1000]):
        np.testing.assert_array_equal(out[i], q_sample(x0[i], t, eps[i], schedule))


def test_q_sample_rejects_bad_timestep(schedule):
    with pytest.raises(ConfigError):
        q_sample(np.zeros(2), 0, np.zeros(2), schedule)


@given(st.integers(2, 1000))
def test_ddpm_mean_matches_posterior_form(t):
    # mean of x_{t-1} written through the x0 estimate must equal the eps form
    s = linear_beta_schedule()
    rng = np.random.default_rng(t)
    x_t, eps = rng.standard_normal(5), rng.standard_normal(5)
    ab, ab_prev, beta = s.alpha_bar(t), s.alpha_bar(t - 1), s.beta(t)
    x0 = (x_t - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
    posterior = math.sqrt(ab_prev) * beta / (1 - ab) * x0 + math.sqrt(1 - beta) * (1 - ab_prev) / (1 - ab) * x_t
    np.testing.assert_allclose(ddpm_step(x_t, eps, t, s, None), posterior, rtol=1e-9, atol=1e-9)


def test_ddpm_step_noise_scale(schedule):
    x = np.zeros(3)
    z = np.ones(3)
    out = ddpm_step(x, np.zeros(3), 500, schedule, z)
    np.testing.assert_allclose(out, math.sqrt(schedule.beta(500)))
    post = ddpm_step(x, np.zeros(3), 500, schedule, z, variance="posterior")
    ratio = (1 - schedule.alpha_bar(499)) / (1 - schedule.alpha_bar(500))
    np.testing.assert_allclose(post, math.sqrt(schedule.beta(500) * ratio))
    assert np.all(ddpm_step(x, np.zeros(3), 1, schedule, z) == 0.0)


def test_ddim_to_zero_returns_clean_estimate(schedule, rng):
    x, eps = rng.standard_normal(4), rng.standard_normal(4)
    ab = schedule.alpha_bar(300)
    np.testing.assert_allclose(ddim_step(x, eps, 300, 0, schedule), (x - math.sqrt(1 - ab) * eps) / math.sqrt(ab), rtol=1e-14)


@given(st.integers(2, 1000))
def test_ddim_eta_one_equals_ancestral_posterior_step(t):
    s = linear_beta_schedule()
    rng = np.random.default_rng(t)
    x, eps, z = rng.standard_normal(6), rng.standard_normal(6), rng.standard_normal(6)
    a = ddim_step(x, eps, t, t - 1, s, eta=1.0, z=z)
    b = ddpm_step(x, eps, t, s, z, variance="posterior")
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-9)


def test_ddim_step_contract(schedule):
    with pytest.raises(ContractError):
        ddim_step(np.zeros(2), np.zeros(2), 10, 10, schedule)
    with pytest.raises(ContractError):
        ddim_step(np.zeros(2), np.zeros(2), 10, 5, schedule, eta=0.5)


def test_ddim_per_sample_matches_scalar(schedule, rng):
    x, eps = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    both = ddim_step(x, eps, np.array([40, 900]), np.array([20, 880]), schedule)
    np.testing.assert_array_equal(both[0], ddim_step(x[0], eps[0], 40, 20, schedule))
    np.testing.assert_array_equal(both[1], ddim_step(x[1], eps[1], 900, 880, schedule))


def test_ddim_deterministic_and_counts(schedule):
    oracle = GaussianOracle(MU0, SIGMA0, schedule)
    runs = [SamplerRun(seed=5, steps=20) for _ in range(2)]
    a = ddim_sample(oracle, None, schedule, None, runs[0], shape=(64,))
    b = ddim_sample(oracle, None, schedule, None, runs[1], shape=(64,))
    assert a.tobytes() == b.tobytes()
    assert runs[0].nfe == 20


@pytest.mark.parametrize("stride", [1, 10, 20, 250])
def test_ddim_stride_evaluation_count(schedule, stride):
    run = SamplerRun(seed=0)
    ddim_sample(GaussianOracle(MU0, SIGMA0, schedule), None, schedule, stride, run, shape=(2,))
    assert run.nfe == schedule.T // stride
    assert strided_timesteps(schedule, stride).N == run.nfe


def test_ddim_small_population(schedule):
    run = SamplerRun(seed=1, steps=50)
    x = ddim_sample(GaussianOracle(MU0, SIGMA0, schedule), None, schedule, None, run, shape=(4000,))
    assert abs(x.mean() - MU0) < 0.02
    assert abs(x.std() / SIGMA0 - 1) < 0.15


def test_ddpm_population_and_count(schedule):
    run = SamplerRun(seed=2, steps=schedule.T)
    x = ddpm_sample(GaussianOracle(MU0, SIGMA0, schedule), None, schedule, run, shape=(4000,))
    assert run.nfe == 1000
    assert abs(x.mean() - MU0) < 0.02
    assert abs(x.std() / SIGMA0 - 1) < 0.15


def test_ddpm_requires_full_chain(schedule):
    with pytest.raises(ContractError):
        ddpm_sample(GaussianOracle(MU0, SIGMA0, schedule), None, schedule, SamplerRun(seed=0, steps=50), shape=(2,))


def test_trajectory_logging(schedule):
    run = SamplerRun(seed=0, steps=5, log_trajectory=True)
    ddim_sample(GaussianOracle(MU0, SIGMA0, schedule), None, schedule, None, run, shape=(3,))
    assert len(run.trajectory_log) == 6


def test_non_finite_sample_reports_step(schedule):
    def bad(x, t):
        return np.full_like(x, np.nan) if t < 500 else np.zeros_like(x)

    with pytest.raises(NumericError, match="step"):
        ddim_sample(bad, None, schedule, None, SamplerRun(seed=0, steps=10), shape=(2,))


def test_eps_fn_requires_shape(schedule):
    with pytest.raises(ContractError):
        ddim_sample(GaussianOracle(MU0, SIGMA0, schedule), None, schedule, None, SamplerRun(seed=0, steps=10))


def test_tau_validation(schedule):
    with pytest.raises(ConfigError):
        ddim_sample(GaussianOracle(MU0, SIGMA0, schedule), None, schedule, [10, 5, 1000], SamplerRun(seed=0), shape=(2,))


def test_eta_range():
    with pytest.raises(ConfigError):
        SamplerRun(seed=0, eta=1.5)


@pytest.mark.parametrize("times", [[1000], [1000, 500], [1000, 500, 200, 50]])
def test_cm_sample_evaluation_count(schedule, rng, times):
    model = DenoiserModel.init(UNetConfig(), seed=0, requires_grad=False)
    run = SamplerRun(seed=0)
    out = cm_sample(model, rng.uniform(-1, 1, (2, 3, 8, 8)), schedule, BoundaryScalings(), times, run)
    assert run.nfe == len(times)
    assert out.shape == (2, 3, 32, 32)
    assert out.min() >= -1 and out.max() <= 1


@pytest.mark.parametrize("times", [[], [500], [1000, 1000], [1000, 500, 200, 50, 10]])
def test_cm_sample_rejects_bad_times(schedule, times):
    model = DenoiserModel.init(UNetConfig(), seed=0)
    with pytest.raises(ConfigError):
        cm_sample(model, np.zeros((3, 8, 8)), schedule, BoundaryScalings(), times, SamplerRun(seed=0))


def test_cm_sample_deterministic(schedule, rng):
    model = DenoiserModel.init(UNetConfig(), seed=0, requires_grad=False)
    cond = rng.uniform(-1, 1, (1, 3, 8, 8))
    a = cm_sample(model, cond, schedule, BoundaryScalings(), [1000, 500], SamplerRun(seed=9))
    b = cm_sample(model, cond, schedule, BoundaryScalings(), [1000, 500], SamplerRun(seed=9))
    assert a.tobytes() == b.tobytes()


def test_model_sampler_needs_condition(schedule):
    model = DenoiserModel.init(UNetConfig(), seed=0)
    with pytest.raises(ContractError):
        ddim_sample(model, None, schedule, None, SamplerRun(seed=0, steps=2))
