import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cmsr import checkpoint
from cmsr import tensor as tn
from cmsr.data import upsample_nearest_x4
from cmsr.denoiser import (
    DenoiserModel,
    GaussianOracle,
    UNetConfig,
    analytic_gaussian_eps,
    consistency_forward,
    consistency_weights,
    forward_eps,
    parameter_shapes,
    time_embedding,
    x0_from_eps,
)
from cmsr.errors import ConfigError, ContractError, InvalidShapeError
from cmsr.samplers import SamplerRun, ddim_sample, q_sample
from cmsr.schedule import BoundaryScalings
from cmsr.tensor import Tensor
from cmsr.verify import run_model_checks


def random_model(seed=0, config=None):
    config = config or UNetConfig()
    model = DenoiserModel.init(config, seed=seed, requires_grad=False)
    rng = np.random.default_rng(seed + 100)
    for p in model.params.values():
        p.data = p.data + rng.standard_normal(p.shape) * 0.1
    return model


def test_time_embedding_at_zero():
    e = time_embedding(0, 8).data
    np.testing.assert_array_equal(e[0::2], 0.0)
    np.testing.assert_array_equal(e[1::2], 1.0)


def test_time_embedding_formula():
    # dim 4: frequencies 1 and 1e-4
    e = time_embedding(1, 4).data
    expected = [math.sin(1.0), math.cos(1.0), math.sin(1e-4), math.cos(1e-4)]
    np.testing.assert_allclose(e, expected, rtol=1e-15, atol=0)


@given(st.integers(0, 1000))
def test_time_embedding_bounded(t):
    e = time_embedding(t, 32).data
    assert np.all(np.abs(e) <= 1.0)


def test_time_embedding_odd_dim():
    with pytest.raises(ConfigError):
        time_embedding(3, 5)


def test_config_validation():
    with pytest.raises(ConfigError):
        UNetConfig(depth=0)
    with pytest.raises(ConfigError):
        UNetConfig(in_channels=5)
    with pytest.raises(ConfigError):
        UNetConfig(time_embed_dim=7)


def test_parameter_order_and_count():
    shapes = parameter_shapes(UNetConfig())
    names = list(shapes)
    assert len(names) == len(set(names))
    assert names[:4] == ["temb.w1", "temb.b1", "temb.w2", "temb.b2"]
    assert names[-2:] == ["out.w", "out.b"]
    assert DenoiserModel.init(UNetConfig()).num_parameters() == 31157


def test_output_shape_and_zero_init(rng):
    model = DenoiserModel.init(UNetConfig(), seed=1)
    noisy = rng.standard_normal((2, 3, 32, 32))
    cond = rng.uniform(-1, 1, (2, 3, 8, 8))
    out = forward_eps(model, noisy, cond, 500)
    assert out.shape == noisy.shape
    np.testing.assert_array_equal(out.data, 0.0)


def test_forward_is_deterministic(rng):
    model = random_model()
    noisy, cond = rng.standard_normal((2, 3, 32, 32)), rng.uniform(-1, 1, (3, 8, 8))
    a = forward_eps(model, noisy, cond, [3, 900]).data
    b = forward_eps(model, noisy, cond, [3, 900]).data
    np.testing.assert_array_equal(a, b)


def test_unbatched_condition_is_broadcast(rng):
    model = random_model()
    noisy, cond = rng.standard_normal((2, 3, 16, 16)), rng.uniform(-1, 1, (3, 4, 4))
    a = forward_eps(model, noisy, cond, 10).data
    b = forward_eps(model, noisy, np.stack([cond, cond]), 10).data
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize(
    "cond_shape",
    [(3, 16, 16), (2, 8, 8), (1, 3, 8, 8)],
)
def test_condition_shape_errors(rng, cond_shape):
    model = DenoiserModel.init(UNetConfig())
    with pytest.raises(InvalidShapeError):
        forward_eps(model, rng.standard_normal((2, 3, 32, 32)), np.zeros(cond_shape), 1)


def test_odd_extent_rejected():
    model = DenoiserModel.init(UNetConfig(depth=4))
    with pytest.raises(InvalidShapeError):
        forward_eps(model, np.zeros((1, 3, 12, 12)), np.zeros((3, 3, 3)), 1)


def test_every_parameter_receives_gradient(rng):
    model = random_model()
    for p in model.params.values():
        p.requires_grad = True
    noisy, cond = rng.standard_normal((2, 3, 32, 32)), rng.uniform(-1, 1, (2, 3, 8, 8))
    loss = tn.mse(forward_eps(model, noisy, cond, [5, 700]), Tensor(rng.standard_normal((2, 3, 32, 32))))
    loss.backward()
    dead = [k for k, p in model.params.items() if p.grad is None or not np.any(p.grad)]
    assert not dead


def test_model_gradient_check_small_config():
    results = run_model_checks(UNetConfig(base_channels=4, depth=2, time_embed_dim=8), seed=2, image_size=8)
    assert all(r.ok for r in results), [(r.name, r.max_rel_error) for r in results if not r.ok]


def test_state_dict_round_trip_through_checkpoint():
    model = random_model(3)
    blob = checkpoint.dumps(model.state_dict())
    restored = DenoiserModel.init(UNetConfig())
    restored.load_state_dict(checkpoint.loads(blob))
    for k, p in model.params.items():
        assert restored.params[k].data.tobytes() == p.data.tobytes()


def test_load_state_dict_rejects_mismatch():
    model = DenoiserModel.init(UNetConfig())
    state = model.state_dict()
    state["out.b"] = np.zeros(4)
    with pytest.raises(InvalidShapeError):
        model.load_state_dict(state)


# Gaussian-data oracle


def test_oracle_standard_normal_data(schedule, rng):
    x = rng.standard_normal(10)
    ab = schedule.alpha_bar(300)
    np.testing.assert_allclose(analytic_gaussian_eps(x, 300, 0.0, 1.0, schedule), math.sqrt(1 - ab) * x, rtol=1e-13)


def test_oracle_zero_at_noiseless_mean(schedule):
    ab = schedule.alpha_bar(123)
    assert analytic_gaussian_eps(np.array([math.sqrt(ab) * 0.3]), 123, 0.3, 0.2, schedule)[0] == pytest.approx(0, abs=1e-15)


def test_oracle_point_mass_limit(schedule):
    x = np.array([0.7, -0.2])
    ab = schedule.alpha_bar(40)
    exact = (x - math.sqrt(ab) * 0.3) / math.sqrt(1 - ab)
    np.testing.assert_allclose(analytic_gaussian_eps(x, 40, 0.3, 1e-9, schedule), exact, rtol=1e-9)


@pytest.mark.parametrize("t", [20, 400, 900])
def test_oracle_matches_monte_carlo_regression(schedule, t):
    # E[eps | x_t] is linear in x_t for Gaussian data; recover it by least squares
    rng = np.random.default_rng(t)
    mu0, sigma0, n = 0.3, 0.2, 400_000
    x0 = mu0 + sigma0 * rng.standard_normal(n)
    eps = rng.standard_normal(n)
    xt = q_sample(x0, t, eps, schedule)
    slope, intercept = np.polyfit(xt, eps, 1)
    grid = np.linspace(xt.min(), xt.max(), 5)
    np.testing.assert_allclose(analytic_gaussian_eps(grid, t, mu0, sigma0, schedule), slope * grid + intercept, atol=0.01)


def test_oracle_accepts_tensor(schedule):
    out = GaussianOracle(0.3, 0.2, schedule)(Tensor(np.ones(3)), 10)
    assert isinstance(out, Tensor)


# consistency function


@given(st.integers(0, 10_000))
def test_consistency_boundary_is_identity(seed):
    rng = np.random.default_rng(seed)
    model = random_model(seed % 7)
    x = rng.standard_normal((1, 3, 8, 8)) * 3
    out = consistency_forward(model, x, rng.uniform(-1, 1, (3, 2, 2)), 0, BoundaryScalings(), _sched())
    assert out.data.tobytes() == x.tobytes()


def _sched():
    from cmsr.schedule import linear_beta_schedule

    return linear_beta_schedule()


def test_consistency_rejects_mixed_boundary(rng):
    with pytest.raises(ContractError):
        consistency_forward(random_model(), rng.standard_normal((2, 3, 8, 8)), np.zeros((3, 2, 2)), [0, 5], BoundaryScalings(), _sched())


@given(st.integers(1, 1000))
def test_consistency_output_clamped(t):
    rng = np.random.default_rng(t)
    x = rng.standard_normal((1, 3, 8, 8)) * 4
    out = consistency_forward(random_model(1), x, rng.uniform(-1, 1, (3, 2, 2)), t, BoundaryScalings(), _sched())
    assert out.data.min() >= -1.0 and out.data.max() <= 1.0


def test_consistency_weights_convex(schedule):
    w_skip, w_out = consistency_weights(np.array([1, 50, 500, 1000]), schedule, BoundaryScalings())
    np.testing.assert_allclose(w_skip + w_out, 1.0, rtol=1e-15)
    assert np.all(np.diff(w_skip) < 0)
    # 0.5 / (0.5 + sqrt(2)/4) at t = 50
    assert w_skip[1] == pytest.approx(0.58578643762690495, rel=1e-14)


def test_point_mass_oracle_recovers_clean_image(schedule, rng):
    x0 = np.full((2, 3, 4, 4), 0.4)
    eps = rng.standard_normal(x0.shape)
    xt = q_sample(x0, 600, eps, schedule)
    eps_hat = analytic_gaussian_eps(xt, 600, 0.4, 0.0 + 1e-12, schedule)
    x0_hat = x0_from_eps(Tensor(xt), Tensor(eps_hat), 600, schedule).data
    np.testing.assert_allclose(x0_hat, x0, atol=1e-9)
    w_skip, w_out = consistency_weights(600, schedule, BoundaryScalings())
    blend = w_skip * xt + w_out * x0_hat
    # the blend approaches x0 as the output weight grows
    assert np.abs(blend - x0).max() < np.abs(xt - x0).max()


# condition prior


def test_condition_prior_matches_closed_form(schedule, rng):
    model = DenoiserModel.init(UNetConfig(prior_std=0.1), seed=0)
    level = 0.25
    cond = np.full((3, 4, 4), level)
    noisy = rng.standard_normal((2, 3, 16, 16))
    out = forward_eps(model, noisy, cond, [7, 640]).data
    for i, t in enumerate([7, 640]):
        np.testing.assert_allclose(out[i], analytic_gaussian_eps(noisy[i], t, level, 0.1, schedule), rtol=1e-13, atol=1e-15)


def test_condition_prior_untrained_ddim_returns_condition(schedule, rng):
    # a vanishing prior std makes x0 equal the upsampled condition at every step
    model = DenoiserModel.init(UNetConfig(prior_std=1e-6), seed=0, requires_grad=False)
    cond = rng.uniform(-0.9, 0.9, (2, 3, 4, 4))
    out = ddim_sample(model, cond, schedule, None, SamplerRun(seed=0, steps=10))
    np.testing.assert_allclose(out, upsample_nearest_x4(cond), atol=1e-6)


def test_condition_prior_gradients():
    cfg = UNetConfig(base_channels=4, depth=2, time_embed_dim=8, prior_std=0.1)
    results = run_model_checks(cfg, seed=1, image_size=8)
    assert all(r.ok for r in results), [(r.name, r.max_rel_error) for r in results if not r.ok]


def test_prior_std_validation():
    with pytest.raises(ConfigError):
        UNetConfig(prior_std=-0.1)
