import numpy as np
import pytest

from cmsr.data import synth_textures
from cmsr.denoiser import DenoiserModel, GaussianOracle, UNetConfig
from cmsr.distillation import (
    HyperParams,
    TrainState,
    adam_step,
    cd_loss,
    consistency_loss,
    distill,
    ema_update,
    init_distill_state,
    teacher_ode_step,
    train_teacher,
)
from cmsr.errors import ConfigError, ContractError
from cmsr.samplers import ddim_step
from cmsr.schedule import BoundaryScalings, cd_timesteps

SMALL = UNetConfig(base_channels=4, depth=2, time_embed_dim=8)


def small_model(seed=0, perturb=True):
    model = DenoiserModel.init(SMALL, seed=seed)
    if perturb:
        rng = np.random.default_rng(seed)
        for p in model.params.values():
            p.data = p.data + 0.05 * rng.standard_normal(p.shape)
    return model


@pytest.fixture(scope="module")
def tiny_data():
    return synth_textures(size=8, count=6, seed=0)


def test_hyperparams_defaults_and_table():
    hp = HyperParams()
    assert (hp.lr, hp.loss_type, hp.N, hp.T, hp.batch_size, hp.timestep_scaling, hp.mu) == (1e-4, "huber", 50, 1000, 12, 10.0, 0.95)
    t1 = HyperParams.table1()
    assert (t1.lr, t1.image_size, t1.N, t1.T, t1.batch_size) == (1e-6, 512, 50, 1000, 12)


@pytest.mark.parametrize("kw", [{"loss_type": "l1"}, {"lr": 0}, {"mu": 1.5}, {"N": 1000}, {"lambda_weight": 2.0}])
def test_hyperparams_validation(kw):
    with pytest.raises(ConfigError):
        HyperParams(**kw)


def test_adam_matches_reference_update():
    model = small_model()
    state = TrainState(model, lr=0.01)
    name = "out.b"
    start = model.params[name].data.copy()
    grads = [np.array([0.5, -1.0, 2.0]), np.array([0.1, 0.1, -0.3])]
    m = v = np.zeros(3)
    ref = start.copy()
    for k, g in enumerate(grads, start=1):
        full = {n: np.zeros(p.shape) for n, p in model.params.items()}
        full[name] = g
        adam_step(state, full, 0.01, 0.9, 0.999, 1e-8)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9**k)) / (np.sqrt(v / (1 - 0.999**k)) + 1e-8)
    np.testing.assert_allclose(model.params[name].data, ref, rtol=1e-14)
    assert state.step == 2


def test_ema_update_exact():
    student, target = small_model(1), small_model(2)
    before = {k: p.data.copy() for k, p in target.params.items()}
    state = TrainState(student, target, mu=0.95)
    ema_update(state)
    for k, p in target.params.items():
        np.testing.assert_array_equal(p.data, 0.95 * before[k] + (1 - 0.95) * student.params[k].data)


def test_ema_needs_target():
    with pytest.raises(ContractError):
        ema_update(TrainState(small_model()))


def test_target_branch_gets_no_gradient(schedule, rng):
    teacher = small_model()
    state = init_distill_state(teacher, HyperParams())
    x = rng.standard_normal((2, 3, 8, 8))
    cond = rng.uniform(-1, 1, (2, 3, 2, 2))
    loss = consistency_loss(state, x, 300, x * 0.9, 280, cond, schedule, BoundaryScalings(), HyperParams())
    loss.backward()
    assert all(p.grad is None for p in state.target.params.values())
    assert any(np.any(p.grad) for p in state.student.params.values())


def test_loss_zero_for_identical_branches(schedule, rng):
    state = init_distill_state(small_model(), HyperParams())
    x = rng.standard_normal((2, 3, 8, 8))
    cond = rng.uniform(-1, 1, (2, 3, 2, 2))
    loss = consistency_loss(state, x, 400, x, 400, cond, schedule, BoundaryScalings(), HyperParams())
    assert loss.item() == 0.0


def test_teacher_step_matches_ddim(schedule, rng):
    oracle = GaussianOracle(0.3, 0.2, schedule)
    x = rng.standard_normal(10)
    np.testing.assert_array_equal(teacher_ode_step(oracle, x, 500, 480, None, schedule), ddim_step(x, oracle(x, 500), 500, 480, schedule))
    with pytest.raises(ContractError):
        teacher_ode_step(oracle, x, 500, 500, None, schedule)


def test_cd_loss_index_range(schedule, rng):
    state = init_distill_state(small_model(), HyperParams())
    tmap = cd_timesteps(schedule, 50)
    x0 = rng.uniform(-1, 1, (1, 3, 8, 8))
    cond = x0.reshape(1, 3, 2, 4, 2, 4).mean(axis=(3, 5))
    for n in (0, 50):
        with pytest.raises(ContractError):
            cd_loss(state, x0, cond, n, tmap, schedule, BoundaryScalings(), HyperParams(), state.target, rng=rng)
    loss = cd_loss(state, x0, cond, 1, tmap, schedule, BoundaryScalings(), HyperParams(), state.target, rng=rng)
    assert np.isfinite(loss.item()) and loss.item() >= 0


def test_teacher_training_reduces_loss(schedule, tiny_data):
    model = DenoiserModel.init(SMALL, seed=0)
    hp = HyperParams(lr=3e-3, batch_size=4, image_size=8)
    _, curve = train_teacher(tiny_data, model, schedule, hp, 60, seed=0)
    first, last = np.mean([c[1] for c in curve[:10]]), np.mean([c[1] for c in curve[-10:]])
    assert last < first
    assert [c[0] for c in curve] == list(range(1, 61))


def test_teacher_resume_is_exact(schedule, tiny_data):
    hp = HyperParams(lr=1e-3, batch_size=3, image_size=8)
    full, curve_full = train_teacher(tiny_data, DenoiserModel.init(SMALL, seed=0), schedule, hp, 6, seed=4)
    part, curve_a = train_teacher(tiny_data, DenoiserModel.init(SMALL, seed=0), schedule, hp, 3, seed=4)
    part, curve_b = train_teacher(tiny_data, part.student, schedule, hp, 6, seed=4, state=part)
    assert curve_a + curve_b == curve_full
    for k, p in full.theta.items():
        assert p.data.tobytes() == part.theta[k].data.tobytes()


def test_teacher_ema_tracks_weights(schedule, tiny_data):
    model = DenoiserModel.init(SMALL, seed=0)
    state = TrainState(model, model.copy(requires_grad=False), mu=0.5, lr=1e-3)
    train_teacher(tiny_data, model, schedule, HyperParams(lr=1e-3, batch_size=2, image_size=8), 3, state=state)
    assert any(not np.array_equal(state.target.params[k].data, p.data) for k, p in model.params.items())


def test_distill_resume_is_exact(schedule, tiny_data):
    teacher = small_model(3)
    hp = HyperParams(batch_size=3, image_size=8, N=10, lr=1e-3)
    tmap = cd_timesteps(schedule, hp.N)
    args = (teacher, tiny_data, hp, schedule, tmap, BoundaryScalings())
    full, curve_full = distill(*args, 4, seed=2)
    part, curve_a = distill(*args, 2, seed=2)
    part, curve_b = distill(*args, 4, seed=2, state=part)
    assert curve_a + curve_b == curve_full
    for k in full.theta:
        assert full.theta[k].data.tobytes() == part.theta[k].data.tobytes()
        assert full.theta_minus[k].data.tobytes() == part.theta_minus[k].data.tobytes()


def test_distill_starts_from_teacher(schedule, tiny_data):
    teacher = small_model(3)
    state = init_distill_state(teacher, HyperParams())
    for k, p in teacher.params.items():
        np.testing.assert_array_equal(state.theta[k].data, p.data)
        np.testing.assert_array_equal(state.theta_minus[k].data, p.data)
    assert state.theta[k] is not p
