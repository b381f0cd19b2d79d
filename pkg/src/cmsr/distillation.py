"""Teacher training on the noise-prediction objective and consistency distillation.

Both loops draw every random quantity of step ``k`` from
``default_rng([seed, k])``, so a run resumed from a step-``k`` checkpoint
continues exactly like an uninterrupted one.
"""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tn
from .denoiser import DenoiserModel, consistency_forward, forward_eps
from .errors import ConfigError, ContractError, NumericError
from .samplers import ddim_step, q_sample
from .schedule import BoundaryScalings, NoiseSchedule, TimestepMap
from .tensor import Tensor

LossCurve = list[tuple[int, float]]


@dataclass
class HyperParams:
    lr: float = 1e-4
    loss_type: str = "huber"
    N: int = 50
    T: int = 1000
    batch_size: int = 12
    image_size: int = 32
    timestep_scaling: float = 10.0
    huber_delta: float = 1.0
    mu: float = 0.95
    lambda_weight: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.loss_type not in ("huber", "mse"):
            raise ConfigError(f"loss_type must be 'huber' or 'mse', got {self.loss_type!r}")
        for name in ("lr", "N", "T", "batch_size", "image_size", "timestep_scaling", "huber_delta", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigError(f"mu must be in [0, 1], got {self.mu}")
        if self.lambda_weight != 1.0:
            raise ConfigError("lambda_weight is fixed at 1")
        if not self.N < self.T:
            raise ConfigError(f"need N < T, got N={self.N}, T={self.T}")

    @classmethod
    def table1(cls) -> HyperParams:
        """The published full-scale settings (512x512 fine-tuning)."""
        return cls(lr=1e-6, loss_type="huber", N=50, T=1000, batch_size=12, image_size=512, timestep_scaling=10.0)

    def to_dict(self) -> dict:
        return asdict(self)


class TrainState:
    """Trainable parameters, optional EMA target, Adam moments and step counter."""

    def __init__(
        self,
        student: DenoiserModel,
        target: DenoiserModel | None = None,
        mu: float = 0.95,
        lr: float = 1e-4,
        step: int = 0,
    ):
        self.student = student
        self.target = target
        self.mu = mu
        self.lr = lr
        self.step = step
        self.opt_m = {k: np.zeros(p.shape) for k, p in student.params.items()}
        self.opt_v = {k: np.zeros(p.shape) for k, p in student.params.items()}
        if target is not None:
            if {k: p.shape for k, p in target.params.items()} != {k: p.shape for k, p in student.params.items()}:
                raise ConfigError("student and target parameter sets differ")
            for p in target.params.values():
                p.requires_grad = False

    @property
    def theta(self) -> dict[str, Tensor]:
        return self.student.params

    @property
    def theta_minus(self) -> dict[str, Tensor] | None:
        return None if self.target is None else self.target.params


def adam_step(
    state: TrainState,
    grads: dict[str, np.ndarray | None],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps_hat: float = 1e-8,
) -> None:
    """Bias-corrected Adam on ``state.theta``; advances ``state.step``."""
    state.step += 1
    k = state.step
    c1 = 1.0 - beta1**k
    c2 = 1.0 - beta2**k
    for name, p in state.theta.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        m = state.opt_m[name] = beta1 * state.opt_m[name] + (1.0 - beta1) * g
        v = state.opt_v[name] = beta2 * state.opt_v[name] + (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps_hat)


def ema_update(state: TrainState) -> None:
    """``theta_minus <- mu * theta_minus + (1 - mu) * theta``, never tracked."""
    if state.target is None:
        raise ContractError("ema_update needs a target network")
    mu = state.mu
    for name, p in state.theta.items():
        tgt = state.target.params[name]
        tgt.data = mu * tgt.data + (1.0 - mu) * p.data


def _distance(a: Tensor, b: Tensor, hp: HyperParams) -> Tensor:
    if hp.loss_type == "huber":
        return tn.huber(a, b, hp.huber_delta)
    return tn.mse(a, b)


def _batch(data, step: int, seed: int, batch_size: int):
    rng = np.random.default_rng([seed, step])
    idx = rng.integers(0, len(data.pixels), size=batch_size)
    return rng, data.pixels[idx], data.lowres[idx]


def train_teacher(
    dataset,
    model: DenoiserModel,
    schedule: NoiseSchedule,
    hp: HyperParams,
    steps: int,
    seed: int = 0,
    state: TrainState | None = None,
    callback: Callable[[TrainState, float], None] | None = None,
) -> tuple[TrainState, LossCurve]:
    """Minimize ``||eps - eps_theta(q_sample(x0, t, eps), cond, t)||^2`` with Adam.

    The loss is the per-element mean. ``state`` resumes a previous run; the
    loop stops when ``state.step`` reaches ``steps``. If the state carries a
    target model it is kept as an EMA of the trained weights.
    """
    state = state or TrainState(model, lr=hp.lr)
    curve: LossCurve = []
    while state.step < steps:
        rng, x0, cond = _batch(dataset, state.step, seed, hp.batch_size)
        t = rng.integers(1, schedule.T + 1, size=hp.batch_size)
        eps = rng.standard_normal(x0.shape)
        x_t = q_sample(x0, t, eps, schedule)
        state.student.zero_grad()
        loss = tn.mse(forward_eps(state.student, x_t, cond, t), Tensor(eps))
        if not math.isfinite(loss.item()):
            raise NumericError("non-finite teacher loss", step=state.step)
        loss.backward()
        adam_step(state, {k: p.grad for k, p in state.theta.items()}, state.lr, hp.beta1, hp.beta2, hp.adam_eps)
        if state.target is not None:
            ema_update(state)
        curve.append((state.step, loss.item()))
        if callback is not None:
            callback(state, loss.item())
    return state, curve


def teacher_ode_step(teacher, x_next: np.ndarray, t_next, t_cur, cond, schedule: NoiseSchedule) -> np.ndarray:
    """One deterministic DDIM step from ``t_next`` down to ``t_cur`` with the frozen teacher.

    ``teacher`` is a DenoiserModel or an ``eps_fn(x, t)`` callable.
    """
    if np.any(np.asarray(t_cur) >= np.asarray(t_next)):
        raise ContractError(f"teacher step needs t_cur < t_next, got {t_cur} and {t_next}")
    if isinstance(teacher, DenoiserModel):
        with tn.no_grad():
            eps = forward_eps(teacher, x_next, cond, t_next).data
    else:
        eps = teacher(x_next, t_next)
    return ddim_step(x_next, eps, t_next, t_cur, schedule, eta=0.0)


def consistency_loss(
    state: TrainState,
    x_a: np.ndarray,
    t_a,
    x_b: np.ndarray,
    t_b,
    cond,
    schedule: NoiseSchedule,
    scalings: BoundaryScalings,
    hp: HyperParams,
) -> Tensor:
    """``d(f_theta(x_a, t_a), stopgrad f_theta_minus(x_b, t_b))``, averaged over elements."""
    online = consistency_forward(state.student, x_a, cond, t_a, scalings, schedule)
    with tn.no_grad():
        target = consistency_forward(state.target, x_b, cond, t_b, scalings, schedule)
    return tn.scale(_distance(online, target.detach(), hp), hp.lambda_weight)


def cd_loss(
    state: TrainState,
    x0: np.ndarray,
    cond,
    n,
    tmap: TimestepMap,
    schedule: NoiseSchedule,
    scalings: BoundaryScalings,
    hp: HyperParams,
    teacher,
    eps: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Consistency-distillation loss for the adjacent pair ``(t_n, t_{n+1})``.

    ``n`` is 1-based in ``[1, N-1]``, either one value or one per sample.
    """
    n_arr = np.asarray(n)
    if np.any(n_arr < 1) or np.any(n_arr > tmap.N - 1):
        raise ContractError(f"n must lie in [1, {tmap.N - 1}], got {n}")
    bounds = np.asarray(tmap.boundaries)
    t_next = bounds[n_arr]
    t_cur = bounds[n_arr - 1]
    if eps is None:
        eps = (rng or np.random.default_rng()).standard_normal(x0.shape)
    x_next = q_sample(x0, t_next, eps, schedule)
    x_cur = teacher_ode_step(teacher, x_next, t_next, t_cur, cond, schedule)
    return consistency_loss(state, x_next, t_next, x_cur, t_cur, cond, schedule, scalings, hp)


def init_distill_state(teacher: DenoiserModel, hp: HyperParams) -> TrainState:
    """Student and EMA target both start as copies of the teacher."""
    return TrainState(teacher.copy(requires_grad=True), teacher.copy(requires_grad=False), mu=hp.mu, lr=hp.lr)


def distill(
    teacher: DenoiserModel,
    dataset,
    hp: HyperParams,
    schedule: NoiseSchedule,
    tmap: TimestepMap,
    scalings: BoundaryScalings,
    steps: int,
    seed: int = 0,
    state: TrainState | None = None,
    callback: Callable[[TrainState, float], None] | None = None,
) -> tuple[TrainState, LossCurve]:
    """Consistency distillation with a fixed step budget.

    Each step samples a batch and one ``n ~ U{1..N-1}`` per sample, takes
    an Adam step on the student and then an EMA step on the target.
    """
    state = state or init_distill_state(teacher, hp)
    curve: LossCurve = []
    while state.step < steps:
        rng, x0, cond = _batch(dataset, state.step, seed, hp.batch_size)
        n = rng.integers(1, tmap.N, size=hp.batch_size)
        eps = rng.standard_normal(x0.shape)
        state.student.zero_grad()
        loss = cd_loss(state, x0, cond, n, tmap, schedule, scalings, hp, teacher, eps=eps)
        if not math.isfinite(loss.item()):
            raise NumericError(f"non-finite distillation loss (n={n.tolist()})", step=state.step)
        loss.backward()
        adam_step(state, {k: p.grad for k, p in state.theta.items()}, state.lr, hp.beta1, hp.beta2, hp.adam_eps)
        ema_update(state)
        curve.append((state.step, loss.item()))
        if callback is not None:
            callback(state, loss.item())
    return state, curve
