"""Forward noising and the three reverse processes (DDPM, DDIM, consistency).

Samplers work on plain ndarrays. The noise predictor is either a
:class:`DenoiserModel` (paired with a low-resolution condition) or any
callable ``eps_fn(x, t) -> ndarray`` such as :class:`GaussianOracle`.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .denoiser import UPSCALE, DenoiserModel, consistency_forward, forward_eps
from .errors import ConfigError, ContractError, InvalidShapeError, NumericError
from .schedule import BoundaryScalings, NoiseSchedule, TimestepMap, cd_timesteps, strided_timesteps
from .tensor import Tensor

EpsFn = Callable[[np.ndarray, int], np.ndarray]


@dataclass
class SamplerRun:
    """Settings and bookkeeping for one sampling call.

    ``nfe`` counts denoiser evaluations and is filled in by the sampler.
    """

    seed: int
    steps: int = 0
    eta: float = 0.0
    clip_denoised: bool = False
    log_trajectory: bool = False
    trajectory_log: list[np.ndarray] | None = field(default=None, repr=False)
    nfe: int = 0

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must be in [0, 1], got {self.eta}")

    def _record(self, x: np.ndarray) -> None:
        if self.log_trajectory:
            if self.trajectory_log is None:
                self.trajectory_log = []
            self.trajectory_log.append(x.copy())


def q_sample(x0, t, eps, schedule: NoiseSchedule):
    """``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``; ``t`` may be one value per sample."""
    x0d = x0.data if isinstance(x0, Tensor) else np.asarray(x0, dtype=np.float64)
    ed = eps.data if isinstance(eps, Tensor) else np.asarray(eps, dtype=np.float64)
    if x0d.shape != ed.shape:
        raise InvalidShapeError(f"q_sample: x0 {x0d.shape} and eps {ed.shape} differ")
    ts = np.asarray(t)
    if np.any(ts < 1) or np.any(ts > schedule.T):
        raise ConfigError(f"q_sample: timestep outside [1, {schedule.T}]")
    ab = np.asarray(schedule.alpha_bar(ts), dtype=np.float64)
    if ab.ndim == 1:
        if ab.shape[0] != x0d.shape[0]:
            raise InvalidShapeError(f"q_sample: {ab.shape[0]} timesteps for batch of {x0d.shape[0]}")
        ab = ab.reshape((-1,) + (1,) * (x0d.ndim - 1))
    out = np.sqrt(ab) * x0d + np.sqrt(1.0 - ab) * ed
    return Tensor(out) if isinstance(x0, Tensor) else out


def model_eps_fn(model: DenoiserModel, cond_lowres) -> EpsFn:
    cond = cond_lowres.data if isinstance(cond_lowres, Tensor) else np.asarray(cond_lowres)

    def eps_fn(x: np.ndarray, t: int) -> np.ndarray:
        with tn.no_grad():
            return forward_eps(model, x, cond, t).data

    return eps_fn


def _resolve(model, cond_lowres, shape) -> tuple[EpsFn, tuple[int, ...]]:
    if isinstance(model, DenoiserModel):
        if cond_lowres is None:
            raise ContractError("a DenoiserModel needs a low-resolution condition")
        cond = np.asarray(cond_lowres.data if isinstance(cond_lowres, Tensor) else cond_lowres)
        if cond.ndim == 3:
            cond = cond[None]
        if shape is None:
            shape = (cond.shape[0], cond.shape[1], cond.shape[2] * UPSCALE, cond.shape[3] * UPSCALE)
        return model_eps_fn(model, cond), tuple(shape)
    if not callable(model):
        raise TypeError("model must be a DenoiserModel or an eps_fn(x, t) callable")
    if shape is None:
        raise ContractError("an explicit output shape is required with an eps_fn")
    return model, tuple(shape)


def _check_finite(x: np.ndarray, t: int) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite sample", step=t)


def ddpm_step(
    x_t: np.ndarray,
    eps: np.ndarray,
    t: int,
    schedule: NoiseSchedule,
    z: np.ndarray | None,
    variance: str = "beta",
) -> np.ndarray:
    """One ancestral step ``x_t -> x_{t-1}``.

    ``variance`` selects sigma_t^2: ``"beta"`` (beta_t) or ``"posterior"``
    (beta_t (1 - ab_{t-1}) / (1 - ab_t)). No noise is added at ``t = 1``.
    """
    beta = schedule.beta(t)
    ab = schedule.alpha_bar(t)
    mean = (x_t - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(1.0 - beta)
    if t == 1 or z is None:
        return mean
    if variance == "beta":
        var = beta
    elif variance == "posterior":
        var = beta * (1.0 - schedule.alpha_bar(t - 1)) / (1.0 - ab)
    else:
        raise ConfigError(f"unknown variance choice {variance!r}")
    return mean + math.sqrt(var) * z


def _per_sample(values, x: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return v.reshape((-1,) + (1,) * (x.ndim - 1)) if v.ndim == 1 else v


def ddim_step(
    x_t: np.ndarray,
    eps: np.ndarray,
    t,
    t_prev,
    schedule: NoiseSchedule,
    eta: float = 0.0,
    z: np.ndarray | None = None,
    clip_denoised: bool = False,
) -> np.ndarray:
    """One DDIM update from ``t`` to ``t_prev < t`` (``t_prev = 0`` is data).

    ``t`` and ``t_prev`` may also be per-sample integer arrays.
    """
    t_arr, prev_arr = np.asarray(t), np.asarray(t_prev)
    if np.any(prev_arr < 0) or np.any(prev_arr >= t_arr):
        raise ContractError(f"DDIM step needs 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    ab = _per_sample(schedule.alpha_bar(t_arr), x_t)
    ab_prev = _per_sample(schedule.alpha_bar(prev_arr), x_t)
    x0_hat = (x_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
    if clip_denoised:
        x0_hat = np.clip(x0_hat, -1.0, 1.0)
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab)) * np.sqrt(1.0 - ab / ab_prev)
    out = np.sqrt(ab_prev) * x0_hat + np.sqrt(np.maximum(0.0, 1.0 - ab_prev - sigma * sigma)) * eps
    if eta > 0.0 and np.any(sigma > 0.0):
        if z is None:
            raise ContractError("eta > 0 requires a noise sample z")
        out = out + sigma * z
    return out


def ddpm_sample(
    model,
    cond_lowres,
    schedule: NoiseSchedule,
    run: SamplerRun,
    shape: Sequence[int] | None = None,
    x_T: np.ndarray | None = None,
) -> np.ndarray:
    """Full ancestral chain ``t = T .. 1`` with sigma_t^2 = beta_t."""
    if run.steps != schedule.T:
        raise ContractError(f"ddpm_sample runs the full chain: steps must be {schedule.T}, got {run.steps}")
    eps_fn, shape = _resolve(model, cond_lowres, shape)
    rng = np.random.default_rng(run.seed)
    x = rng.standard_normal(shape) if x_T is None else np.array(x_T, dtype=np.float64)
    run.nfe = 0
    run._record(x)
    for t in range(schedule.T, 0, -1):
        eps = eps_fn(x, t)
        run.nfe += 1
        z = rng.standard_normal(shape) if t > 1 else None
        x = ddpm_step(x, eps, t, schedule, z)
        _check_finite(x, t)
        run._record(x)
    return x


def _as_tau(schedule: NoiseSchedule, tau, run: SamplerRun) -> tuple[int, ...]:
    if tau is None:
        tau = cd_timesteps(schedule, run.steps)
    elif isinstance(tau, int):
        tau = strided_timesteps(schedule, tau)
    seq = tuple(tau.boundaries if isinstance(tau, TimestepMap) else tau)
    if not seq or seq[-1] != schedule.T or seq[0] < 1 or any(b <= a for a, b in zip(seq, seq[1:])):
        raise ConfigError(f"tau must be strictly increasing within [1, {schedule.T}] and end at T")
    return seq


def ddim_sample(
    model,
    cond_lowres,
    schedule: NoiseSchedule,
    tau,
    run: SamplerRun,
    shape: Sequence[int] | None = None,
    x_T: np.ndarray | None = None,
) -> np.ndarray:
    """DDIM over the sub-sequence ``tau`` (a TimestepMap, explicit list, or int stride).

    ``tau=None`` spaces ``run.steps`` timesteps evenly. ``eta = 0`` is
    deterministic given ``x_T``.
    """
    seq = _as_tau(schedule, tau, run)
    eps_fn, shape = _resolve(model, cond_lowres, shape)
    rng = np.random.default_rng(run.seed)
    x = rng.standard_normal(shape) if x_T is None else np.array(x_T, dtype=np.float64)
    run.nfe = 0
    run._record(x)
    targets = (0,) + seq[:-1]
    for t, t_prev in zip(reversed(seq), reversed(targets)):
        eps = eps_fn(x, t)
        run.nfe += 1
        z = rng.standard_normal(shape) if run.eta > 0.0 and t_prev > 0 else None
        x = ddim_step(x, eps, t, t_prev, schedule, run.eta, z, run.clip_denoised)
        _check_finite(x, t)
        run._record(x)
    return x


def cm_sample(
    model: DenoiserModel,
    cond_lowres,
    schedule: NoiseSchedule,
    scalings: BoundaryScalings,
    step_times: Sequence[int],
    run: SamplerRun,
    x_T: np.ndarray | None = None,
) -> np.ndarray:
    """Few-step consistency sampling: one model call per entry of ``step_times``."""
    times = [int(t) for t in step_times]
    if not times:
        raise ConfigError("cm_sample needs at least one step time")
    if len(times) > 4:
        raise ConfigError(f"cm_sample supports 1 to 4 steps, got {len(times)}")
    if times[0] != schedule.T or any(b >= a for a, b in zip(times, times[1:])) or times[-1] < 1:
        raise ConfigError(f"step_times must start at T={schedule.T} and strictly decrease: {times}")
    _, shape = _resolve(model, cond_lowres, None)
    cond = np.asarray(cond_lowres.data if isinstance(cond_lowres, Tensor) else cond_lowres)
    rng = np.random.default_rng(run.seed)
    x = rng.standard_normal(shape) if x_T is None else np.array(x_T, dtype=np.float64)
    run.nfe = 0
    run._record(x)
    for i, t in enumerate(times):
        if i > 0:
            x = q_sample(x, t, rng.standard_normal(shape), schedule)
        with tn.no_grad():
            x = consistency_forward(model, x, cond, t, scalings, schedule).data
        run.nfe += 1
        _check_finite(x, t)
        run._record(x)
    return x
