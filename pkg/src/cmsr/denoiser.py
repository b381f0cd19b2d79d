"""Image-conditioned U-Net noise predictor and the consistency-function wrapper.

The low-resolution condition is nearest-upsampled x4 and concatenated with
the noisy image along channels before entering the U-Net.

Parameter order (stable, also the checkpoint order)::

    temb.w1, temb.b1, temb.w2, temb.b2
    down{l}.conv1.w, down{l}.conv1.b, down{l}.temb.w, down{l}.temb.b,
    down{l}.conv2.w, down{l}.conv2.b                    for l = 0 .. depth-1
    up{l}.conv1.w, up{l}.conv1.b, up{l}.temb.w, up{l}.temb.b,
    up{l}.conv2.w, up{l}.conv2.b                        for l = depth-2 .. 0
    out.w, out.b

The output convolution sees the last decoder features concatenated with the
network input (upsampled condition and noisy image), a long skip that lets
the noise estimate carry a direct linear path from the noisy image.

With ``prior_std > 0`` the U-Net output is a residual on top of the exact
noise estimate for pixels distributed ``N(upsampled condition, prior_std^2)``.
An untrained model then already samples near the nearest-upsampled
condition, and at high noise the estimate stays tied to the condition.
With the default ``prior_std = 0`` the output is the U-Net alone.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ContractError, InvalidShapeError
from .schedule import BoundaryScalings, NoiseSchedule, cm_scalings, linear_beta_schedule
from .tensor import Tensor

UPSCALE = 4


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 6
    base_channels: int = 16
    depth: int = 2
    time_embed_dim: int = 32
    prior_std: float = 0.0

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise ConfigError(f"depth and base_channels must be >= 1: {self}")
        if self.in_channels < 2 or self.in_channels % 2:
            raise ConfigError(f"in_channels must be an even count 2*C, got {self.in_channels}")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigError(f"time_embed_dim must be even, got {self.time_embed_dim}")
        if not self.prior_std >= 0.0:
            raise ConfigError(f"prior_std must be >= 0, got {self.prior_std}")

    @property
    def image_channels(self) -> int:
        return self.in_channels // 2

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def to_dict(self) -> dict:
        return asdict(self)


def time_embedding(t, dim: int) -> Tensor:
    """Interleaved ``[sin(t f_0), cos(t f_0), sin(t f_1), ...]``.

    Frequencies ``f_k = 10000 ** (-k / (dim/2 - 1))`` run geometrically
    from 1 down to 1e-4, i.e. wavelengths span [1, 1e4].
    """
    return Tensor(_embed(np.asarray([t], dtype=np.float64), dim)[0])


def _embed(ts: np.ndarray, dim: int) -> np.ndarray:
    if dim < 2 or dim % 2:
        raise ConfigError(f"time embedding dim must be even, got {dim}")
    if np.any(ts < 0):
        raise ConfigError("timestep must be >= 0")
    half = dim // 2
    k = np.arange(half, dtype=np.float64)
    freqs = 10000.0 ** (-k / (half - 1)) if half > 1 else np.ones(1)
    arg = ts[:, None] * freqs[None, :]
    out = np.empty((ts.shape[0], dim))
    out[:, 0::2] = np.sin(arg)
    out[:, 1::2] = np.cos(arg)
    return out


def parameter_shapes(config: UNetConfig) -> dict[str, tuple[int, ...]]:
    e = config.time_embed_dim
    shapes: dict[str, tuple[int, ...]] = {
        "temb.w1": (e, e),
        "temb.b1": (e,),
        "temb.w2": (e, e),
        "temb.b2": (e,),
    }

    def block(prefix: str, cin: int, cout: int) -> None:
        shapes[f"{prefix}.conv1.w"] = (cout, cin, 3, 3)
        shapes[f"{prefix}.conv1.b"] = (cout,)
        shapes[f"{prefix}.temb.w"] = (cout, e)
        shapes[f"{prefix}.temb.b"] = (cout,)
        shapes[f"{prefix}.conv2.w"] = (cout, cout, 3, 3)
        shapes[f"{prefix}.conv2.b"] = (cout,)

    cin = config.in_channels
    for level in range(config.depth):
        block(f"down{level}", cin, config.channels(level))
        cin = config.channels(level)
    for level in range(config.depth - 2, -1, -1):
        block(f"up{level}", config.channels(level + 1) + config.channels(level), config.channels(level))
    shapes["out.w"] = (config.image_channels, config.base_channels + config.in_channels, 3, 3)
    shapes["out.b"] = (config.image_channels,)
    return shapes


class DenoiserModel:
    """U-Net parameters plus the schedule the condition prior is evaluated on."""

    def __init__(self, config: UNetConfig, params: dict[str, Tensor], schedule: NoiseSchedule | None = None):
        expected = parameter_shapes(config)
        if list(params) != list(expected):
            raise ConfigError(f"parameter names do not match config: {sorted(set(params) ^ set(expected))}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise InvalidShapeError(f"parameter {name}: expected {shape}, got {params[name].shape}")
        self.config = config
        self.params = params
        self.schedule = schedule or linear_beta_schedule()

    @classmethod
    def init(
        cls, config: UNetConfig, seed: int = 0, requires_grad: bool = True, schedule: NoiseSchedule | None = None
    ) -> DenoiserModel:
        """Fan-in uniform weights, zero biases, zero output layer."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in parameter_shapes(config).items():
            if name.startswith("out.") or name.endswith(".b") or name.endswith("b1") or name.endswith("b2"):
                data = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                bound = 1.0 / math.sqrt(fan_in)
                data = rng.uniform(-bound, bound, size=shape)
            params[name] = Tensor(data, requires_grad=requires_grad)
        return cls(config, params, schedule)

    def copy(self, requires_grad: bool | None = None) -> DenoiserModel:
        params = {
            k: Tensor(v.data.copy(), requires_grad=v.requires_grad if requires_grad is None else requires_grad)
            for k, v in self.params.items()
        }
        return DenoiserModel(self.config, params, self.schedule)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in state:
                raise ConfigError(f"missing parameter {name}")
            if state[name].shape != p.shape:
                raise InvalidShapeError(f"parameter {name}: expected {p.shape}, got {state[name].shape}")
            p.data = np.array(state[name], dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def __call__(self, noisy, cond_lowres, t) -> Tensor:
        return forward_eps(self, noisy, cond_lowres, t)


def _timesteps(t, n: int) -> np.ndarray:
    ts = np.asarray(t, dtype=np.float64)
    if ts.ndim == 0:
        ts = np.full(n, float(ts))
    if ts.shape != (n,):
        raise InvalidShapeError(f"expected one timestep or {n}, got shape {ts.shape}")
    return ts


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _batched_condition(cond, noisy: Tensor, channels: int) -> Tensor:
    c = _as_tensor(cond)
    if c.ndim == 3:
        c = Tensor(np.broadcast_to(c.data, (noisy.shape[0],) + c.shape).copy())
    n, ch, h, w = noisy.shape
    if c.ndim != 4 or c.shape[0] != n or c.shape[1] != ch or ch != channels:
        raise InvalidShapeError(f"condition {c.shape} incompatible with noisy input {noisy.shape}")
    if c.shape[2] * UPSCALE != h or c.shape[3] * UPSCALE != w:
        raise InvalidShapeError(
            f"condition spatial extent {c.shape[2:]} must be exactly 1/{UPSCALE} of {noisy.shape[2:]}"
        )
    return c


def _block(p: dict[str, Tensor], prefix: str, h: Tensor, temb: Tensor) -> Tensor:
    h = tn.add_bias(tn.conv2d(h, p[f"{prefix}.conv1.w"], padding=1), p[f"{prefix}.conv1.b"])
    proj = tn.add_bias(tn.linear(temb, p[f"{prefix}.temb.w"]), p[f"{prefix}.temb.b"])
    h = tn.silu(tn.add_bias(h, proj))
    h = tn.add_bias(tn.conv2d(h, p[f"{prefix}.conv2.w"], padding=1), p[f"{prefix}.conv2.b"])
    return tn.silu(h)


def forward_eps(model: DenoiserModel, noisy, cond_lowres, t) -> Tensor:
    """Predict the noise in ``noisy`` (N, C, H, W) given the x4-smaller condition."""
    cfg = model.config
    p = model.params
    x = _as_tensor(noisy)
    if x.ndim != 4:
        raise InvalidShapeError(f"noisy input must be NCHW, got {x.shape}")
    cond = _batched_condition(cond_lowres, x, cfg.image_channels)
    if x.shape[2] % 2 ** (cfg.depth - 1) or x.shape[3] % 2 ** (cfg.depth - 1):
        raise InvalidShapeError(f"image extent {x.shape[2:]} not divisible by 2^{cfg.depth - 1}")
    ts = _timesteps(t, x.shape[0])

    emb = Tensor(_embed(ts, cfg.time_embed_dim))
    emb = tn.silu(tn.add_bias(tn.linear(emb, p["temb.w1"]), p["temb.b1"]))
    emb = tn.add_bias(tn.linear(emb, p["temb.w2"]), p["temb.b2"])

    up = tn.upsample_nearest(cond, UPSCALE)
    inp = tn.concat_channels([up, x])
    h = inp
    skips = []
    for level in range(cfg.depth):
        if level > 0:
            h = tn.downsample_average(h, 2)
        h = _block(p, f"down{level}", h, emb)
        skips.append(h)
    for level in range(cfg.depth - 2, -1, -1):
        h = tn.concat_channels([tn.upsample_nearest(h, 2), skips[level]])
        h = _block(p, f"up{level}", h, emb)
    out = tn.add_bias(tn.conv2d(tn.concat_channels([h, inp]), p["out.w"], padding=1), p["out.b"])
    if cfg.prior_std > 0.0:
        out = tn.add(out, _condition_prior_eps(x, up, ts, cfg.prior_std, model.schedule))
    return out


def _condition_prior_eps(x: Tensor, up: Tensor, ts: np.ndarray, std: float, schedule: NoiseSchedule) -> Tensor:
    # per-pixel Gaussian posterior mean of eps, as in analytic_gaussian_eps with mu0 = up
    ab = schedule.alpha_bar(ts.astype(np.int64))
    coef = np.sqrt(1.0 - ab) / (ab * std * std + 1.0 - ab)
    return tn.scale(tn.sub(x, tn.scale(up, np.sqrt(ab))), coef)


def analytic_gaussian_eps(x_t, t, mu0: float, sigma0: float, schedule: NoiseSchedule):
    """Exact ``E[eps | x_t]`` when every data coordinate is iid ``N(mu0, sigma0^2)``.

    With ``x_t = sqrt(ab) x0 + sqrt(1-ab) eps`` both terms are Gaussian, so
    ``Cov(eps, x_t) = sqrt(1-ab)`` and ``Var(x_t) = ab sigma0^2 + 1 - ab``.
    Accepts and returns either an ndarray or a Tensor.
    """
    if sigma0 <= 0:
        raise ConfigError(f"sigma0 must be positive, got {sigma0}")
    if not 1 <= int(t) <= schedule.T:
        raise ConfigError(f"timestep {t} outside [1, {schedule.T}]")
    ab = schedule.alpha_bar(int(t))
    data = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t, dtype=np.float64)
    eps = math.sqrt(1.0 - ab) * (data - math.sqrt(ab) * mu0) / (ab * sigma0 * sigma0 + 1.0 - ab)
    return Tensor(eps) if isinstance(x_t, Tensor) else eps


class GaussianOracle:
    """Callable ``eps_fn(x, t)`` backed by :func:`analytic_gaussian_eps`."""

    def __init__(self, mu0: float, sigma0: float, schedule: NoiseSchedule):
        self.mu0, self.sigma0, self.schedule = mu0, sigma0, schedule

    def __call__(self, x: np.ndarray, t: int) -> np.ndarray:
        return analytic_gaussian_eps(x, t, self.mu0, self.sigma0, self.schedule)


def consistency_weights(t, schedule: NoiseSchedule, scalings: BoundaryScalings):
    """Blend weights ``(w_skip, w_out)`` summing to 1, at time ``t/T``."""
    c_skip, c_out = cm_scalings(np.asarray(t, dtype=np.float64) / schedule.T, scalings)
    total = c_skip + c_out
    return c_skip / total, c_out / total


def x0_from_eps(x: Tensor, eps: Tensor, t, schedule: NoiseSchedule) -> Tensor:
    ab = np.asarray(schedule.alpha_bar(np.asarray(t)), dtype=np.float64)
    return tn.scale(tn.sub(x, tn.scale(eps, np.sqrt(1.0 - ab))), 1.0 / np.sqrt(ab))


def consistency_forward(
    model: DenoiserModel,
    x,
    cond_lowres,
    t,
    scalings: BoundaryScalings,
    schedule: NoiseSchedule,
) -> Tensor:
    """Consistency function ``f(x, t)``: the identity at ``t = 0``.

    For ``t > 0`` blends ``x`` with the model's clean-image estimate using
    ``c_skip, c_out`` rescaled to sum to one, then clamps to [-1, 1].
    """
    x = _as_tensor(x)
    ts = np.asarray(t)
    if np.all(ts == 0):
        return x
    if np.any(ts <= 0):
        raise ContractError("consistency_forward: mixed zero and positive timesteps in one batch")
    ts = _timesteps(ts, x.shape[0]).astype(np.int64)
    eps = forward_eps(model, x, cond_lowres, ts)
    x0_hat = x0_from_eps(x, eps, ts, schedule)
    w_skip, w_out = consistency_weights(ts, schedule, scalings)
    return tn.clamp(tn.add(tn.scale(x, w_skip), tn.scale(x0_hat, w_out)), -1.0, 1.0)
