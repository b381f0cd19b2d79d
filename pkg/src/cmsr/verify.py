"""Finite-difference verification of every differentiable op and of the denoiser."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .denoiser import DenoiserModel, UNetConfig, forward_eps
from .tensor import Tensor, grad_check

GRAD_TOLERANCE = 1e-4


@dataclass
class GradResult:
    name: str
    max_rel_error: float
    coords: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error < GRAD_TOLERANCE


def _away_from(x: np.ndarray, points, margin: float) -> np.ndarray:
    # nudge values off non-differentiable points so central differences stay on one side
    for p in points:
        near = np.abs(x - p) < margin
        x = np.where(near, p + np.sign(x - p + 1e-300) * margin * 2, x)
    return x


def _projected(op: Callable[[Tensor], Tensor], shape_rng) -> Callable[[Tensor], Tensor]:
    """Scalarize ``op`` with a fixed random projection so every output entry matters."""
    cache: dict[tuple, Tensor] = {}

    def f(x: Tensor) -> Tensor:
        y = op(x)
        if y.shape not in cache:
            cache[y.shape] = Tensor(shape_rng.standard_normal(y.shape))
        return tn.sum(tn.mul(y, cache[y.shape]))

    return f


def primitive_checks(seed: int = 0) -> list[tuple[str, Callable[[Tensor], Tensor], Tensor]]:
    rng = np.random.default_rng(seed)

    def r(*shape):
        return rng.standard_normal(shape)

    other = Tensor(r(2, 3, 4, 4))
    bias_c, bias_nc = Tensor(r(3)), Tensor(r(2, 3))
    coeff = rng.uniform(0.5, 1.5, size=2)
    w_lin = Tensor(r(5, 6))
    x_lin = Tensor(r(4, 6))
    kernel = Tensor(r(4, 3, 3, 3))
    x_conv = Tensor(r(2, 3, 6, 6))
    target = Tensor(r(2, 3, 4, 4))
    huber_x = target.data + _away_from(r(2, 3, 4, 4) * 1.5, (-1.0, 1.0), 1e-3)
    clamp_x = _away_from(r(2, 3, 4, 4), (-0.5, 0.5), 1e-3)

    checks = [
        ("add", lambda x: tn.add(x, other), r(2, 3, 4, 4)),
        ("add.scalar", lambda x: tn.add(x, 0.7), r(2, 3, 4, 4)),
        ("sub.lhs", lambda x: tn.sub(x, other), r(2, 3, 4, 4)),
        ("sub.rhs", lambda x: tn.sub(other, x), r(2, 3, 4, 4)),
        ("mul", lambda x: tn.mul(x, other), r(2, 3, 4, 4)),
        ("mul.self", lambda x: tn.mul(x, x), r(2, 3, 4, 4)),
        ("mul.scalar", lambda x: tn.mul(x, -1.3), r(2, 3, 4, 4)),
        ("neg", tn.neg, r(2, 3, 4, 4)),
        ("scale.vector", lambda x: tn.scale(x, coeff), r(2, 3, 4, 4)),
        ("silu", tn.silu, r(2, 3, 4, 4)),
        ("clamp", lambda x: tn.clamp(x, -0.5, 0.5), clamp_x),
        ("add_bias.input", lambda x: tn.add_bias(x, bias_c), r(2, 3, 4, 4)),
        ("add_bias.channel", lambda b: tn.add_bias(other, b), r(3)),
        ("add_bias.per_sample", lambda b: tn.add_bias(other, b), r(2, 3)),
        ("add_bias.per_sample_input", lambda x: tn.add_bias(x, bias_nc), r(2, 3, 4, 4)),
        ("linear.input", lambda x: tn.linear(x, w_lin), r(4, 6)),
        ("linear.weight", lambda w: tn.linear(x_lin, w), r(5, 6)),
        ("concat_channels", lambda x: tn.concat_channels([x, other, tn.mul(x, x)]), r(2, 3, 4, 4)),
        ("upsample_nearest", lambda x: tn.upsample_nearest(x, 2), r(2, 3, 4, 4)),
        ("downsample_average", lambda x: tn.downsample_average(x, 2), r(2, 3, 4, 4)),
        ("huber", lambda x: tn.huber(x, target), huber_x),
        ("huber.scalar_target", lambda x: tn.huber(x, 0.2, delta=0.5), r(2, 3, 4, 4) * 0.3),
        ("mse", lambda x: tn.mse(x, target), r(2, 3, 4, 4)),
        ("sum", tn.sum, r(2, 3, 4, 4)),
        ("mean", tn.mean, r(2, 3, 4, 4)),
    ]
    for stride in (1, 2):
        for padding in (0, 1, 2):
            checks.append(
                (f"conv2d.input.s{stride}p{padding}", lambda x, s=stride, p=padding: tn.conv2d(x, kernel, s, p), x_conv.data)
            )
            checks.append(
                (f"conv2d.kernel.s{stride}p{padding}", lambda k, s=stride, p=padding: tn.conv2d(x_conv, k, s, p), kernel.data)
            )
    return [(name, _projected(op, rng) if name not in ("sum", "mean", "huber", "huber.scalar_target", "mse") else op, Tensor(x)) for name, op, x in checks]


def run_primitive_checks(seed: int = 0) -> list[GradResult]:
    return [GradResult(name, grad_check(f, x), x.size) for name, f, x in primitive_checks(seed)]


def run_model_checks(
    config: UNetConfig | None = None,
    seed: int = 0,
    coords_per_tensor: int = 3,
    image_size: int = 32,
    model: DenoiserModel | None = None,
) -> list[GradResult]:
    """Check every parameter tensor and the noisy input of a full denoiser forward pass.

    A freshly initialized model has a zero output layer, which makes every
    upstream gradient vanish; the output layer is randomized so the check
    exercises the whole network.
    """
    config = config or UNetConfig()
    rng = np.random.default_rng(seed)
    if model is None:
        model = DenoiserModel.init(config, seed=seed, requires_grad=False)
        for name in ("out.w", "out.b"):
            p = model.params[name]
            p.data = rng.standard_normal(p.shape) * 0.1
    size = image_size
    c = config.image_channels
    noisy = rng.standard_normal((1, c, size, size))
    cond = rng.uniform(-1, 1, (1, c, size // 4, size // 4))
    t = np.array([rng.integers(1, 1000)])
    # a summed random projection keeps gradients O(1); subtracting the output at the
    # unperturbed point keeps the loss near 0, so central differences are not roundoff-limited
    proj = Tensor(rng.standard_normal((1, c, size, size)))
    with tn.no_grad():
        ref = Tensor(forward_eps(model, noisy, cond, t).data)
    results = []
    for name, p in model.params.items():
        saved = p.data

        def f(x: Tensor, name=name) -> Tensor:
            params = dict(model.params)
            params[name] = x
            m = DenoiserModel(config, params, model.schedule)
            return tn.sum(tn.mul(tn.sub(forward_eps(m, noisy, cond, t), ref), proj))

        picks = rng.choice(p.size, size=min(coords_per_tensor, p.size), replace=False).tolist()
        results.append(GradResult(f"unet.{name}", grad_check(f, Tensor(saved), coords=picks), len(picks)))

    def g(x: Tensor) -> Tensor:
        return tn.sum(tn.mul(tn.sub(forward_eps(model, x, cond, t), ref), proj))

    picks = rng.choice(noisy.size, size=coords_per_tensor * 4, replace=False).tolist()
    results.append(GradResult("unet.input", grad_check(g, Tensor(noisy), coords=picks), len(picks)))
    return results


def gradient_suite(config: UNetConfig | None = None, seed: int = 0, image_size: int = 32) -> list[GradResult]:
    return run_primitive_checks(seed) + run_model_checks(config, seed, image_size=image_size)
