"""Dense float64 tensors with reverse-mode automatic differentiation.

Only two broadcasting forms exist: tensor-vs-scalar and equal shapes.
Per-channel biases and per-sample coefficients have dedicated ops
(:func:`add_bias`, :func:`scale`) with their own adjoints, so every
gradient rule in this file can be read in isolation.

Layout is row-major NCHW throughout.
"""

from __future__ import annotations

import contextlib
from collections.abc import Callable, Iterator, Sequence
from typing import Union

import numpy as np

from .errors import ContractError, InvalidShapeError, NumericError

Scalar = Union[int, float]
Operand = Union["Tensor", int, float]

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other: Operand) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Operand) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Operand) -> Tensor:
        return add(neg(self), other)

    def __mul__(self, other: Operand) -> Tensor:
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return neg(self)


def _result(
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str,
) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out.op = op
    return out


def _as_scalar(value: Operand) -> float | None:
    if isinstance(value, Tensor):
        return None
    if isinstance(value, (int, float, np.floating, np.integer)):
        return float(value)
    raise TypeError(f"unsupported operand type {type(value).__name__}")


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise InvalidShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only the 0-d scalar tensor case ever needs reducing
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Operand) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        return _result(a.data + s, (a,), lambda g: (g,), "add")
    _check_same(a, b, "add")
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)),
        "add",
    )


def sub(a: Tensor, b: Operand) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        return _result(a.data - s, (a,), lambda g: (g,), "sub")
    _check_same(a, b, "sub")
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)),
        "sub",
    )


def mul(a: Tensor, b: Operand) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        return _result(a.data * s, (a,), lambda g: (g * s,), "mul")
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)),
        "mul",
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, coeff) -> Tensor:
    """Multiply by a constant: a float, or one value per leading-axis entry.

    The coefficient is not differentiated.
    """
    c = np.asarray(coeff, dtype=np.float64)
    if c.ndim == 0:
        cb = float(c)
    elif c.ndim == 1 and a.ndim >= 1 and c.shape[0] == a.shape[0]:
        cb = c.reshape((-1,) + (1,) * (a.ndim - 1))
    else:
        raise InvalidShapeError(f"scale: coefficient shape {c.shape} does not fit tensor {a.shape}")
    return _result(a.data * cb, (a,), lambda g: (g * cb,), "scale")


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    return _result(x * sig, (a,), lambda g: (g * sig * (1.0 + x * (1.0 - sig)),), "silu")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    mask = (x >= lo) & (x <= hi)
    return _result(np.clip(x, lo, hi), (a,), lambda g: (g * mask,), "clamp")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.size
    return _result(
        np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),), "mean"
    )


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    """Add ``bias`` of shape (C,) or (N, C) along axis 1 of ``a`` (N, C, ...)."""
    if a.ndim < 2 or bias.shape not in ((a.shape[1],), a.shape[:2]):
        raise InvalidShapeError(f"add_bias: bias {bias.shape} does not fit tensor {a.shape}")
    extra = (1,) * (a.ndim - 2)
    b = bias.data.reshape((1, -1) + extra) if bias.ndim == 1 else bias.data.reshape(bias.shape + extra)
    axes = tuple(range(2, a.ndim))

    def back(g):
        gb = g.sum(axis=axes) if axes else g
        return g, (gb.sum(axis=0) if bias.ndim == 1 else gb)

    return _result(a.data + b, (a, bias), back, "add_bias")


def linear(x: Tensor, weight: Tensor) -> Tensor:
    """``x @ weight.T`` for x (N, D) and weight (O, D)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise InvalidShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    return _result(xd @ wd.T, (x, weight), lambda g: (g @ wd, g.T @ xd), "linear")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise InvalidShapeError("concat_channels: nothing to concatenate")
    ref = tensors[0].shape
    for t in tensors:
        if t.ndim != len(ref) or t.ndim < 2 or t.shape[:1] + t.shape[2:] != ref[:1] + ref[2:]:
            raise InvalidShapeError(f"concat_channels: incompatible shapes {ref} and {t.shape}")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=1),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=1)),
        "concat",
    )


def _blocks(x: np.ndarray, factor: int, op: str) -> np.ndarray:
    *lead, h, w = x.shape
    if factor < 1 or h % factor or w % factor:
        raise InvalidShapeError(f"{op}: spatial extent {(h, w)} not divisible by factor {factor}")
    return x.reshape(*lead, h // factor, factor, w // factor, factor)


def upsample_nearest(a: Tensor, factor: int) -> Tensor:
    """Replicate every pixel into a factor x factor block (last two axes)."""
    if factor < 1 or a.ndim < 2:
        raise InvalidShapeError(f"upsample_nearest: bad factor {factor} for shape {a.shape}")
    out = np.repeat(np.repeat(a.data, factor, axis=-2), factor, axis=-1)
    return _result(out, (a,), lambda g: (_blocks(g, factor, "upsample").sum(axis=(-3, -1)),), "upsample")


def downsample_average(a: Tensor, factor: int) -> Tensor:
    """Average non-overlapping factor x factor blocks (last two axes)."""
    out = _blocks(a.data, factor, "downsample_average").mean(axis=(-3, -1))
    inv = 1.0 / (factor * factor)

    def back(g):
        return (np.repeat(np.repeat(g * inv, factor, axis=-2), factor, axis=-1),)

    return _result(out, (a,), back, "downsample")


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # rows ordered (C, K, K), columns ordered (N, Ho, Wo)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(xp.shape[1] * k * k, -1)


def _correlate(xp: np.ndarray, w: np.ndarray, stride: int, ho: int, wo: int) -> tuple[np.ndarray, np.ndarray]:
    o, _, k, _ = w.shape
    cols = _im2col(xp, k, stride, ho, wo)
    out = (w.reshape(o, -1) @ cols).reshape(o, xp.shape[0], ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, input (N, C, H, W), kernel (O, C, K, K)."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1] or kernel.shape[2] != kernel.shape[3]:
        raise InvalidShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise InvalidShapeError(f"conv2d: invalid stride {stride} / padding {padding}")
    n, c, h, w = x.shape
    o, _, k, _ = kernel.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise InvalidShapeError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape}")
    xp = _pad(x.data, padding)
    wd = kernel.data
    out, cols = _correlate(xp, wd, stride, ho, wo)

    def back(g):
        g_t = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        gk = (g_t @ cols.T).reshape(wd.shape)
        if stride == 1 and padding <= k - 1:
            # input adjoint of a unit-stride correlation is a full correlation
            # with the flipped, channel-swapped kernel
            flipped = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx, _ = _correlate(_pad(g, k - 1 - padding), flipped, 1, h, w)
            return gx, gk
        gcols = (wd.reshape(o, -1).T @ g_t).reshape(c, k, k, n, ho, wo)
        gxp = np.zeros((c, n) + xp.shape[2:])
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
        gx = gxp[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3)
        return np.ascontiguousarray(gx), gk

    return _result(out, (x, kernel), back, "conv2d")


# ---------------------------------------------------------------- losses


def huber(pred: Tensor, target: Operand, delta: float = 1.0) -> Tensor:
    """Mean per-element Huber loss."""
    tgt = target.data if isinstance(target, Tensor) else target
    r = pred.data - tgt
    if isinstance(target, Tensor):
        _check_same(pred, target, "huber")
    a = np.abs(r)
    quad = a <= delta
    val = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta)).mean()
    n = r.size
    dr = np.clip(r, -delta, delta) / n

    def back(g):
        gr = dr * float(g)
        return (gr, -gr) if isinstance(target, Tensor) else (gr,)

    parents = (pred, target) if isinstance(target, Tensor) else (pred,)
    return _result(np.asarray(val), parents, back, "huber")


def mse(pred: Tensor, target: Operand) -> Tensor:
    """Mean squared error."""
    tgt = target.data if isinstance(target, Tensor) else target
    if isinstance(target, Tensor):
        _check_same(pred, target, "mse")
    r = pred.data - tgt
    dr = 2.0 * r / r.size

    def back(g):
        gr = dr * float(g)
        return (gr, -gr) if isinstance(target, Tensor) else (gr,)

    parents = (pred, target) if isinstance(target, Tensor) else (pred,)
    return _result(np.asarray((r * r).mean()), parents, back, "mse")


# ---------------------------------------------------------------- backward


def build_tape(loss: Tensor) -> list[Tensor]:
    """Topologically ordered tape of every tracked node reachable from ``loss``.

    Inputs precede outputs, so replaying adjoints walks the list backwards.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward called on a tensor that does not require grad")
    tape = build_tape(loss)
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape):
        g = adjoints.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            adjoints[key] = adjoints[key] + pg if key in adjoints else pg


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    Error per coordinate is ``|a - n| / max(1e-12, |a| + |n|)``. ``coords``
    restricts the comparison to a subset of flat indices.
    """
    if step <= 0:
        raise ContractError("grad_check step must be positive")
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("grad_check: non-finite function value")
    backward(out)
    analytic = np.zeros(x.shape) if probe.grad is None else probe.grad
    flat = probe.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = f(probe).item()
            flat[i] = orig - step
            fm = f(probe).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"grad_check: non-finite value perturbing coordinate {i}")
            num = (fp - fm) / (2.0 * step)
            ana = analytic.reshape(-1)[i]
            worst = max(worst, abs(ana - num) / max(1e-12, abs(ana) + abs(num)))
    return worst
