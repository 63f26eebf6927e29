"""Dense float64 tensors with reverse-mode differentiation.

Every model quantity is a :class:`Tensor`.  Each primitive computes its value
with numpy and registers a vector-Jacobian product (VJP); ``backward`` walks the
graph in reverse topological order and accumulates gradients.

Also here: the counter-based RNG used everywhere, Gumbel sampling, a central
difference gradient checker and Adam.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LOG_FLOOR = 1e-12
PROB_FLOOR = 1e-7


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """A float64 array plus the bookkeeping needed for backprop.

    ``parents`` and ``vjp`` are only set when at least one input requires a
    gradient; ``vjp(g)`` returns one gradient (or None) per parent.
    """

    __slots__ = ("value", "grad", "requires_grad", "parents", "vjp", "op", "name")
    __array_priority__ = 100

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = ()
        self.vjp = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def numpy(self):
        return self.value

    def item(self):
        return float(self.value.item())

    def detach(self):
        return Tensor(self.value)

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __len__(self):
        return len(self.value)

    # operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(value, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    """Wrap ``value`` as the output of a primitive.

    Other modules use this to register custom primitives (the scan, the ZOH
    gain) with hand-written VJPs.
    """
    out = Tensor(value)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return make_op(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return make_op(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return make_op(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.value / b.value

    def vjp(g):
        ga = g / b.value
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return make_op(out, (a, b), vjp, "div")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if a.ndim > 2 or b.ndim > 2:
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    out = a.value @ b.value

    def vjp(g):
        av, bv = a.value, b.value
        if bv.ndim == 1:
            ga = g[..., None] * bv
            gb = np.einsum("...i,...ij->j", g, av) if av.ndim > 1 else g * av
            return _unbroadcast(ga, a.shape), gb
        if av.ndim == 1:
            ga = bv @ g if bv.ndim == 2 else np.einsum("...ij,...j->i", bv, g)
            gb = np.outer(av, g) if g.ndim == 1 else av[:, None] * g[..., None, :]
            return ga, _unbroadcast(gb, b.shape)
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_op(out, (a, b), vjp, "matmul")


# elementwise unary --------------------------------------------------------

def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.value)
    return make_op(out, (x,), lambda g: (g * out,), "exp")


def log(x, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log with the argument clamped at ``floor``."""
    x = as_tensor(x)
    safe = np.maximum(x.value, floor)
    live = x.value >= floor
    return make_op(np.log(safe), (x,), lambda g: (np.where(live, g / safe, 0.0),), "log")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    out = np.logaddexp(0.0, v)
    sig = 0.5 * (1.0 + np.tanh(0.5 * v))
    return make_op(out, (x,), lambda g: (g * sig,), "softplus")


def sigmoid(x, clamp: bool = True) -> Tensor:
    """Logistic function; outputs clamped to [1e-7, 1 - 1e-7] by default."""
    x = as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    if clamp:
        out = np.clip(s, PROB_FLOOR, 1.0 - PROB_FLOOR)
        live = (s > PROB_FLOOR) & (s < 1.0 - PROB_FLOOR)
    else:
        out, live = s, True
    return make_op(out, (x,), lambda g: (np.where(live, g * s * (1.0 - s), 0.0),), "sigmoid")


def clamp(x, lo=None, hi=None) -> Tensor:
    x = as_tensor(x)
    out = np.clip(x.value, lo, hi)
    live = np.ones(x.shape, dtype=bool)
    if lo is not None:
        live &= x.value >= lo
    if hi is not None:
        live &= x.value <= hi
    return make_op(out, (x,), lambda g: (np.where(live, g, 0.0),), "clamp")


def square(x) -> Tensor:
    x = as_tensor(x)
    return make_op(x.value**2, (x,), lambda g: (2.0 * g * x.value,), "square")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.value)
    return make_op(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


# reductions and shape -------------------------------------------------------

def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_op(out, (x,), vjp, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    """Mean over ``axis``; with axis=-1 on a (T, N, D) tensor this is average pooling."""
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = x.value.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return make_op(out, (x,), vjp, "mean")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return make_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.value, axes)
    inv = None if axes is None else np.argsort(axes)
    return make_op(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def expand_dims(x, axis) -> Tensor:
    x = as_tensor(x)
    return make_op(np.expand_dims(x.value, axis), (x,), lambda g: (g.reshape(x.shape),), "expand_dims")


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.value, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {x.shape} to {tuple(shape)}") from None
    return make_op(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast")


def concat(xs: Sequence, axis=0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return make_op(out, xs, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(xs: Sequence, axis=0) -> Tensor:
    xs = [expand_dims(as_tensor(x), axis) for x in xs]
    return concat(xs, axis=axis)


def index(x, idx) -> Tensor:
    """Basic or integer-array indexing; the VJP scatter-adds into the source."""
    x = as_tensor(x)
    out = x.value[idx]

    def vjp(g):
        full = np.zeros(x.shape)
        np.add.at(full, idx, g)
        return (full,)

    return make_op(out, (x,), vjp, "index")


def take_rows(x, rows) -> Tensor:
    """Gather ``x[rows]`` along axis 0."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.intp)
    out = x.value[rows]

    def vjp(g):
        full = np.zeros(x.shape)
        np.add.at(full, rows, g)
        return (full,)

    return make_op(out, (x,), vjp, "take_rows")


def segment_sum(x, segments, num_segments) -> Tensor:
    """Sum rows of ``x`` that share a segment id; the adjoint of ``take_rows``."""
    x = as_tensor(x)
    segments = np.asarray(segments, dtype=np.intp)
    out = np.zeros((num_segments,) + x.shape[1:])
    np.add.at(out, segments, x.value)
    return make_op(out, (x,), lambda g: (g[segments],), "segment_sum")


def where(mask, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.value, b.value)
    return make_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape), _unbroadcast(np.where(mask, 0.0, g), b.shape)),
        "where",
    )


def log_softmax(x, axis=-1) -> Tensor:
    """Stable log-softmax; the max shift is a constant and cancels exactly."""
    x = as_tensor(x)
    shift = Tensor(x.value.max(axis=axis, keepdims=True))
    z = x - shift
    return z - log(exp(z).sum(axis=axis, keepdims=True))


def softmax(x, axis=-1) -> Tensor:
    return exp(log_softmax(x, axis))


# backward -------------------------------------------------------------------

def _toposort(root: Tensor):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Tensor, grad=None):
    """Populate ``.grad`` on every tensor upstream of ``root`` that requires it."""
    if not root.requires_grad:
        raise ValueError("backward called on a tensor that does not require grad")
    if grad is None:
        if root.size != 1:
            raise ShapeError(f"backward: implicit gradient needs a scalar, got shape {root.shape}")
        grad = np.ones(root.shape)
    grads = {id(root): np.asarray(grad, dtype=np.float64)}
    for node in reversed(_toposort(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Sequence[Tensor]):
    for p in params:
        p.grad = None


# gradient checking ------------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-6, floor: float = 1e-8) -> float:
    """Max over coordinates of |analytic - central difference| / max(|analytic|, floor)."""
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(as_tensor(x).value, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    out.backward()
    analytic = np.zeros_like(base) if probe.grad is None else probe.grad
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        vals = []
        for sign in (1.0, -1.0):
            shifted = flat.copy()
            shifted[i] += sign * h
            v = f(Tensor(shifted.reshape(base.shape))).value
            if not np.all(np.isfinite(v)):
                raise NonFiniteError(f"f is non-finite at coordinate {tuple(int(j) for j in np.unravel_index(i, base.shape))}")
            vals.append(float(np.sum(v)))
        numeric.reshape(-1)[i] = (vals[0] - vals[1]) / (2.0 * h)
    err = np.abs(analytic - numeric) / np.maximum(np.abs(analytic), floor)
    return float(err.max()) if err.size else 0.0


def param_group_errors(
    loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6, floor: float = 1e-8, scale: str = "elementwise"
) -> dict:
    """Per-tensor relative error of the analytic gradient vs central differences.

    ``scale="elementwise"`` divides each coordinate's error by its own gradient
    magnitude; ``scale="group"`` divides the largest error by the largest
    gradient magnitude in the tensor, which tolerates coordinates whose true
    gradient sits below the finite-difference noise floor.
    ``loss_fn`` is re-evaluated with each parameter coordinate probed in place.
    """
    if scale not in ("elementwise", "group"):
        raise ValueError(f"scale must be 'elementwise' or 'group', got {scale!r}")
    zero_grad(params)
    loss_fn().backward()
    out = {}
    for k, p in enumerate(params):
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        flat = p.value.reshape(-1)
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NonFiniteError(f"loss non-finite probing {p.name}[{i}]")
            numeric[i] = (up - down) / (2.0 * h)
        a = analytic.reshape(-1)
        if scale == "group":
            err = np.abs(a - numeric).max(initial=0.0) / max(np.abs(a).max(initial=0.0), floor)
        else:
            err = (np.abs(a - numeric) / np.maximum(np.abs(a), floor)).max(initial=0.0)
        out[p.name or f"param{k}"] = float(err)
    zero_grad(params)
    return out


def param_group_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6, floor: float = 1e-8) -> float:
    """Worst error of ``param_group_errors`` over all tensors."""
    errs = param_group_errors(loss_fn, params, h, floor)
    return max(errs.values(), default=0.0)


# random numbers -----------------------------------------------------------------

class Rng:
    """Counter-based (Philox) generator; ``child(*keys)`` derives independent streams.

    Streams are a pure function of (seed, keys), so work split across
    snapshots or processes draws the same numbers regardless of order.
    """

    def __init__(self, seed: int, keys: tuple = ()):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.keys)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *keys) -> "Rng":
        return Rng(self.seed, self.keys + tuple(keys))

    @property
    def counter(self):
        return self.gen.bit_generator.state["state"]["counter"]

    def uniform(self, size=None, low=0.0, high=1.0):
        return self.gen.uniform(low, high, size)

    def normal(self, size=None, loc=0.0, scale=1.0):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def random(self, size=None):
        return self.gen.random(size)

    def gumbel(self, size=None):
        return gumbel_transform(self.gen.random(size))


_U_EPS = 1e-12


def gumbel_transform(u):
    u = np.clip(u, _U_EPS, 1.0 - _U_EPS)
    return -np.log(-np.log(u))


def gumbel_sample(rng: Rng, size=None):
    """g = -log(-log u), u ~ U(0, 1) clamped away from {0, 1}."""
    return rng.gumbel(size)


# Adam -------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState, lr=1e-2, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update, in place on ``params`` (numpy arrays).

    Raises before touching anything if a gradient is non-finite.
    """
    if len(params) != len(grads):
        raise ShapeError(f"adam: {len(params)} params but {len(grads)} grads")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"adam: param {i} shape {p.shape} vs grad {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"adam: non-finite gradient for param {i}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


class Adam:
    def __init__(self, params: Sequence[Tensor], lr=1e-2, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = AdamState()

    def step(self):
        grads = [np.zeros(p.shape) if p.grad is None else p.grad for p in self.params]
        adam_step([p.value for p in self.params], grads, self.state, self.lr, self.betas, self.eps)

    def zero_grad(self):
        zero_grad(self.params)
