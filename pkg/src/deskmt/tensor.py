"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every operation returns a :class:`Tensor`. When any input requires a
gradient (and recording is enabled), the output keeps a reference to its
inputs plus a closure that maps the output adjoint to input adjoints.
:meth:`Tensor.backward` replays those closures in reverse topological order.

Ops are deliberately coarse (fused layer norm, fused label-smoothed NLL)
because the per-op Python overhead dominates at the model sizes used here.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-12

_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def default_dtype():
    return _get("dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    old = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = old


def grad_enabled() -> bool:
    return _get("grad", True)


@contextlib.contextmanager
def no_grad():
    old = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = old


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    pass


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: non-finite values in output")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or default_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without an explicit grad needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        # intermediate adjoints live only for the duration of this call
        adj: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = adj.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accum(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adj:
                    adj[key] = adj[key] + pg
                else:
                    adj[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * a.data.dtype.type(c),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = _check_finite(np.exp(a.data), "exp")
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log with inputs clamped below at ``floor``.

    The clamp has zero gradient where it is active.
    """
    clamped = np.maximum(a.data, floor)
    out = np.log(clamped)

    def backward(g):
        return (np.where(a.data > floor, g / clamped, 0.0).astype(a.data.dtype),)

    return _make(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    if not train or p <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = (rng.random(a.shape, dtype=np.float32) >= p).astype(a.data.dtype) / a.data.dtype.type(1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------- reductions / shape


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != (b.shape[-2] if b.ndim > 1 else b.shape[0]):
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")
    flat = a.ndim > 2 and b.ndim == 2
    if flat:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if flat:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding: id out of range for table of {weight.shape[0]} rows")
    out = weight.data[ids]

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make(out, (weight,), backward)


# ---------------------------------------------------------------- normalisers


def _check_tau(tau: float):
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def _stable_softmax(z: np.ndarray, tau: float, axis: int) -> np.ndarray:
    s = z / z.dtype.type(tau)
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_t(z, tau: float = 1.0, axis: int = -1) -> Tensor:
    """Temperature softmax ``exp(z_k/tau) / sum_i exp(z_i/tau)`` along ``axis``."""
    _check_tau(tau)
    z = as_tensor(z)
    p = _check_finite(_stable_softmax(z.data, tau, axis), "softmax_t")

    def backward(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - inner) / p.dtype.type(tau),)

    return _make(p, (z,), backward)


def log_softmax_t(z, tau: float = 1.0, axis: int = -1) -> Tensor:
    _check_tau(tau)
    z = as_tensor(z)
    s = z.data / z.data.dtype.type(tau)
    s = s - s.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(s).sum(axis=axis, keepdims=True))
    out = _check_finite(s - lse, "log_softmax_t")

    def backward(g):
        p = np.exp(out)
        return ((g - p * g.sum(axis=axis, keepdims=True)) / out.dtype.type(tau),)

    return _make(out, (z,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last axis {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    if eps == 0 and np.any(var == 0):
        raise NonFiniteError("layer_norm: zero variance with eps=0")
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, n).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, n).sum(axis=0)
        if x.requires_grad:
            gh = g * gain.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(out, (x, gain, bias), backward)


# ---------------------------------------------------------------- losses


def cross_entropy_nll(probs, target_id: int, smoothing: float = 0.0, diagnostics: dict | None = None) -> float:
    """Label-smoothed NLL of one target under a probability vector.

    ``-(1-eps) log p[target] - eps * mean_{k != target} log p[k]``, with every
    log floored at 1e-12. A floored target probability is recorded under
    ``diagnostics["clamped"]`` when a dict is passed.
    """
    p = np.asarray(probs, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-5:
        raise ValueError("cross_entropy_nll: probabilities do not sum to 1")
    if not 0 <= target_id < p.size:
        raise IndexError(f"target id {target_id} outside vocabulary of size {p.size}")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must lie in [0, 1)")
    logp = np.log(np.maximum(p, LOG_FLOOR))
    if diagnostics is not None and p[target_id] < LOG_FLOOR:
        diagnostics["clamped"] = diagnostics.get("clamped", 0) + 1
    loss = -(1.0 - smoothing) * logp[target_id]
    if smoothing > 0 and p.size > 1:
        others = np.delete(logp, target_id)
        loss -= smoothing * others.mean()
    return float(loss)


def smoothed_nll(logp: Tensor, targets: np.ndarray, mask: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """Batched form of :func:`cross_entropy_nll` over log-probabilities.

    Sums over unmasked positions and divides by their count. Returns 0 when
    every position is masked.
    """
    v = logp.shape[-1]
    flat = logp.data.reshape(-1, v)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    m = np.asarray(mask, dtype=bool).reshape(-1)
    count = max(int(m.sum()), 1)
    dt = flat.dtype.type
    rows = np.arange(t.size)
    tgt_lp = flat[rows, t]
    per_tok = -(1.0 - smoothing) * tgt_lp
    if smoothing > 0 and v > 1:
        other_mean = (flat.sum(axis=1) - tgt_lp) / (v - 1)
        per_tok = per_tok - smoothing * other_mean
    out = np.asarray(dt((per_tok * m).sum() / count))

    def backward(g):
        gl = np.zeros_like(flat)
        w = m.astype(flat.dtype) * (g / count)
        if smoothing > 0 and v > 1:
            gl -= (smoothing / (v - 1)) * w[:, None]
            gl[rows, t] += (smoothing / (v - 1)) * w
        gl[rows, t] -= (1.0 - smoothing) * w
        return (gl.reshape(logp.shape),)

    return _make(out, (logp,), backward)


# ---------------------------------------------------------------- verification


def grad_check(f: Callable[..., Tensor], inputs: Iterable[np.ndarray], step: float = 1e-5,
               floor: float = 1e-6) -> float:
    """Max element-wise relative error between reverse-mode and central-difference gradients.

    ``f`` receives one Tensor per input and must return a scalar Tensor. The
    relative error of an element is ``|a - n| / max(|a| + |n|, floor)``; the
    floor keeps entries whose true gradient is ~0 from reporting noise.
    Returns ``inf`` if any evaluation is non-finite.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    with precision(np.float64):
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        try:
            out = f(*leaves)
        except NonFiniteError:
            return float("inf")
        out.backward()
        worst = 0.0
        for i, a in enumerate(arrays):
            analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(a)
            numeric = np.zeros_like(a)
            flat = a.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                with no_grad():
                    fp = f(*[Tensor(x) for x in arrays]).item()
                flat[j] = orig - step
                with no_grad():
                    fm = f(*[Tensor(x) for x in arrays]).item()
                flat[j] = orig
                numeric.reshape(-1)[j] = (fp - fm) / (2 * step)
            if not (np.isfinite(analytic).all() and np.isfinite(numeric).all()):
                return float("inf")
            denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
            worst = max(worst, float((np.abs(analytic - numeric) / denom).max(initial=0.0)))
    return worst
