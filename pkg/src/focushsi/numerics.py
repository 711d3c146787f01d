"""Dense float64 tensors with a small tape-based reverse mode.

Only the operations needed by the FOCUS forward pass are provided. A tape is
active only inside :func:`record`; everywhere else operations compute plain
values and allocate no graph nodes. :func:`differentiation_disabled` turns any
attempt to open a tape into an error, which is how the explain path proves it
is gradient-free.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "DifferentiationDisabledError",
    "record",
    "differentiation_disabled",
    "is_recording",
    "tensor",
    "softmax_rows",
    "attention",
    "backward",
    "finite_diff_check",
]


class DifferentiationDisabledError(RuntimeError):
    pass


class Tape:
    """Nodes recorded during one forward pass, in creation order."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __len__(self) -> int:
        return len(self.nodes)


_state = threading.local()


def _tape() -> Tape | None:
    return getattr(_state, "tape", None)


def is_recording() -> bool:
    return _tape() is not None


@contextmanager
def record():
    """Open a fresh tape for the current thread."""
    if getattr(_state, "disabled", 0):
        raise DifferentiationDisabledError("differentiation is disabled in this context")
    prev = _tape()
    tape = Tape()
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = prev


@contextmanager
def differentiation_disabled():
    """Forbid tapes for the duration of the block (gradient-free mode)."""
    prev_tape = _tape()
    _state.tape = None
    _state.disabled = getattr(_state, "disabled", 0) + 1
    try:
        yield
    finally:
        _state.disabled -= 1
        _state.tape = prev_tape


class Tensor:
    __slots__ = ("data", "trainable", "name", "_parents", "_backward", "_on_tape")

    def __init__(self, data, trainable: bool = False, name: str | None = None) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.trainable = trainable
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._on_tape = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def requires_grad(self) -> bool:
        return self.trainable or self._on_tape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, trainable={self.trainable})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def tensor(data, trainable: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, trainable=trainable, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn) -> Tensor:
    out = Tensor(data)
    tape = _tape()
    if tape is None:
        return out
    if not any(p.requires_grad for p in parents):
        return out
    out._parents = tuple(parents)
    out._backward = grad_fn
    out._on_tape = True
    tape.nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), grad_fn)


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def getitem(a: Tensor, idx) -> Tensor:
    src = a.shape

    def grad_fn(g):
        out = np.zeros(src)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), grad_fn)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    indices = np.asarray(indices, dtype=np.intp)
    src = a.shape

    def grad_fn(g):
        out = np.zeros(src)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (out,)

    return _make(np.take(a.data, indices, axis=axis), (a,), grad_fn)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, grad_fn)


def broadcast_to(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, src),))


# ---------------------------------------------------------------- reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), grad_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    sa, sb = a.shape, b.shape
    if bd.ndim == 1:
        # matrix-vector product
        def grad_mv(g):
            ga = g[..., None] * bd
            gb = (ad * g[..., None]).reshape(-1, bd.size).sum(axis=0)
            return ga, gb

        return _make(ad @ bd, (a, b), grad_mv)

    def grad_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return _make(ad @ bd, (a, b), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    n = xd.shape[-1]
    sg, sbeta = gamma.shape, beta.shape

    def grad_fn(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / n)
        return dx, _unbroadcast(g * xhat, sg), _unbroadcast(g, sbeta)

    return _make(xhat * gd + beta.data, (x, gamma, beta), grad_fn)


# ---------------------------------------------------------------- attention


def _softmax_values(m: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise ValueError("degenerate attention row")
        z = np.where(mask, m, -np.inf)
    else:
        z = np.array(m, dtype=np.float64)
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def softmax_rows(m, mask=None) -> Tensor:
    """Row softmax over the last axis; masked-out entries are exactly zero.

    Raises ``ValueError("degenerate attention row")`` if some row has no
    allowed entry.
    """
    m = _as_tensor(m)
    a = _softmax_values(m.data, mask)

    def grad_fn(g):
        ga = g * a
        ga -= a * ga.sum(axis=-1, keepdims=True)
        return (ga,)

    return _make(a, (m,), grad_fn)


def log_softmax(m: Tensor) -> Tensor:
    z = m.data - m.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (m,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def attention(q, k, v, mask=None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over the last two axes.

    Returns ``(out, a)`` with ``a = softmax_rows(q kᵀ / sqrt(d), mask)`` and
    ``out = a v``; leading axes are batch axes.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-2] != k.shape[-2]:
        raise ValueError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    logits = scale(matmul(q, swap_last(k)), 1.0 / math.sqrt(d))
    a = softmax_rows(logits, mask)
    return matmul(a, v), a


# ---------------------------------------------------------------- reverse pass


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(node) back along ``tape``.

    Returns gradient buffers for trainable leaves only; frozen leaves never
    receive one.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.trainable:
        leaves[id(loss)] = loss
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent.trainable:
                leaves[key] = parent
    return {leaf: grads[key] for key, leaf in leaves.items()}


def finite_diff_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    names: Iterable[str] | None = None,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    arrays = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: Tensor(v, trainable=True, name=k) for k, v in arrays.items()}
    with record() as tape:
        loss = f(leaves)
    grads = backward(tape, loss)
    analytic = {k: grads.get(leaf, np.zeros_like(leaf.data)) for k, leaf in leaves.items()}

    def value() -> float:
        return float(f({k: Tensor(v) for k, v in arrays.items()}).data)

    worst = 0.0
    for k in names if names is not None else arrays:
        arr = arrays[k]
        flat = arr.reshape(-1)
        ga = analytic[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            fd = (up - down) / (2 * eps)
            worst = max(worst, abs(ga[i] - fd) / max(1.0, abs(ga[i])))
    return worst
