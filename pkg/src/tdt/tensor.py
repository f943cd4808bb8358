"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op computes its forward value with numpy and, when any
input requires a gradient, appends ``(output, inputs, vjp)`` to the active
:class:`Tape`. ``Tape.backward`` replays those records in reverse execution
order, which is a valid reverse topological order because an op is always
recorded after all of its inputs.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
KL_EPS = 1e-12
MASK_NEG = -1e30

_state = threading.local()


def _tls():
    if not hasattr(_state, "tape"):
        _state.tape = Tape()
        _state.grad_enabled = True
        _state.kink_log = None
    return _state


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
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
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        get_tape().backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: index(self, idx)


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], vjp: Callable) -> None:
        self.records.append((out, parents, vjp))

    def clear(self) -> None:
        self.records.clear()

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        if not loss.requires_grad:
            raise RuntimeError("loss does not require grad; nothing was recorded")
        loss.grad = np.ones_like(loss.data) if seed is None else np.asarray(seed, DTYPE)
        for out, parents, vjp in reversed(self.records):
            g = out.grad
            if g is None:
                continue
            for p, pg in zip(parents, vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                p.grad = pg if p.grad is None else p.grad + pg
        self.clear()

    def __enter__(self) -> "Tape":
        st = _tls()
        self._prev = st.tape
        st.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _tls().tape = self._prev


def get_tape() -> Tape:
    return _tls().tape


@contextlib.contextmanager
def no_grad():
    st = _tls()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


@contextlib.contextmanager
def kink_monitor():
    """Collect the sign pattern of every piecewise-linear op evaluated inside."""
    st = _tls()
    prev = st.kink_log
    st.kink_log = log = []
    try:
        yield log
    finally:
        st.kink_log = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    st = _tls()
    needs = st.grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        st.tape.record(out, parents, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {ad.shape} @ {bd.shape}")

    if bd.ndim == 2:
        # activations @ weight: fold leading axes so dW is one 2-d product
        a2 = ad.reshape(-1, ad.shape[-1])

        def vjp2(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _make((a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],)), (a, b), vjp2)

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), vjp)


# ------------------------------------------------------------------- shaping


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast (e.g. a row vector over a sequence axis); backward sums back."""
    src = a.shape
    return _make(np.broadcast_to(a.data, tuple(shape)).copy(), (a,),
                 lambda g: (_unbroadcast(g, src),))


def index(a: Tensor, idx) -> Tensor:
    """Basic (non-fancy) indexing."""
    src = a.shape

    def vjp(g):
        full = np.zeros(src, dtype=DTYPE)
        full[idx] = g
        return (full,)

    return _make(a.data[idx], (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table``; backward scatters-adds into the rows used."""
    ids = np.asarray(ids)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"token id out of range [0, {n})")
    tshape = table.shape

    def vjp(g):
        gt = np.zeros(tshape, dtype=DTYPE)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, tshape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), vjp)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard``, gradient passed unchanged to ``soft``."""
    return _make(np.asarray(hard, DTYPE), (soft,), lambda g: (g,))


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    count = a.data.size if axis is None else np.prod([src[i] for i in np.atleast_1d(axis)])
    inv = 1.0 / count

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * inv, src).copy(),)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), vjp)


# --------------------------------------------------------------- elementwise


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _log_kink(x: np.ndarray) -> None:
    log_ = _tls().kink_log
    if log_ is not None:
        log_.append(x > 0)


def relu(a: Tensor) -> Tensor:
    _log_kink(a.data)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def hinge(a: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is 0."""
    return relu(a)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _make(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data

    def vjp(g):
        gxhat = g * gd
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + bias.data, (x, gain, bias), vjp)


# ------------------------------------------------------------------- losses


def l2_norm(v: Tensor, axis: int | None = None) -> Tensor:
    """Euclidean norm; the zero vector gets subgradient 0."""
    vd = v.data
    n = np.sqrt((vd * vd).sum(axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1.0)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.where(n > 0, g * vd / safe, 0.0),)

    out = n.squeeze(axis=axis) if axis is not None else n.reshape(())
    return _make(out, (v,), vjp)


def kl_divergence(p, q, axis: int = -1, eps: float = KL_EPS) -> Tensor:
    """KL(p || q) along ``axis`` with 0·log(0/q) = 0 and q floored at ``eps``."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    pd, qd = p.data, q.data
    qc = np.maximum(qd, eps)
    pc = np.maximum(pd, eps)
    lr = np.log(pc) - np.log(qc)
    terms = np.where(pd > 0, pd * lr, 0.0)

    def vjp(g):
        g = np.expand_dims(np.asarray(g), axis)
        gp = g * (lr + 1.0)
        gq = np.where(qd >= eps, -g * pd / qc, 0.0)
        return gp, gq

    return _make(terms.sum(axis=axis), (p, q), vjp)


def nll_from_probs(probs: Tensor, labels: np.ndarray, eps: float = KL_EPS) -> Tensor:
    """Per-row -log(probs[y]) with the selected probability clamped at ``eps``."""
    labels = np.asarray(labels)
    n, k = probs.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range [0, {k})")
    rows = np.arange(n)
    picked = probs.data[rows, labels]
    clamped = np.maximum(picked, eps)

    def vjp(g):
        gp = np.zeros_like(probs.data)
        gp[rows, labels] = np.where(picked >= eps, -g / clamped, 0.0)
        return (gp,)

    return _make(-np.log(clamped), (probs,), vjp)


def iter_params(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
