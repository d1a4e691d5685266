"""Dense float64 tensors with reverse-mode differentiation.

Every operation builds its output eagerly and, when any input requires a
gradient, attaches a closure that maps the output gradient back onto the
inputs.  ``backward`` replays those closures in reverse execution order,
either from an explicit :class:`Tape` or from a topological sort of the
graph reachable from the loss.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()
_op_counter = itertools.count()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _active_tapes() -> list:
    tapes = getattr(_state, "tapes", None)
    if tapes is None:
        tapes = _state.tapes = []
    return tapes


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (inference, finite differences)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_order")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._order = -1

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, tape: "Tape | None" = None) -> None:
        backward(self, tape)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by constants")
        return mul(self, 1.0 / np.asarray(other, dtype=DTYPE))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Tape:
    """Ordered record of the operations executed while the tape is active.

    Use as a context manager; operations whose output requires a gradient
    are appended in execution order.
    """

    records: list[Tensor] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _active_tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes().remove(self)

    def __len__(self) -> int:
        return len(self.records)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._order = -1
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._order = next(_op_counter)
        for tape in _active_tapes():
            tape.records.append(out)
    else:
        out._parents = ()
        out._backward = None
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or t._backward is None:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    # creation order is a valid topological order
    nodes.sort(key=lambda t: t._order)
    return nodes


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` of every leaf that requires it with d(loss)/d(leaf).

    Leaf gradients accumulate across calls; intermediate gradients are
    discarded once propagated.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._backward is None:
        _accumulate(loss, np.ones_like(loss.data))
        return
    if tape is not None:
        if not any(r is loss for r in tape.records):
            raise ValueError("loss was not recorded on the given tape")
        order = tape.records
    else:
        order = _topo_order(loss)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                _accumulate(parent, pg)
            else:
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=DTYPE).reshape(leaf.shape)
    leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


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


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    sa, sb = a.shape, b.shape
    return _make(data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _make(data, (a,), lambda g: (g.reshape(src),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return np.split(g, bounds, axis=axis)

    return _make(data, tensors, bw)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _make(np.asarray(data), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), bw)


# ---------------------------------------------------------------------------
# normalisation


def softmax_masked(logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis restricted to positions where ``mask`` is true.

    ``mask`` broadcasts against ``logits``; the output takes the broadcast
    shape.  Masked positions come out exactly zero.  A row with no
    unmasked entry raises instead of producing NaN.
    """
    x = logits.data
    if mask is None:
        shift = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shift)
    else:
        mask = np.asarray(mask, dtype=bool)
        full = np.broadcast_shapes(x.shape, mask.shape)
        m = np.broadcast_to(mask, full)
        if not m.any(axis=-1).all():
            raise ValueError("softmax_masked: a row has every position masked")
        xb = np.broadcast_to(x, full)
        big = np.where(m, xb, -np.inf).max(axis=-1, keepdims=True)
        e = np.exp(np.where(m, xb - big, -np.inf))
    p = e / e.sum(axis=-1, keepdims=True)
    src = x.shape

    def bw(g):
        gx = p * (g - (g * p).sum(axis=-1, keepdims=True))
        return (_unbroadcast(gx, src),)

    return _make(p, (logits,), bw)


def log_softmax(logits: Tensor) -> Tensor:
    x = logits.data
    shift = x - x.max(axis=-1, keepdims=True)
    out = shift - np.log(np.exp(shift).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return _make(out, (logits,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: width {d} but gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gd
        gx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + beta.data, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# lookup and loss


def embedding_gather(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise TypeError(f"embedding_gather: indices must be integers, got {idx.dtype}")
    V = table.shape[0]
    bad = (idx < 0) | (idx >= V)
    if bad.any():
        raise IndexError(f"embedding_gather: index {int(idx[bad].flat[0])} out of range for V={V}")
    shape = table.shape

    def bw(g):
        gt = np.zeros(shape, dtype=DTYPE)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(table.data[idx], (table,), bw)


def nll_loss(log_probs: Tensor, targets, reduction: str = "sum", weights=None) -> Tensor:
    """Negative log-likelihood of integer ``targets`` under ``log_probs``.

    Leading axes of ``log_probs`` are flattened against ``targets``.
    ``weights`` (same shape as ``targets``) scales each term; pass a 0/1
    padding mask to drop padded steps.  ``mean`` divides by the total weight.
    """
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    V = log_probs.shape[-1]
    t = np.asarray(targets).reshape(-1)
    if t.size * V != log_probs.size:
        raise ShapeError(f"nll_loss: {t.size} targets for log-probs of shape {log_probs.shape}")
    bad = (t < 0) | (t >= V)
    if bad.any():
        raise IndexError(f"nll_loss: target {int(t[bad][0])} out of range for V={V}")
    w = np.ones(t.size, dtype=DTYPE) if weights is None else np.asarray(weights, dtype=DTYPE).reshape(-1)
    denom = w.sum() if reduction == "mean" else 1.0
    if denom == 0:
        raise ValueError("nll_loss: mean over zero total weight")
    rows = np.arange(t.size)
    lp = log_probs.data.reshape(-1, V)
    value = -(lp[rows, t] * w).sum() / denom
    shape = log_probs.shape

    def bw(g):
        gl = np.zeros((t.size, V), dtype=DTYPE)
        gl[rows, t] = -w * (g / denom)
        return (gl.reshape(shape),)

    return _make(np.asarray(value), (log_probs,), bw)


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class InputCheck:
    name: str
    max_rel_error: float
    checked: int
    passed: bool


@dataclass
class GradCheckReport:
    entries: list[InputCheck]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)


def grad_check(
    f: Callable[[], Tensor],
    inputs: Iterable[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    max_elements: int | None = None,
    seed: int = 0,
    analytic: Sequence[np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare backward gradients of scalar ``f()`` with central differences.

    The relative error of an input is the largest absolute discrepancy over
    its checked elements divided by the largest gradient magnitude seen on
    either side, so tiny gradient entries do not blow the ratio up.
    ``max_elements`` samples that many entries per input.  ``analytic``
    overrides the gradients under test (used for negative controls).
    """
    inputs = list(inputs)
    rng = np.random.default_rng(seed)
    if analytic is None:
        saved = [t.grad for t in inputs]
        for t in inputs:
            t.grad = None
        backward(f())
        analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]
        for t, g in zip(inputs, saved):
            t.grad = g

    entries = []
    for i, (t, ga) in enumerate(zip(inputs, analytic)):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = rng.choice(flat.size, size=max_elements, replace=False)
        ga = np.asarray(ga).reshape(-1)[idx]
        gn = np.empty(len(idx))
        with no_grad():
            for k, j in enumerate(idx):
                orig = flat[j]
                flat[j] = orig + step
                hi = f().item()
                flat[j] = orig - step
                lo = f().item()
                flat[j] = orig
                gn[k] = (hi - lo) / (2 * step)
        scale_ = max(np.abs(ga).max(initial=0.0), np.abs(gn).max(initial=0.0))
        err = float(np.abs(ga - gn).max(initial=0.0) / scale_) if scale_ > 1e-12 else 0.0
        entries.append(InputCheck(t.name or f"input{i}", err, len(idx), err <= tol))
    return GradCheckReport(entries, tol)
