"""Small define-by-run reverse-mode autodiff over dense float64 arrays.

Operations executed while a :class:`Tape` is active are recorded in
execution order; :func:`backward` walks the recording in reverse, which
gives backpropagation through time for free when a recurrence is unrolled
inside the tape.

Also home to the Adam optimizer and the three training losses.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "as_tensor",
    "concat",
    "lincomb",
    "where_const",
    "custom_op",
    "unstack",
    "AdamState",
    "Adam",
    "adam_step",
    "LossKind",
    "compute_loss",
    "numerical_grad",
    "NonFiniteError",
]

_ACTIVE: list["Tape"] = []


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in a value or a gradient."""


def expit(x: np.ndarray) -> np.ndarray:
    """Logistic function; exp overflow for very negative x correctly yields 0."""
    return 1.0 / (1.0 + np.exp(-x))


def _recording() -> "Tape | None":
    return _ACTIVE[-1] if _ACTIVE else None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array that can take part in gradient computations."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name", "_owned")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._owned = False
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # --- bookkeeping -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def _accumulate(self, g: np.ndarray) -> None:
        # a first incoming gradient may be shared with other nodes, so it is
        # only added to in place once this tensor owns a private copy
        if self.grad is None:
            self.grad = g
            self._owned = False
        elif self._owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._owned = True

    # --- operators ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return scale(self, 1.0 / other)

    def __rtruediv__(self, other):
        return mul(as_tensor(other), reciprocal(self))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def abs(self):
        return absolute(self)

    def square(self):
        return square(self)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._owned = False
    out.name = None
    out.op = op
    tape = _ACTIVE[-1] if _ACTIVE else None
    needs = False
    if tape is not None:
        for p in parents:
            if p.requires_grad:
                needs = True
                break
    if needs:
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        tape.nodes.append(out)
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# --- primitive ops ------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant."""

    def bw(g):
        a._accumulate(g * c)

    return _node(a.data * c, (a,), bw, "scale")


def lincomb(tensors: Sequence[Tensor], coeffs: Sequence[float]) -> Tensor:
    """Return sum_i coeffs[i] * tensors[i] as a single node (same shapes)."""
    data = tensors[0].data * coeffs[0]
    for t, c in zip(tensors[1:], coeffs[1:]):
        data = data + t.data * c

    def bw(g):
        for t, c in zip(tensors, coeffs):
            if t.requires_grad:
                t._accumulate(g * c)

    return _node(data, tuple(tensors), bw, "lincomb")


def reciprocal(a: Tensor) -> Tensor:
    out_data = 1.0 / a.data

    def bw(g):
        a._accumulate(-g * out_data * out_data)

    return _node(out_data, (a,), bw, "reciprocal")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bw(g):
        a._accumulate(g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), bw, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out_data = expit(a.data)

    def bw(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), bw, "sigmoid")


def softplus(a: Tensor) -> Tensor:
    out_data = np.logaddexp(0.0, a.data)

    def bw(g):
        a._accumulate(g * expit(a.data))

    return _node(out_data, (a,), bw, "softplus")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        a._accumulate(g * mask)

    return _node(a.data * mask, (a,), bw, "relu")


def maximum(a: Tensor, c: float) -> Tensor:
    """Elementwise max against a scalar; the gradient goes to ``a`` where a > c."""
    mask = a.data > c

    def bw(g):
        a._accumulate(g * mask)

    return _node(np.where(mask, a.data, c), (a,), bw, "max_scalar")


def minimum(a: Tensor, c: float) -> Tensor:
    mask = a.data < c

    def bw(g):
        a._accumulate(g * mask)

    return _node(np.where(mask, a.data, c), (a,), bw, "min_scalar")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bw(g):
        a._accumulate(g * out_data)

    return _node(out_data, (a,), bw, "exp")


def absolute(a: Tensor) -> Tensor:
    # np.sign(0) == 0 gives the zero subgradient at the kink
    def bw(g):
        a._accumulate(g * np.sign(a.data))

    return _node(np.abs(a.data), (a,), bw, "abs")


def square(a: Tensor) -> Tensor:
    def bw(g):
        a._accumulate(2.0 * g * a.data)

    return _node(a.data * a.data, (a,), bw, "square")


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    shape = a.data.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, shape).copy())

    return _node(np.sum(a.data, axis=axis), (a,), bw, "sum")


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    shape = a.data.shape
    n = a.data.size if axis is None else shape[axis]

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g / n, shape).copy())

    return _node(np.mean(a.data, axis=axis), (a,), bw, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def bw(g):
        a._accumulate(g.reshape(old))

    return _node(a.data.reshape(shape), (a,), bw, "reshape")


def take(a: Tensor, idx) -> Tensor:
    """Basic (slice) indexing."""
    shape = a.data.shape

    def bw(g):
        full = np.zeros(shape)
        full[idx] = g
        a._accumulate(full)

    return _node(a.data[idx], (a,), bw, "slice")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _node(data, tuple(tensors), bw, "concat")


def where_const(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where the constant boolean mask holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * mask, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~mask, b.data.shape))

    return _node(np.where(mask, a.data, b.data), (a, b), bw, "where")


def custom_op(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    """Record a fused op whose ``vjp(g)`` returns one gradient (or None) per parent."""
    parents = tuple(parents)

    def bw(g):
        for p, gp in zip(parents, vjp(g)):
            if gp is not None and p.requires_grad:
                p._accumulate(gp)

    return _node(data, parents, bw, op)


def unstack(a: Tensor, axis: int = 1) -> list[Tensor]:
    """Split along ``axis`` into views; gradients are gathered into one buffer."""
    n = a.data.shape[axis]
    moved = np.moveaxis(a.data, axis, 0)
    tape = _ACTIVE[-1] if _ACTIVE else None
    if tape is None or not a.requires_grad:
        return [Tensor(moved[i]) for i in range(n)]
    buf = np.zeros_like(moved)

    def hub_bw(g):
        a._accumulate(np.moveaxis(buf, 0, axis))

    hub = _node(a.data, (a,), hub_bw, "unstack")
    outs = []
    for i in range(n):
        def bw(g, i=i):
            buf[i] += g
            hub.grad = buf

        outs.append(_node(moved[i], (hub,), bw, "unstack_item"))
    return outs


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


# --- tape -----------------------------------------------------------------
class Tape:
    """Records ops while active. Use as a context manager.

    Invalid operations and division by zero raise inside the block. Overflow
    is tolerated (a saturating sigmoid overflows harmlessly); any Inf that
    survives is caught by the finiteness checks on the loss and in Adam.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._errstate = None

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        self._errstate = np.errstate(over="ignore", invalid="raise", divide="raise")
        self._errstate.__enter__()
        return self

    def __exit__(self, *exc) -> None:
        self._errstate.__exit__(*exc)
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires it.

    Intermediate gradients are released as soon as they have been
    propagated.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss is not finite")
    if not loss.requires_grad:
        return
    seen: set[int] = set()
    loss.grad = np.ones_like(loss.data)
    with np.errstate(over="ignore", invalid="raise", divide="raise"):
        for node in reversed(tape.nodes):
            key = id(node)
            if key in seen:
                raise RuntimeError("tape visits a node twice; graph is not a DAG")
            seen.add(key)
            g = node.grad
            if g is None:
                continue
            node._backward(g)
            node.grad = None


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (mutated in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


# --- optimizer --------------------------------------------------------------
@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> AdamState:
    """In-place bias-corrected Adam update on raw arrays."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError("non-finite gradient passed to adam_step")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


class Adam:
    """Adam over a list of leaf tensors; gradients are read from ``.grad``."""

    def __init__(self, params: Iterable[Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grads(self) -> list[np.ndarray]:
        return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]

    def step(self, grads: list[np.ndarray] | None = None) -> None:
        adam_step([p.data for p in self.params], grads if grads is not None else self.grads(), self.state)


# --- losses ---------------------------------------------------------------
class LossKind(str, enum.Enum):
    MSE = "mse"
    MAE = "mae"
    HUBER = "huber"


def compute_loss(kind: LossKind | str, pred: Tensor, target, delta: float = 1.0) -> Tensor:
    kind = LossKind(kind)
    target = as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ValueError(f"pred {pred.data.shape} and target {target.data.shape} differ")
    r = pred - target
    if kind is LossKind.MSE:
        return reduce_mean(square(r))
    if kind is LossKind.MAE:
        return reduce_mean(absolute(r))
    if delta <= 0:
        raise ValueError("huber delta must be positive")
    a = absolute(r)
    q = minimum(a, delta)
    # q * (a - q/2) is 0.5 r^2 inside the band and delta (|r| - delta/2) outside
    return reduce_mean(q * (a - scale(q, 0.5)))
