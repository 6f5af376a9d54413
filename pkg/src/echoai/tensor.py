"""Dense float tensors with tape-style reverse-mode differentiation.

Every op records its parents and a closure that maps the output gradient to
input gradients. ``backward`` walks the recorded graph in reverse topological
order and frees it afterwards, so each forward pass builds a fresh graph.

Data is 32-bit by default. Leaves created with ``dtype=np.float64`` propagate
double precision through every op, which is what ``gradcheck`` relies on.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_node_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(d <= 0 for d in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.node_id = next(_node_ids)
        out.op = op
        out._consumed = False
        out._backward = None
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.op == "leaf"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=np.float32) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise and layout primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    out = Tensor._result(a.data + b.data, (a, b), "add")

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    out._backward = bw
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    out = Tensor._result(a.data - b.data, (a, b), "sub")

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    out._backward = bw
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    out = Tensor._result(a.data * b.data, (a, b), "mul")

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    out._backward = bw
    return out


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor._result(x.data * x.data.dtype.type(c), (x,), "scale")
    out._backward = lambda g: _accumulate(x, g * c)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}") from None
    out = Tensor._result(data, (x,), "reshape")
    out._backward = lambda g: _accumulate(x, g.reshape(x.shape))
    return out


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor._result(np.transpose(x.data, axes), (x,), "transpose")
    out._backward = lambda g: _accumulate(x, np.transpose(g, inverse))
    return out


def gather_rows(x: Tensor, ids) -> Tensor:
    """Select rows (first axis) by index; repeated indices are allowed.

    The backward pass scatter-adds into the selected rows only.
    """
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        raise DimensionError("gather_rows needs at least one index")
    n = x.shape[0]
    if ids.min() < 0 or ids.max() >= n:
        bad = ids[(ids < 0) | (ids >= n)]
        raise IndexError(f"gather_rows: index {int(bad[0])} out of range for {n} rows")
    out = Tensor._result(x.data[ids], (x,), "gather_rows")

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, ids, g)
        _accumulate(x, full)

    out._backward = bw
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    out = Tensor._result(data, tensors, "concat")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            _accumulate(t, piece)

    out._backward = bw
    return out


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor._result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), "sum")

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    out._backward = bw
    return out


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(tsum(x, axis, keepdims), 1.0 / count)


# --------------------------------------------------------------------------
# dense algebra and nonlinearities


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not broadcast") from None
    out = Tensor._result(data, (a, b), "matmul")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    out._backward = bw
    return out


def softmax_lastdim(x: Tensor) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_lastdim received non-finite input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor._result(y, (x,), "softmax")

    def bw(g):
        _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    out._backward = bw
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape}/bias {bias.shape} do not match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * rstd
    out = Tensor._result(xhat * gain.data + bias.data, (x, gain, bias), "layer_norm")

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        _accumulate(gain, (g * xhat).sum(axis=lead))
        _accumulate(bias, g.sum(axis=lead))
        if x.requires_grad:
            gx = g * gain.data
            dx = (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)) * rstd
            _accumulate(x, dx)

    out._backward = bw
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = Tensor._result(0.5 * v * (1.0 + t), (x,), "gelu")

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        _accumulate(x, g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner))

    out._backward = bw
    return out


def mse_loss(pred: Tensor, target) -> Tensor:
    """(1/n) * sum((target - pred)**2) over every element."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = Tensor._result(np.asarray((diff * diff).sum() / n), (pred, target), "mse")

    def bw(g):
        _accumulate(pred, g * 2.0 * diff / n)
        _accumulate(target, -g * 2.0 * diff / n)

    out._backward = bw
    return out


# --------------------------------------------------------------------------
# graph traversal


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, inputs before consumers."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise ContractError("backward already ran on this graph; run a new forward pass first")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    order = topo_order(loss)
    # Interior nodes collect their gradient in .grad transiently; leaves keep it.
    for node in order:
        if not node.is_leaf:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if not node.is_leaf:
            node._backward = None
            node._parents = ()
            node.grad = None
    loss._consumed = True


# --------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradcheckReport:
    name: str
    checked: int = 0
    worst_abs: float = 0.0
    worst_rel: float = 0.0
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def __str__(self):
        status = "ok" if self.ok else f"FAIL ({len(self.failures)} entries)"
        return (f"{self.name}: {status}; {self.checked} entries, "
                f"max abs err {self.worst_abs:.2e}, max rel err {self.worst_rel:.2e}")


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence, name: str = "gradcheck", h: float = 1e-3,
              rtol: float = 1e-3, atol: float = 1e-5, max_per_input: int | None = None,
              seed: int = 0) -> GradcheckReport:
    """Compare analytic gradients of ``fn(*inputs)`` against central differences.

    Inputs are promoted to float64 leaves for the check. An entry passes when
    ``|analytic - numeric| <= atol + rtol * |numeric|``. ``max_per_input``
    samples that many coordinates per input instead of checking all of them.
    """
    leaves = [Tensor(np.asarray(x.data if isinstance(x, Tensor) else x), requires_grad=True,
                     dtype=np.float64) for x in inputs]
    loss = fn(*leaves)
    if loss.size != 1:
        raise ContractError(f"gradcheck needs a scalar function, got shape {loss.shape}")
    backward(loss)
    rng = np.random.default_rng(seed)
    report = GradcheckReport(name)
    for k, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_input is not None and flat.size > max_per_input:
            idx = rng.choice(flat.size, size=max_per_input, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = float(fn(*leaves).data)
            flat[i] = orig - h
            with no_grad():
                fm = float(fn(*leaves).data)
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric)
            report.checked += 1
            report.worst_abs = max(report.worst_abs, err)
            report.worst_rel = max(report.worst_rel, err / max(abs(numeric), 1e-12))
            if not np.isfinite(a) or err > atol + rtol * abs(numeric):
                report.failures.append(f"input {k} entry {int(i)}: analytic {a:.6g} vs numeric {numeric:.6g}")
    return report
