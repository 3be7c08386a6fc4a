"""A small reverse-mode autodiff engine over float64 numpy arrays.

Operations are recorded on a :class:`Graph` tape while one is active
(``with Graph() as g: ...``).  Outside a graph, or inside :func:`inference`,
the same functions compute plain forward values and record nothing, so both
modes run identical arithmetic and produce bitwise-identical results.

Broadcasting is deliberately narrow: two operands must have equal shapes, or
the shape of one must be a trailing suffix of the other (broadcast over
leading axes only).  Anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

LAYERNORM_EPS = 1e-5

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    ``graph``/``node`` identify the tape entry that produced the tensor; both
    are ``None`` for constants and parameters (leaves).
    """

    __slots__ = ("data", "grad", "requires_grad", "graph", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        _check_finite(arr, name or "tensor constructor")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.graph: Optional[Graph] = None
        self.node: Optional[int] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        t.data = arr if arr.flags.c_contiguous else arr.copy()
        t.grad = None
        t.requires_grad = False
        t.graph = None
        t.node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(x: TensorLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class _Node:
    __slots__ = ("parents", "backward", "op")

    def __init__(self, parents, backward, op):
        self.parents = parents
        self.backward = backward
        self.op = op


_STACK: list = []


def current_graph() -> Optional["Graph"]:
    return _STACK[-1] if _STACK else None


@contextlib.contextmanager
def inference():
    """Run forward ops without recording, even inside an active graph."""
    _STACK.append(None)
    try:
        yield
    finally:
        _STACK.pop()


class Graph:
    """Tape of recorded operations; one backward pass per recording.

    Use as a context manager.  ``trace`` lists node ids in the order the last
    backward pass visited them.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.trace: list[int] = []
        self._consumed = False

    def __enter__(self) -> "Graph":
        _STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _STACK.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _tracks(self, t: Tensor) -> bool:
        return t.requires_grad or t.graph is self

    def record(self, out: Tensor, parents: Sequence[Tensor], backward: Callable, op: str) -> None:
        out.graph = self
        out.node = len(self.nodes)
        self.nodes.append(_Node(tuple(parents), backward, op))

    def reset(self) -> None:
        self.nodes = []
        self.trace = []
        self._consumed = False

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> None:
        """Populate ``.grad`` on every leaf reachable from ``loss``.

        Gradients accumulate into existing buffers.  Tensors listed in
        ``params`` get zeroed buffers first, so the ones the loss does not
        reach end up holding zeros.
        """
        if self._consumed:
            raise GraphError("backward() already ran on this graph; call reset() first")
        if loss.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss.graph is not self:
            raise GraphError("loss was not recorded on this graph")
        for p in params:
            p.zero_grad()
        self._consumed = True
        self.trace = []
        grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
        for idx in range(loss.node, -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            self.trace.append(idx)
            node = self.nodes[idx]
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None:
                    continue
                if parent.graph is self:
                    prev = grads.get(parent.node)
                    grads[parent.node] = pg if prev is None else prev + pg
                elif parent.requires_grad:
                    if parent.grad is None:
                        parent.grad = np.array(pg, dtype=np.float64)
                    else:
                        parent.grad = parent.grad + pg
        for p in params:
            _check_finite(p.grad, f"gradient of {p.name or 'parameter'}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor._wrap(data)
    g = current_graph()
    if g is not None and any(g._tracks(p) for p in parents):
        g.record(out, parents, backward, op)
    return out


def _broadcast(a: Tensor, b: Tensor, op: str) -> tuple:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(f"{op}: shapes {sa} and {sb} are not compatible (leading-axis broadcast only)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        return (g * s,)

    return _make(a.data * s, (a,), backward, "scale")


def log(a: Tensor) -> Tensor:
    ad = a.data
    if (ad <= 0).any():
        raise NonFiniteError("log: input has non-positive entries")

    def backward(g):
        return (g / ad,)

    return _make(np.log(ad), (a,), backward, "log")


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + _GELU_K * x2)
    t = np.tanh(inner)

    def backward(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * x2)
        return (g * d,)

    return _make(0.5 * x * (1.0 + t), (a,), backward, "gelu")


def dropout(a: Tensor, p: float, rng) -> Tensor:
    """Inverted dropout: kept units are scaled by ``1/(1-p)``.

    ``rng`` is a generator, or a sequence of generators with one per slice
    along the leading axis (independent streams for stacked MC passes).
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout with p > 0 needs a generator")
    if isinstance(rng, np.random.Generator):
        u = rng.random(a.shape)
    else:
        if len(rng) != a.shape[0]:
            raise ShapeError(f"dropout: {len(rng)} generators for leading axis of {a.shape}")
        u = np.stack([r.random(a.shape[1:]) for r in rng])
    keep = (u >= p).astype(np.float64) / (1.0 - p)

    def backward(g):
        return (g * keep,)

    return _make(a.data * keep, (a,), backward, "dropout")


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., n, k] @ b[k, m]`` or ``a[..., n, k] @ b[..., k, m]`` with equal leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading axes of {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(src),)

    return _make(out, (a,), backward, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(a.data, axes), (a,), backward, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    ax = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:ax] + t.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def gather_rows(a: Tensor, index: Sequence[int]) -> Tensor:
    """Select rows along axis 0; repeated indices accumulate in backward."""
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for shape {a.shape}")
    src = a.shape

    def backward(g):
        out = np.zeros(src)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), backward, "gather_rows")


def replace_rows(x: Tensor, flags: np.ndarray, token: Tensor) -> Tensor:
    """Replace ``x[..., i, :]`` by ``token`` wherever ``flags[..., i]`` is set."""
    flags = np.asarray(flags, dtype=bool)
    if flags.shape != x.shape[:-1] or token.shape != x.shape[-1:]:
        raise ShapeError(
            f"replace_rows: x {x.shape}, flags {flags.shape}, token {token.shape} do not conform"
        )
    sel = flags[..., None]

    def backward(g):
        return np.where(sel, 0.0, g), (g * sel).reshape(-1, g.shape[-1]).sum(axis=0)

    return _make(np.where(sel, token.data, x.data), (x, token), backward, "replace_rows")


# ---------------------------------------------------------------------------
# reductions and normalisation


def _axes(ndim: int, axis) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _axes(a.ndim, axis)
    src = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(a.ndim, axis)
    src = a.shape
    n = int(np.prod([src[i] for i in axes])) if axes else 1

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, src).copy(),)

    return _make(a.data.mean(axis=axes, keepdims=keepdims), (a,), backward, "mean")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (a,), backward, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalise over the last axis, then apply a learnable gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: x {x.shape} vs gain {gain.shape} / bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        dxhat = g * gd
        dx = inv / d * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + bias.data, (x, gain, bias), backward, "layer_norm")
