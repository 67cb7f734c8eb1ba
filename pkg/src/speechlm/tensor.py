"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: tensors wrap numpy arrays (fp32 or fp64),
every differentiable operation records a vector-Jacobian closure, and
``backward`` walks the tape once in reverse topological order.  A single
forward/backward pass is single-threaded with respect to the tape; numpy may
parallelize individual kernels internally.

Broadcasting policy: element-wise binary operations accept identical shapes,
scalars, or a tensor whose shape is a suffix of the other's (leading batch
dimensions).  Size-1 dimension stretching is never implicit; reshape or
pre-broadcast explicitly.  This removes a whole class of silent shape bugs.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError

FLOAT_DTYPES = (np.float32, np.float64)

_GRAD_MODE = [True]


@contextmanager
def no_grad():
    """Disable tape recording inside the context (inference mode)."""
    _GRAD_MODE.append(False)
    try:
        yield
    finally:
        _GRAD_MODE.pop()


def grad_enabled() -> bool:
    return _GRAD_MODE[-1]


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A dense row-major array with optional gradient participation.

    ``grad`` is populated on leaf tensors (no parents) by ``backward``;
    repeated backward calls accumulate until ``zero_grad`` resets it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._vjp: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple:
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

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        if dtype not in FLOAT_DTYPES:
            raise ContractError(f"unsupported dtype {dtype}")
        out = make_node(self.data.astype(dtype), (self,))
        if out._parents:
            out._vjp = lambda g: (g.astype(self.data.dtype),)
        return out

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff -----------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division unsupported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A named, trainable tensor; frozen parameters never accumulate grads."""

    __slots__ = ("frozen",)

    def __init__(self, data, frozen: bool = False, dtype=None):
        super().__init__(data, requires_grad=not frozen, dtype=dtype)
        self.frozen = bool(frozen)

    def freeze(self) -> None:
        self.frozen = True
        self.requires_grad = False
        self.grad = None

    def unfreeze(self) -> None:
        self.frozen = False
        self.requires_grad = True


def make_node(data: np.ndarray, parents: Iterable[Tensor]) -> Tensor:
    """Create an op output, keeping the tape only when a parent needs grads."""
    out = Tensor(data)
    if grad_enabled():
        linked = tuple(p for p in parents)
        if any(p.requires_grad for p in linked):
            out.requires_grad = True
            out._parents = linked
    return out


# -- broadcasting helpers ---------------------------------------------------


def _coerce(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise ContractError("at least one operand must be a Tensor")
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"dtype mismatch: {a.data.dtype} vs {b.data.dtype}")
    return a, b


def _check_broadcast(sa: tuple, sb: tuple) -> None:
    if sa == sb or sa == () or sb == ():
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"shapes {sa} and {sb} do not broadcast (suffix rule)")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra)))


# -- element-wise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a.shape, b.shape)
    out = make_node(a.data + b.data, (a, b))
    if out._parents:
        out._vjp = lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape))
    return out


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a.shape, b.shape)
    out = make_node(a.data - b.data, (a, b))
    if out._parents:
        out._vjp = lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape))
    return out


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a.shape, b.shape)
    out = make_node(a.data * b.data, (a, b))
    if out._parents:
        out._vjp = lambda g: (
            _reduce_to(g * b.data, a.shape),
            _reduce_to(g * a.data, b.shape),
        )
    return out


def neg(a: Tensor) -> Tensor:
    out = make_node(-a.data, (a,))
    if out._parents:
        out._vjp = lambda g: (-g,)
    return out


def exp(a: Tensor) -> Tensor:
    val = np.exp(a.data)
    out = make_node(val, (a,))
    if out._parents:
        out._vjp = lambda g: (g * val,)
    return out


def log(a: Tensor) -> Tensor:
    out = make_node(np.log(a.data), (a,))
    if out._parents:
        out._vjp = lambda g: (g / a.data,)
    return out


def pow_(a: Tensor, exponent: float) -> Tensor:
    out = make_node(a.data ** exponent, (a,))
    if out._parents:
        out._vjp = lambda g: (g * exponent * a.data ** (exponent - 1),)
    return out


# -- matmul and shape ops -----------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; leading batch dimensions must match exactly (or one
    operand is 2-D and is shared across the other's batch)."""
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    if a.ndim != b.ndim:
        if not (a.ndim > 2 and b.ndim == 2) and not (a.ndim == 2 and b.ndim > 2):
            raise ShapeError(f"matmul rank mismatch: {a.shape} @ {b.shape}")
    elif a.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}")

    out = make_node(np.matmul(a.data, b.data), (a, b))
    if out._parents:

        def vjp(g):
            ga = gb = None
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                if ga.shape != a.data.shape:  # b carried the batch dims
                    ga = ga.sum(axis=tuple(range(ga.ndim - a.ndim)))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                if gb.shape != b.data.shape:  # a carried the batch dims
                    gb = gb.sum(axis=tuple(range(gb.ndim - b.ndim)))
            return ga, gb

        out._vjp = vjp
    return out


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape) if not isinstance(shape, int) else (shape,)
    out = make_node(a.data.reshape(shape), (a,))
    if out._parents:
        out._vjp = lambda g: (g.reshape(a.data.shape),)
    return out


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = make_node(np.transpose(a.data, axes), (a,))
    if out._parents:
        inv = tuple(np.argsort(axes))
        out._vjp = lambda g: (np.transpose(g, inv),)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors)
    if out._parents:
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def vjp(g):
            return tuple(np.split(g, splits, axis=axis))

        out._vjp = vjp
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = make_node(np.stack([t.data for t in tensors], axis=axis), tensors)
    if out._parents:

        def vjp(g):
            return tuple(np.moveaxis(g, axis, 0))

        out._vjp = vjp
    return out


def index(a: Tensor, key) -> Tensor:
    """Basic slicing/integer indexing with scatter-add backward."""
    out = make_node(a.data[key], (a,))
    if out._parents:

        def vjp(g):
            ga = np.zeros_like(a.data)
            np.add.at(ga, key, g)
            return (ga,)

        out._vjp = vjp
    return out


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis 0 by integer index array."""
    idx = np.asarray(idx, dtype=np.int64)
    out = make_node(a.data[idx], (a,))
    if out._parents:

        def vjp(g):
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            return (ga,)

        out._vjp = vjp
    return out


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = make_node(a.data.sum(axis=axis, keepdims=keepdims), (a,))
    if out._parents:

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, a.data.shape).copy(),)
            g_exp = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g_exp, a.data.shape).copy(),)

        out._vjp = vjp
    return out


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- gradient checking ---------------------------------------------------------


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords_per_param: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Compare autodiff gradients against fp64 central finite differences.

    ``f`` evaluates the scalar loss from the current parameter values.
    Returns the worst relative error max(|g_ad - g_fd| / max(|g_ad|, |g_fd|,
    1e-8)) across all checked coordinates.  Parameters must be fp64.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ContractError("grad_check requires fp64 parameters")
        p.grad = None

    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, g_ad in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            picker = rng if rng is not None else np.random.default_rng(0)
            coords = picker.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        g_flat = g_ad.reshape(-1)
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                hi = f().item()
                flat[i] = orig - eps
                lo = f().item()
            flat[i] = orig
            g_fd = (hi - lo) / (2.0 * eps)
            denom = max(abs(g_flat[i]), abs(g_fd), 1e-8)
            worst = max(worst, abs(g_flat[i] - g_fd) / denom)
    return worst
