"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable operation is a *primitive*: it computes its output
eagerly and, when any input requires a gradient, records the inputs plus a
local gradient rule on the output tensor.  ``backward`` replays those rules
in reverse creation order, so each graph node is visited exactly once.

Broadcasting is deliberately narrow.  Binary elementwise primitives accept
identical shapes, a 0-d operand against any tensor, or a trailing-dimension
operand (``b.shape == a.shape[-b.ndim:]``, e.g. a bias row).  Anything else
raises :class:`~stab.errors.DimensionError`.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

_creation = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Suspend graph recording (inference and finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 array that can take part in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_rule", "_op", "_order")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._rule = None
        self._op = "leaf"
        self._order = next(_creation)

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], rule, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._op = op
        out._order = next(_creation)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._rule = rule
        else:
            out.requires_grad = False
            out._parents = ()
            out._rule = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; all of these route through the primitives below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(other, self)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis: int | None = None):
        return sum_(self, axis)

    def mean(self, axis: int | None = None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if a.ndim == 0:
        return sb
    if b.ndim == 0:
        return sa
    if a.ndim < b.ndim and sb[b.ndim - a.ndim:] == sa:
        return sb
    if b.ndim < a.ndim and sa[a.ndim - b.ndim:] == sb:
        return sa
    raise DimensionError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.sum(axis=tuple(range(g.ndim - len(shape))))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub"
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul_elementwise")
    ad, bd = a.data, b.data

    def rule(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._result(ad * bd, (a, b), rule, "mul_elementwise")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,), "scalar_mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` over the last two axes.

    ``b`` is either a 2-d matrix shared by every leading index of ``a`` or
    has exactly the same leading (batch) axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ in {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            k, m = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, m)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor._result(ad @ bd, (a, b), rule, "matmul")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError(f"log: non-positive entry (min {a.data.min()!r}) in tensor of shape {a.shape}")
    ad = a.data
    return Tensor._result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_lastdim(a: Tensor) -> Tensor:
    if a.ndim == 0:
        raise DimensionError("softmax_lastdim: needs at least one axis")
    s = _softmax(a.data)

    def rule(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._result(s, (a,), rule, "softmax_lastdim")


def log_softmax_lastdim(a: Tensor) -> Tensor:
    if a.ndim == 0:
        raise DimensionError("log_softmax_lastdim: needs at least one axis")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    s = np.exp(out)

    def rule(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return Tensor._result(out, (a,), rule, "log_softmax_lastdim")


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        return Tensor._result(
            np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum"
        )
    ax = axis % a.ndim

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return Tensor._result(a.data.sum(axis=ax), (a,), rule, "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return scalar_mul(sum_(a, axis), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from exc
    orig = a.shape
    return Tensor._result(out, (a,), lambda g: (g.reshape(orig),), "reshape")


def _check_basic_index(index) -> tuple:
    if not isinstance(index, tuple):
        index = (index,)
    for item in index:
        if not (item is Ellipsis or item is None or isinstance(item, (int, np.integer, slice))):
            raise ContractError(f"slice: only basic indexing is supported, got {type(item).__name__}")
    return index


def slice_(a: Tensor, index) -> Tensor:
    index = _check_basic_index(index)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise DimensionError(f"slice: index {index!r} out of range for shape {a.shape}") from exc
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return Tensor._result(np.array(out), (a,), rule, "slice")


def concat_lastdim(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat_lastdim: no inputs")
    lead = tensors[0].shape[:-1]
    for t in tensors:
        if t.ndim == 0 or t.shape[:-1] != lead:
            raise DimensionError(
                f"concat_lastdim: leading axes disagree: {[t.shape for t in tensors]}"
            )
    widths = np.cumsum([t.shape[-1] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, widths, axis=-1))

    return Tensor._result(
        np.concatenate([t.data for t in tensors], axis=-1), tensors, rule, "concat_lastdim"
    )


def transpose_last2(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise DimensionError(f"transpose_last2: needs >= 2 axes, got shape {a.shape}")
    return Tensor._result(
        np.swapaxes(a.data, -1, -2).copy(), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose_last2"
    )


def dropout_mask_apply(a: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a precomputed inverted-dropout mask (entries 0 or 1/(1-p))."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != a.shape:
        raise DimensionError(f"dropout_mask_apply: mask {mask.shape} vs input {a.shape}")
    return Tensor._result(a.data * mask, (a,), lambda g: (g * mask,), "dropout_mask_apply")


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean, unit variance (no affine)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def rule(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return Tensor._result(xhat, (a,), rule, "layer_norm")


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul_elementwise": mul,
    "scalar_mul": scalar_mul,
    "exp": exp,
    "log": log,
    "softmax_lastdim": softmax_lastdim,
    "log_softmax_lastdim": log_softmax_lastdim,
    "sum": sum_,
    "mean": mean,
    "reshape": reshape,
    "slice": slice_,
    "concat_lastdim": lambda *ts: concat_lastdim(ts),
    "transpose_last2": transpose_last2,
    "relu": relu,
    "dropout_mask_apply": dropout_mask_apply,
    "layer_norm": layer_norm,
}


def apply_primitive(op_kind: str, inputs: Sequence, *args) -> Tensor:
    """Dispatch by name; non-tensor arguments (axis, shape, mask...) follow ``inputs``."""
    try:
        fn = PRIMITIVES[op_kind]
    except KeyError:
        raise ContractError(f"unknown primitive {op_kind!r}; known: {sorted(PRIMITIVES)}") from None
    return fn(*inputs, *args)


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(.) to every reachable tensor that requires grad.

    Returns a map from tensor to gradient buffer.  With ``params`` given the
    map holds exactly those tensors, zero-filled where unreachable;
    otherwise it holds every reachable leaf with ``requires_grad``.  Leaf
    ``.grad`` fields are overwritten.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward: loss must be scalar-shaped, got {loss.shape}")

    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node._parents)
    nodes.sort(key=lambda n: n._order, reverse=True)

    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in nodes:
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._rule is None:
            if node.requires_grad:
                leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg

    for leaf, g in leaves.items():
        leaf.grad = g
    if params is None:
        return leaves
    out = {}
    for p in params:
        g = leaves.get(p)
        if g is None:
            g = np.zeros(p.shape)
            p.grad = g
        out[p] = g
    return out


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-6) -> float:
    """Max relative error between ``backward`` and central differences of ``f`` at ``x``.

    Error per coordinate is ``|a - n| / (|a| + |n| + 1e-12)``.  ``x`` is
    perturbed in place and restored.
    """
    was = x.requires_grad
    x.requires_grad = True
    try:
        analytic = backward(f(x), [x])[x].reshape(-1)
        flat = x.data.reshape(-1)
        numeric = np.empty_like(analytic)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = f(x).item()
                flat[i] = orig - step
                fm = f(x).item()
                flat[i] = orig
                numeric[i] = (fp - fm) / (2.0 * step)
    finally:
        x.requires_grad = was
    if analytic.size == 0:
        return 0.0
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(np.max(err))
