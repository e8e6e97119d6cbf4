"""Reverse-mode autodiff over float64 numpy arrays.

Every vector-Jacobian product is itself written with :class:`Var` operations,
so running :func:`gradients` with ``create_graph=True`` records the backward
pass on the tape and the result can be differentiated again.  That is all the
machinery Hessian-vector and mixed second-derivative products need.
"""

from __future__ import annotations

import contextlib
from collections.abc import Callable, Sequence

import numpy as np

__all__ = [
    "Var",
    "NumericError",
    "as_var",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "gradients",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "sum",
    "mean",
    "broadcast_to",
    "sum_to",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "softplus",
    "relu",
    "leaky_relu",
    "sqrt",
    "square",
    "power",
    "take_rows",
    "concat",
    "row_norm",
    "logsumexp",
    "log_softmax",
]

_GRAD_ENABLED = True


class NumericError(FloatingPointError):
    """A forward or backward operation produced NaN or Inf."""


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def _grad_mode(flag: bool):
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = flag
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def no_grad():
    """Context manager that stops ops from being recorded."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Var:
    """A node on the tape: an array plus how to pull gradients back to parents."""

    __slots__ = ("data", "parents", "vjp", "requires_grad", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents: tuple[Var, ...] = ()
        self.vjp = None
        self.requires_grad = requires_grad
        self.op = "leaf"

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
    def T(self) -> Var:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Var:
        return Var(self.data)

    def reshape(self, *shape) -> Var:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> Var:
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Var:
        return mean(self, axis, keepdims)

    def __repr__(self) -> str:
        return f"Var(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        return power(self, p)

    def __getitem__(self, idx):
        return take_rows(self, idx)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _node(data: np.ndarray, parents: tuple, vjp: Callable, op: str) -> Var:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite value produced by op '{op}'")
    out = Var(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.parents = parents
        out.vjp = vjp
        out.requires_grad = True
        out.op = op
    else:
        out.op = op
    return out


def _unbroadcast(g: Var, shape: tuple[int, ...]) -> Var:
    if g.shape == shape:
        return g
    return sum_to(g, shape)


# -- binary arithmetic ---------------------------------------------------


def _add_vjp(g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _node(a.data + b.data, (a, b), _add_vjp, "add")


def _sub_vjp(g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _node(a.data - b.data, (a, b), _sub_vjp, "sub")


def _mul_vjp(g, out, a, b):
    ga = _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None
    gb = _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None
    return ga, gb


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _node(a.data * b.data, (a, b), _mul_vjp, "mul")


def _div_vjp(g, out, a, b):
    ga = _unbroadcast(div(g, b), a.shape) if a.requires_grad else None
    gb = None
    if b.requires_grad:
        gb = _unbroadcast(neg(mul(g, div(out, b))), b.shape)
    return ga, gb


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _node(a.data / b.data, (a, b), _div_vjp, "div")


def _neg_vjp(g, out, a):
    return (neg(g),)


def neg(a) -> Var:
    a = as_var(a)
    return _node(-a.data, (a,), _neg_vjp, "neg")


def _matmul_vjp(g, out, a, b):
    ga = matmul(g, transpose(b)) if a.requires_grad else None
    gb = matmul(transpose(a), g) if b.requires_grad else None
    return ga, gb


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    return _node(a.data @ b.data, (a, b), _matmul_vjp, "matmul")


# -- shape ops -----------------------------------------------------------


def _transpose_vjp(g, out, a):
    return (transpose(g),)


def transpose(a) -> Var:
    a = as_var(a)
    return _node(a.data.T, (a,), _transpose_vjp, "transpose")


def _reshape_vjp(g, out, a):
    return (reshape(g, a.shape),)


def reshape(a, shape) -> Var:
    a = as_var(a)
    return _node(a.data.reshape(shape), (a,), _reshape_vjp, "reshape")


def _broadcast_vjp(g, out, a):
    return (sum_to(g, a.shape),)


def broadcast_to(a, shape) -> Var:
    a = as_var(a)
    return _node(np.broadcast_to(a.data, shape).copy(), (a,), _broadcast_vjp, "broadcast_to")


def _sum_to_vjp(g, out, a):
    return (broadcast_to(g, a.shape),)


def _sum_to_array(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and x.shape[i + lead] != 1
    )
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    return x.reshape(shape)


def sum_to(a, shape) -> Var:
    """Sum ``a`` down to ``shape`` (the adjoint of broadcasting)."""
    a = as_var(a)
    shape = tuple(shape)
    return _node(_sum_to_array(a.data, shape), (a,), _sum_to_vjp, "sum_to")


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _sum_vjp_factory(axes, keepdims):
    def vjp(g, out, a):
        if not keepdims:
            kshape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
            g = reshape(g, kshape)
        return (broadcast_to(g, a.shape),)

    return vjp


def sum(a, axis=None, keepdims: bool = False) -> Var:  # noqa: A001
    a = as_var(a)
    axes = _normalize_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)
    return _node(np.asarray(data), (a,), _sum_vjp_factory(axes, keepdims), "sum")


def mean(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    axes = _normalize_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axes, keepdims), 1.0 / n)


def _take_vjp_factory(idx):
    def vjp(g, out, a):
        return (_scatter_rows(g, idx, a.shape),)

    return vjp


def take_rows(a, idx) -> Var:
    """Numpy-style indexing ``a[idx]``; gradients scatter-add back."""
    a = as_var(a)
    return _node(np.array(a.data[idx]), (a,), _take_vjp_factory(idx), "index")


def _scatter_vjp_factory(idx):
    def vjp(g, out, a):
        return (take_rows(g, idx),)

    return vjp


def _scatter_rows(a: Var, idx, shape) -> Var:
    data = np.zeros(shape)
    np.add.at(data, idx, a.data)
    return _node(data, (a,), _scatter_vjp_factory(idx), "scatter")


def concat(items: Sequence, axis: int = 0) -> Var:
    items = [as_var(x) for x in items]
    axis = axis % items[0].ndim
    bounds = np.cumsum([0] + [x.shape[axis] for x in items])

    def vjp(g, out, *parents):
        grads = []
        for k, p in enumerate(parents):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(bounds[k]), int(bounds[k + 1]))
            grads.append(take_rows(g, tuple(sl)) if p.requires_grad else None)
        return tuple(grads)

    data = np.concatenate([x.data for x in items], axis=axis)
    return _node(data, tuple(items), vjp, "concat")


# -- elementwise ---------------------------------------------------------


def _exp_vjp(g, out, a):
    return (mul(g, out),)


def exp(a) -> Var:
    a = as_var(a)
    return _node(np.exp(a.data), (a,), _exp_vjp, "exp")


def _log_vjp(g, out, a):
    return (div(g, a),)


def log(a) -> Var:
    a = as_var(a)
    return _node(np.log(a.data), (a,), _log_vjp, "log")


def _tanh_vjp(g, out, a):
    return (mul(g, sub(1.0, square(out))),)


def tanh(a) -> Var:
    a = as_var(a)
    return _node(np.tanh(a.data), (a,), _tanh_vjp, "tanh")


def _sigmoid_array(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def _sigmoid_vjp(g, out, a):
    return (mul(g, mul(out, sub(1.0, out))),)


def sigmoid(a) -> Var:
    a = as_var(a)
    return _node(_sigmoid_array(a.data), (a,), _sigmoid_vjp, "sigmoid")


def _softplus_vjp(g, out, a):
    return (mul(g, sigmoid(a)),)


def softplus(a) -> Var:
    a = as_var(a)
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _node(data, (a,), _softplus_vjp, "softplus")


def _mask_vjp_factory(mask):
    def vjp(g, out, a):
        return (mul(g, mask),)

    return vjp


def relu(a) -> Var:
    a = as_var(a)
    mask = (a.data > 0).astype(np.float64)
    return _node(a.data * mask, (a,), _mask_vjp_factory(mask), "relu")


def leaky_relu(a, slope: float = 0.2) -> Var:
    a = as_var(a)
    mask = np.where(a.data > 0, 1.0, slope)
    return _node(a.data * mask, (a,), _mask_vjp_factory(mask), "leaky_relu")


def _sqrt_vjp(g, out, a):
    return (div(mul(g, 0.5), out),)


def sqrt(a) -> Var:
    a = as_var(a)
    return _node(np.sqrt(a.data), (a,), _sqrt_vjp, "sqrt")


def _square_vjp(g, out, a):
    return (mul(g, mul(a, 2.0)),)


def square(a) -> Var:
    a = as_var(a)
    return _node(a.data * a.data, (a,), _square_vjp, "square")


def power(a, p: float) -> Var:
    a = as_var(a)

    def vjp(g, out, x):
        return (mul(g, mul(power(x, p - 1), float(p))),)

    return _node(a.data**p, (a,), vjp, "power")


def row_norm(a) -> Var:
    """Euclidean norm of each row of a 2-D array.

    The gradient at a zero row is taken as zero (the minimal-norm subgradient),
    so the norm can be evaluated exactly where it is not differentiable.
    """
    a = as_var(a)
    n = np.sqrt((a.data * a.data).sum(axis=1))
    inv = np.where(n > 0, 1.0 / np.where(n > 0, n, 1.0), 0.0)[:, None]

    def vjp(g, out, x):
        return (mul(mul(reshape(g, (-1, 1)), inv), x),)

    return _node(n, (a,), vjp, "row_norm")


def logsumexp(a, axis: int = -1) -> Var:
    a = as_var(a)
    shift = Var(a.data.max(axis=axis, keepdims=True))
    s = sum(exp(sub(a, shift)), axis=axis, keepdims=True)
    return add(log(s), shift)


def log_softmax(a, axis: int = -1) -> Var:
    a = as_var(a)
    return sub(a, logsumexp(a, axis))


# -- gradient engine -----------------------------------------------------


def _topo_order(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def gradients(
    output: Var,
    inputs: Sequence[Var],
    grad_output=None,
    create_graph: bool = False,
) -> list[Var]:
    """Vector-Jacobian product of ``output`` with respect to each of ``inputs``.

    ``grad_output`` defaults to ones for a scalar output and is required
    otherwise.  With ``create_graph=True`` the backward pass is itself taped,
    so the returned Vars can be differentiated again.  Inputs the output does
    not depend on receive zeros.
    """
    if grad_output is None:
        if output.size != 1:
            raise ValueError(
                f"gradients of a non-scalar output (shape {output.shape}) need grad_output"
            )
        grad_output = Var(np.ones(output.shape))
    else:
        grad_output = as_var(grad_output)
        if grad_output.shape != output.shape:
            raise ValueError(
                f"grad_output shape {grad_output.shape} != output shape {output.shape}"
            )

    wanted = {id(x) for x in inputs}
    grads: dict[int, Var] = {}
    if output.requires_grad:
        grads[id(output)] = grad_output
        with _grad_mode(create_graph):
            for node in reversed(_topo_order(output)):
                g = grads.get(id(node)) if id(node) in wanted else grads.pop(id(node), None)
                if g is None or node.vjp is None:
                    continue
                parent_grads = node.vjp(g, node, *node.parents)
                for p, pg in zip(node.parents, parent_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    key = id(p)
                    prev = grads.get(key)
                    grads[key] = pg if prev is None else add(prev, pg)
    elif id(output) in wanted:
        grads[id(output)] = grad_output

    result = []
    for x in inputs:
        g = grads.get(id(x))
        if g is None:
            g = Var(np.zeros(x.shape))
        elif not create_graph:
            g = g.detach()
        result.append(g)
    return result
