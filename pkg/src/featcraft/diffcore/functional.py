"""First- and second-order derivative helpers on top of the tape."""

from __future__ import annotations

from collections.abc import Callable

import numpy as np

from .tensor import Var, as_var, gradients, mul, sum

__all__ = ["grad", "hvp", "mixed_vhp", "HessianOperator"]


def _scalar(out: Var) -> Var:
    if out.size != 1:
        raise ValueError(f"function must return a scalar, got shape {out.shape}")
    return out


def _leaf(x) -> Var:
    if isinstance(x, Var) and x.requires_grad:
        return x
    return Var(np.array(as_var(x).data), requires_grad=True)


def grad(f: Callable[[Var], Var], x, create_graph: bool = False):
    """Gradient of scalar ``f`` at ``x``.

    If ``x`` is a plain array the result is an array.  If ``x`` is a Var that
    already requires grad, the result is a Var, taped when ``create_graph``.
    """
    xv = _leaf(x)
    (g,) = gradients(_scalar(f(xv)), [xv], create_graph=create_graph)
    return g if isinstance(x, Var) and x is xv else g.data


def hvp(f: Callable[[Var], Var], x, v) -> np.ndarray:
    """Hessian-vector product, as the gradient of ``<grad f(x), v>``."""
    v = np.asarray(v, dtype=np.float64)
    xv = _leaf(x)
    if v.shape != xv.shape:
        raise ValueError(f"v shape {v.shape} != x shape {xv.shape}")
    (g,) = gradients(_scalar(f(xv)), [xv], create_graph=True)
    (h,) = gradients(g, [xv], grad_output=v)
    return h.data


def mixed_vhp(f: Callable[[Var, Var], Var], x, y, v) -> np.ndarray:
    """``v^T d2f/dx dy``: the gradient in ``y`` of ``<df/dx, v>``."""
    v = np.asarray(v, dtype=np.float64)
    xv, yv = _leaf(x), _leaf(y)
    if v.shape != xv.shape:
        raise ValueError(f"v shape {v.shape} != x shape {xv.shape}")
    (g,) = gradients(_scalar(f(xv, yv)), [xv], create_graph=True)
    (h,) = gradients(g, [yv], grad_output=v)
    return h.data


class HessianOperator:
    """Reusable products with the Hessian and mixed partials of one scalar.

    The first-order gradient graph of ``loss`` with respect to ``x`` is built
    once; every product then costs a single backward sweep over that graph.
    This is what the Neumann loop in the crafter calls repeatedly.
    """

    def __init__(self, loss: Var, x: Var, others: tuple[Var, ...] = ()):
        self.x = x
        self.others = others
        (self.grad_x,) = gradients(_scalar(loss), [x], create_graph=True)

    def hvp(self, v: np.ndarray) -> np.ndarray:
        (h,) = gradients(self.grad_x, [self.x], grad_output=v)
        return h.data

    def mixed(self, v: np.ndarray) -> list[np.ndarray]:
        """``v^T d2L/dx d(other)`` for each of ``others``."""
        return [g.data for g in gradients(self.grad_x, list(self.others), grad_output=v)]

    def inner(self, v: np.ndarray) -> Var:
        return sum(mul(self.grad_x, v))
