"""Adam and RMSProp with explicit, inspectable state."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["AdamState", "RmsPropState", "adam_step", "rmsprop_step", "Adam", "RMSProp"]


@dataclass
class AdamState:
    shape: tuple[int, ...]
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.shape = tuple(self.shape)
        if self.m is None:
            self.m = np.zeros(self.shape)
        if self.v is None:
            self.v = np.zeros(self.shape)


@dataclass
class RmsPropState:
    shape: tuple[int, ...]
    lr: float = 1e-3
    alpha: float = 0.99
    eps: float = 1e-8
    sq_avg: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.shape = tuple(self.shape)
        if self.sq_avg is None:
            self.sq_avg = np.zeros(self.shape)


def _check(shape, param, g):
    if param.shape != shape or g.shape != shape:
        raise ValueError(f"shape mismatch: state {shape}, param {param.shape}, grad {g.shape}")


def adam_step(state: AdamState, param: np.ndarray, g: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update; mutates ``state`` and returns the new parameter."""
    param = np.asarray(param, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    _check(state.shape, param, g)
    b1, b2 = state.betas
    state.t += 1
    state.m = b1 * state.m + (1.0 - b1) * g
    state.v = b2 * state.v + (1.0 - b2) * g * g
    m_hat = state.m / (1.0 - b1**state.t)
    v_hat = state.v / (1.0 - b2**state.t)
    return param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def rmsprop_step(state: RmsPropState, param: np.ndarray, g: np.ndarray) -> np.ndarray:
    param = np.asarray(param, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    _check(state.shape, param, g)
    state.sq_avg = state.alpha * state.sq_avg + (1.0 - state.alpha) * g * g
    return param - state.lr * g / (np.sqrt(state.sq_avg) + state.eps)


class Adam:
    """Adam over a dict of named parameter arrays, updated in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.states = {k: AdamState(p.shape, lr=lr, betas=betas, eps=eps) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for k, g in grads.items():
            self.params[k][...] = adam_step(self.states[k], self.params[k], g)


class RMSProp:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, alpha: float = 0.99, eps=1e-8):
        self.params = params
        self.states = {k: RmsPropState(p.shape, lr=lr, alpha=alpha, eps=eps) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for k, g in grads.items():
            self.params[k][...] = rmsprop_step(self.states[k], self.params[k], g)
