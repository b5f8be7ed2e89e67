from dataclasses import dataclass

import numpy as np

from ..model.params import Params
from ..utils.errors import DimensionError


@dataclass
class AdamState:
    """Moment estimates over the flat parameter vector"""
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n_param: int, lr: float = 1e-3, **kwargs) -> "AdamState":
        return cls(np.zeros(n_param), np.zeros(n_param), lr=lr, **kwargs)


def adam_step(state: AdamState, params: Params, grad: np.ndarray) -> Params:
    """
    One bias-corrected Adam update; advances `state` in place

    param -= (lr / bc1) * m / (sqrt(v / bc2) + eps)
    """
    if grad.shape != state.m.shape or grad.shape != (params.n_param,):
        raise DimensionError("adam_step", state.m.shape, grad.shape)
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t

    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (grad * grad)

    denom = np.sqrt(state.v * (1.0 / bc2)) + state.eps
    flat = params.flatten() - (state.lr / bc1) * state.m / denom
    return Params.unflatten(params.config, flat)
