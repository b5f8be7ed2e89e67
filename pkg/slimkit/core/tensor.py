"""
Dense float64 tensor primitives

Every tensor is a row-major `np.ndarray` of dtype float64. Functions here
are pure: they never mutate their inputs.
"""
import math
from typing import Optional, Tuple

import numpy as np

from ..utils.errors import DimensionError

Tensor = np.ndarray
Rng = np.random.Generator

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


def as_tensor(x) -> Tensor:
    return np.ascontiguousarray(x, dtype=np.float64)


def make_rng(seed: int, stream: int = 0) -> Rng:
    """PCG64 stream; identical for a given (seed, stream) on every platform"""
    bits = np.random.PCG64(seed)
    if stream:
        bits = bits.jumped(stream)
    return np.random.Generator(bits)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise DimensionError("matmul", "2-D left and 1-D/2-D right operand", (a.shape, b.shape))
    if a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", f"inner extent {a.shape[1]}", b.shape[0])
    return a @ b


def _check_scan(op: str, z: Tensor, init: Optional[Tensor]) -> None:
    if z.ndim == 0 or z.shape[0] == 0:
        raise DimensionError(op, "first extent >= 1", z.shape)
    if init is not None and init.shape != z.shape[1:]:
        raise DimensionError(op, f"init of shape {z.shape[1:]}", init.shape)


def prefix_sum(z: Tensor, init: Optional[Tensor] = None) -> Tensor:
    """
    Inclusive scan along the first axis

    With `init`, row i is init + z[0] + ... + z[i], accumulated left to
    right starting from init (the running-front order).
    """
    _check_scan("prefix_sum", z, init)
    if init is None:
        return np.cumsum(z, axis=0)
    return np.cumsum(np.concatenate([init[None], z], axis=0), axis=0)[1:]


def suffix_sum(z: Tensor, init: Optional[Tensor] = None) -> Tensor:
    """Reverse inclusive scan: row i is init + z[i] + ... + z[-1]; adjoint of prefix_sum"""
    _check_scan("suffix_sum", z, init)
    flipped = z[::-1]
    if init is None:
        out = np.cumsum(flipped, axis=0)
    else:
        out = np.cumsum(np.concatenate([init[None], flipped], axis=0), axis=0)[1:]
    return np.ascontiguousarray(out[::-1])


def layer_norm_parts(x: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tuple[Tensor, Tensor, Tensor]:
    """Returns (output, normalized rows, reciprocal std per row)"""
    if x.ndim != 2 or x.shape[1] < 1:
        raise DimensionError("layer_norm", "L x d with d >= 1", x.shape)
    if gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise DimensionError("layer_norm", f"gain/bias of shape ({x.shape[1]},)", (gain.shape, bias.shape))
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    return layer_norm_parts(x, gain, bias, eps)[0]


def gelu(x: Tensor) -> Tensor:
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x ** 3)))


def gelu_grad(x: Tensor) -> Tensor:
    t = np.tanh(GELU_C * (x + GELU_A * x ** 3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)


def outer_rows(v: Tensor, k: Tensor) -> Tensor:
    """Row l is the flattened outer product v_l k_l^T (row-major in v's axis)"""
    if v.ndim != 2 or k.ndim != 2 or v.shape[0] != k.shape[0]:
        raise DimensionError("outer_rows", "B x d and B x M", (v.shape, k.shape))
    return (v[:, :, None] * k[:, None, :]).reshape(v.shape[0], -1)


def row_matvec(r: Tensor, q: Tensor) -> Tensor:
    """Row l is R_l q_l with R_l the l-th row of r viewed as d x M"""
    if r.ndim != 2 or q.ndim != 2 or r.shape[0] != q.shape[0] or r.shape[1] % q.shape[1]:
        raise DimensionError("row_matvec", "B x (d*M) and B x M", (r.shape, q.shape))
    r3 = r.reshape(r.shape[0], -1, q.shape[1])
    return np.einsum("bim,bm->bi", r3, q)


def row_dot(s: Tensor, q: Tensor) -> Tensor:
    if s.shape != q.shape or s.ndim != 2:
        raise DimensionError("row_dot", "two B x M operands", (s.shape, q.shape))
    return np.einsum("bm,bm->b", s, q)


def guarded_div(n: Tensor, den: Tensor, floor: float) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Rowwise n / den with den clamped from below at `floor`

    Returns (quotient, clamped denominators, clamp mask).
    """
    if n.ndim != 2 or den.shape != (n.shape[0],):
        raise DimensionError("guarded_div", f"denominator of shape ({n.shape[0]},)", den.shape)
    clamped = den < floor
    safe = np.where(clamped, floor, den)
    return n / safe[:, None], safe, clamped


def log_softmax(z: Tensor) -> Tensor:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
