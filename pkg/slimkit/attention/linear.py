"""
Causal linear self-attention kernels

Four evaluations of the same map, for one head:

- attn_exp_oracle: softmax attention, quadratic, oracle only
- attn_linear_direct: weights g(K_l')^T g(Q_l) summed explicitly per row
- attn_linear_ps: R = PS(V x g(K)^T), S = PS(g(K)), Y_l = R_l g(Q_l) / S_l^T g(Q_l)
- attn_block_forward / attn_block_backward: the same prefix sums taken a
  block at a time from a running front (curR, curS), so only a block-sized
  workspace is ever materialized. Registered on the tape as "attn_block".

Front rows use the layout [curS (M), curR flattened row-major (d*M)], the
same order the performer packs T rows in.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from ..core import autograd as ag
from ..core import tensor as T
from ..core.instrument import AllocStats, current_stats
from ..utils.errors import ConfigError, DimensionError

log = logging.getLogger(__name__)

DENOM_FLOOR = 1e-16
DEFAULT_BLOCK_SIZE = 64


@dataclass(frozen=True)
class FeatureMap:
    """g: R^d -> R^M_+ applied rowwise. Only the elementwise square is implemented."""
    kind: str = "square"

    def __post_init__(self):
        if self.kind == "exp":
            raise ConfigError("feature map 'exp' is reserved and not implemented")
        if self.kind != "square":
            raise ConfigError(f"unknown feature map: {self.kind!r}")

    def output_dim(self, d: int) -> int:
        return d


def feature_map_apply(g: FeatureMap, x: np.ndarray) -> np.ndarray:
    return x * x


@dataclass
class AttentionFront:
    cur_r: np.ndarray
    cur_s: np.ndarray
    grad_r: np.ndarray = None
    grad_s: np.ndarray = None

    def __post_init__(self):
        if self.grad_r is None:
            self.grad_r = np.zeros_like(self.cur_r)
        if self.grad_s is None:
            self.grad_s = np.zeros_like(self.cur_s)

    @classmethod
    def zeros(cls, d: int, m: int) -> "AttentionFront":
        return cls(np.zeros((d, m)), np.zeros(m))

    @classmethod
    def from_flat(cls, flat: np.ndarray, d: int, m: int, grad: Optional[np.ndarray] = None) -> "AttentionFront":
        if flat.shape != (m + d * m,):
            raise DimensionError("AttentionFront", (m + d * m,), flat.shape)
        front = cls(flat[m:].reshape(d, m).copy(), flat[:m].copy())
        if grad is not None:
            front.grad_s = grad[:m].copy()
            front.grad_r = grad[m:].reshape(d, m).copy()
        return front

    def flat(self) -> np.ndarray:
        return np.concatenate([self.cur_s, self.cur_r.ravel()])

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([self.grad_s, self.grad_r.ravel()])


@dataclass
class AttnBlockOutput:
    y: np.ndarray
    n: np.ndarray
    d: np.ndarray
    clamped: np.ndarray = field(default=None, repr=False)


@dataclass
class AttnBlockWorkspace:
    """Per-block temporaries; extent is the block size, never the sequence length"""
    block_r: np.ndarray
    block_s: np.ndarray
    block_grad_r: np.ndarray
    block_grad_s: np.ndarray
    block_size: int

    @classmethod
    def allocate(cls, block_size: int, d: int, m: int, backward: bool = False) -> "AttnBlockWorkspace":
        grad_c = block_size if backward else 0
        return cls(
            block_r=np.empty((block_size, d, m)),
            block_s=np.empty((block_size, m)),
            block_grad_r=np.empty((grad_c, d, m)),
            block_grad_s=np.empty((grad_c, m)),
            block_size=block_size,
        )

    @property
    def nbytes(self) -> int:
        return self.block_r.nbytes + self.block_s.nbytes + self.block_grad_r.nbytes + self.block_grad_s.nbytes


def _check_qkv(op: str, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> None:
    if q.ndim != 2 or q.shape != k.shape or v.ndim != 2 or v.shape[0] != q.shape[0]:
        raise DimensionError(op, "Q, K of equal shape B x M and V of shape B x d", (q.shape, k.shape, v.shape))
    if q.shape[0] == 0:
        raise DimensionError(op, "at least one row", q.shape)


def _guard(n: np.ndarray, den: np.ndarray, floor: float, stats: Optional[AllocStats]) -> AttnBlockOutput:
    y, safe, clamped = T.guarded_div(n, den, floor)
    count = int(clamped.sum())
    if count:
        (stats if stats is not None else current_stats()).clamped(count)
        log.debug("clamped %d attention denominators", count)
    return AttnBlockOutput(y=y, n=n, d=safe, clamped=clamped)


def attn_exp_weights(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Lower-triangular causal softmax weights, stabilized by the row max"""
    length = q.shape[0]
    scores = q @ k.T
    mask = np.tril(np.ones((length, length), dtype=bool))
    scores = np.where(mask, scores, -np.inf)
    scores = scores - scores.max(axis=1, keepdims=True)
    w = np.where(mask, np.exp(scores), 0.0)
    return w / w.sum(axis=1, keepdims=True)


def attn_exp_oracle(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    _check_qkv("attn_exp_oracle", q, k, v)
    return attn_exp_weights(q, k) @ v


def attn_linear_direct(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    g: FeatureMap = FeatureMap(),
    floor: float = DENOM_FLOOR,
    stats: Optional[AllocStats] = None,
) -> np.ndarray:
    _check_qkv("attn_linear_direct", q, k, v)
    qf, kf = feature_map_apply(g, q), feature_map_apply(g, k)
    n = np.empty((q.shape[0], v.shape[1]))
    den = np.empty(q.shape[0])
    for l in range(q.shape[0]):
        w = kf[: l + 1] @ qf[l]
        n[l] = w @ v[: l + 1]
        den[l] = w.sum()
    return _guard(n, den, floor, stats).y


def attn_linear_ps(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    g: FeatureMap = FeatureMap(),
    floor: float = DENOM_FLOOR,
    stats: Optional[AllocStats] = None,
) -> np.ndarray:
    _check_qkv("attn_linear_ps", q, k, v)
    qf, kf = feature_map_apply(g, q), feature_map_apply(g, k)
    r = T.prefix_sum(T.outer_rows(v, kf))
    s = T.prefix_sum(kf)
    return _guard(T.row_matvec(r, qf), T.row_dot(s, qf), floor, stats).y


def _blocks(length: int, block_size: int):
    for start in range(0, length, block_size):
        yield start, min(start + block_size, length)


def attn_block_forward(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    front: Optional[AttentionFront] = None,
    block_size: int = DEFAULT_BLOCK_SIZE,
    floor: float = DENOM_FLOOR,
    stats: Optional[AllocStats] = None,
) -> Tuple[AttnBlockOutput, AttentionFront]:
    """
    Block-iterative forward over one segment

    `q` and `k` are already feature-mapped. The returned front is the input
    front advanced by the whole segment, so consecutive calls continue one
    another exactly.
    """
    _check_qkv("attn_block_forward", q, k, v)
    if block_size < 1:
        raise ConfigError(f"block size must be >= 1, got {block_size}")
    length, m = q.shape
    d = v.shape[1]
    if front is None:
        front = AttentionFront.zeros(d, m)
    if front.cur_r.shape != (d, m) or front.cur_s.shape != (m,):
        raise DimensionError("attn_block_forward", f"front of shape ({d}, {m}) / ({m},)", (front.cur_r.shape, front.cur_s.shape))

    stats = stats if stats is not None else current_stats()
    ws = AttnBlockWorkspace.allocate(min(block_size, length), d, m)
    n = np.empty((length, d))
    den = np.empty(length)
    cur_r = front.cur_r.copy()
    cur_s = front.cur_s.copy()
    with stats.workspace(ws.nbytes):
        for start, stop in _blocks(length, ws.block_size):
            b = stop - start
            block_r, block_s = ws.block_r[:b], ws.block_s[:b]
            block_r[...] = T.prefix_sum(v[start:stop, :, None] * k[start:stop, None, :], cur_r)
            block_s[...] = T.prefix_sum(k[start:stop], cur_s)
            cur_r[...] = block_r[-1]
            cur_s[...] = block_s[-1]
            n[start:stop] = np.einsum("bim,bm->bi", block_r, q[start:stop])
            den[start:stop] = np.einsum("bm,bm->b", block_s, q[start:stop])

    out = _guard(n, den, floor, stats)
    return out, AttentionFront(cur_r, cur_s, front.grad_r.copy(), front.grad_s.copy())


def attn_block_backward(
    grad_n: np.ndarray,
    grad_d: np.ndarray,
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    front_after: AttentionFront,
    block_size: int = DEFAULT_BLOCK_SIZE,
    stats: Optional[AllocStats] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, AttentionFront]:
    """
    Reverse block iteration

    `front_after` is the front at the end of the forward segment; its
    grad_r/grad_s hold the upstream gradient of that final front (zero when
    the front is not used downstream). The returned front is rewound to the
    segment start and carries the gradient with respect to it.
    """
    _check_qkv("attn_block_backward", q, k, v)
    length, m = q.shape
    d = v.shape[1]
    if grad_n.shape != (length, d) or grad_d.shape != (length,):
        raise DimensionError("attn_block_backward", f"({length}, {d}) and ({length},)", (grad_n.shape, grad_d.shape))

    stats = stats if stats is not None else current_stats()
    ws = AttnBlockWorkspace.allocate(min(block_size, length), d, m, backward=True)
    gq = np.empty_like(q)
    gk = np.empty_like(k)
    gv = np.empty_like(v)
    cur_r = front_after.cur_r.copy()
    cur_s = front_after.cur_s.copy()
    grad_r = front_after.grad_r.copy()
    grad_s = front_after.grad_s.copy()
    with stats.workspace(ws.nbytes):
        for start, stop in reversed(list(_blocks(length, ws.block_size))):
            b = stop - start
            qb, kb, vb = q[start:stop], k[start:stop], v[start:stop]
            gnb, gdb = grad_n[start:stop], grad_d[start:stop]
            block_r, block_s = ws.block_r[:b], ws.block_s[:b]
            block_grad_r, block_grad_s = ws.block_grad_r[:b], ws.block_grad_s[:b]

            block_r[...] = vb[:, :, None] * kb[:, None, :]
            cur_r -= block_r.sum(axis=0)
            cur_s -= kb.sum(axis=0)
            block_r[...] = T.prefix_sum(block_r, cur_r)
            block_s[...] = T.prefix_sum(kb, cur_s)
            gq[start:stop] = np.einsum("bim,bi->bm", block_r, gnb) + gdb[:, None] * block_s

            block_grad_r[...] = T.suffix_sum(gnb[:, :, None] * qb[:, None, :], grad_r)
            block_grad_s[...] = T.suffix_sum(gdb[:, None] * qb, grad_s)
            gv[start:stop] = np.einsum("bim,bm->bi", block_grad_r, kb)
            gk[start:stop] = np.einsum("bim,bi->bm", block_grad_r, vb) + block_grad_s
            grad_r = block_grad_r[0].copy()
            grad_s = block_grad_s[0].copy()

    return gq, gk, gv, AttentionFront(cur_r, cur_s, grad_r, grad_s)


# -- tape op ------------------------------------------------------------------

def _block_op_fwd(tape, values, attrs):
    q, k, v, front_flat = values
    d, m = v.shape[1], q.shape[1]
    front = AttentionFront.from_flat(front_flat, d, m)
    out, after = attn_block_forward(q, k, v, front, attrs["block_size"], attrs["floor"], stats=tape.stats)
    tape.clamp_events += int(out.clamped.sum())
    after_flat = after.flat()
    return (out.y, after_flat), (q, k, v, out.y, out.d, out.clamped, after_flat)


def _block_op_vjp(tape, saved, g, attrs):
    q, k, v, y, safe, clamped, after_flat = saved
    gy, gfront = g
    grad_n = gy / safe[:, None]
    grad_d = -(gy * y).sum(axis=1) / safe
    grad_d[clamped] = 0.0
    d, m = v.shape[1], q.shape[1]
    front = AttentionFront.from_flat(after_flat, d, m, grad=gfront)
    gq, gk, gv, before = attn_block_backward(grad_n, grad_d, q, k, v, front, attrs["block_size"], stats=tape.stats)
    return gq, gk, gv, before.flat_grad()


def _block_op_cost(values, out, attrs):
    q, _, v, _ = values
    length, m = q.shape
    d = v.shape[1]
    return length * (3 * d * m + 2 * m + d), length * (7 * d * m + 5 * m + 2 * d)


ag.register_op("attn_block", _block_op_fwd, _block_op_vjp, _block_op_cost)


def attn_block(
    q: ag.Var,
    k: ag.Var,
    v: ag.Var,
    front: ag.Var,
    block_size: int = DEFAULT_BLOCK_SIZE,
    floor: float = DENOM_FLOOR,
) -> Tuple[ag.Var, ag.Var]:
    """Record the block kernel; returns (Y, front after) as Vars"""
    out = q.tape.record("attn_block", q, k, v, front, block_size=block_size, floor=floor)
    return ag.item(out, 0), ag.item(out, 1)
