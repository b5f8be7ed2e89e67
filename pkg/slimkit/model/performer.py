"""
Performer language model in compact form

Each layer splits into a rowwise map F (features T and the per-row context
Gamma), a causal prefix sum over T seeded from a boundary row, and a
rowwise map G. The boundary row of layer r is the prefix-sum state entering
the current segment, so a chunk of tokens can be run on its own once the
boundary rows of every layer are known.

T row layout, per head ascending: g(K) (M entries) then the outer product
V g(K)^T flattened row-major in V's axis (d*M entries). Gamma row layout:
X, then g(Q) per head.
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from ..attention.linear import DENOM_FLOOR, attn_block
from ..core import autograd as ag
from ..core.autograd import Tape, Var
from ..core.instrument import current_ledger
from ..utils.errors import DimensionError, TokenError
from .config import ModelConfig
from .params import BoundParams, Params

log = logging.getLogger(__name__)

HeadFeatures = Tuple[Var, Var, Var]


def positional_encoding(positions: np.ndarray, d_model: int) -> np.ndarray:
    """sin on even channels, cos on odd, at absolute positions"""
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    channel = np.arange(d_model)
    freq = np.power(10000.0, -(channel - channel % 2) / d_model)
    angles = pos * freq
    return np.where(channel % 2 == 0, np.sin(angles), np.cos(angles))


def check_tokens(tokens: np.ndarray, vocab: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise DimensionError("tokens", "1-D token sequence", tokens.shape)
    bad = np.flatnonzero((tokens < 0) | (tokens >= vocab))
    if bad.size:
        pos = int(bad[0])
        raise TokenError(int(tokens[pos]), pos, vocab)
    return tokens.astype(np.int64)


def embed(bound: BoundParams, tokens: np.ndarray, offset: int = 0, length: Optional[int] = None) -> Var:
    """
    Token embedding plus positional encoding of the absolute positions offset..offset+length-1

    Tokens are validated once by the entry points (forward_full, slim_grad and friends).
    """
    cfg = bound.config
    tokens = np.asarray(tokens)
    if length is None:
        length = tokens.shape[0] - offset
    chunk = tokens[offset:offset + length]
    pe = positional_encoding(np.arange(offset, offset + length), cfg.d_model)
    return ag.add(ag.gather_rows(bound["tok_emb"], chunk), bound.tape.constant(pe))


def head_features(bound: BoundParams, r: int, x: Var) -> List[HeadFeatures]:
    """Per head (g(Q), g(K), V)"""
    feats = []
    for j in range(bound.config.heads):
        q = ag.matmul(x, bound.head(r, j, "w_q"))
        k = ag.matmul(x, bound.head(r, j, "w_k"))
        v = ag.matmul(x, bound.head(r, j, "w_v"))
        feats.append((ag.square(q), ag.square(k), v))
    return feats


def pack_features(x: Var, feats: Sequence[HeadFeatures]) -> Tuple[Var, Var]:
    t_parts, gamma_parts = [], [x]
    for q_feat, k_feat, v in feats:
        t_parts += [k_feat, ag.outer_rows(v, k_feat)]
        gamma_parts.append(q_feat)
    return ag.concat(t_parts), ag.concat(gamma_parts)


def layer_F(bound: BoundParams, r: int, x: Var) -> Tuple[Var, Var]:
    """X -> (T, Gamma), strictly rowwise"""
    return pack_features(x, head_features(bound, r, x))


def _tail(bound: BoundParams, r: int, att: Var, x: Var) -> Var:
    eps = bound.config.ln_eps
    h = ag.add(ag.layer_norm(att, bound.layer(r, "ln1.gain"), bound.layer(r, "ln1.bias"), eps), x)
    f = ag.add(ag.matmul(h, bound.layer(r, "ffn.w1")), bound.layer(r, "ffn.b1"))
    f = ag.add(ag.matmul(ag.gelu(f), bound.layer(r, "ffn.w2")), bound.layer(r, "ffn.b2"))
    return ag.add(ag.layer_norm(f, bound.layer(r, "ln2.gain"), bound.layer(r, "ln2.bias"), eps), h)


def layer_G(bound: BoundParams, r: int, u: Var, gamma: Var) -> Var:
    """(U, Gamma) -> next X: per-head attention read-out, LN + residual, FFN, LN + residual"""
    cfg = bound.config
    m, d, dm = cfg.feature_dim, cfg.head_dim, cfg.d_model
    x = ag.slice_last(gamma, 0, dm)
    heads = []
    for j in range(cfg.heads):
        base = j * cfg.head_width
        s = ag.slice_last(u, base, base + m)
        r_rows = ag.slice_last(u, base + m, base + m + d * m)
        q_feat = ag.slice_last(gamma, dm + j * m, dm + (j + 1) * m)
        heads.append(ag.guarded_div(ag.row_matvec(r_rows, q_feat), ag.row_dot(s, q_feat), DENOM_FLOOR))
    return _tail(bound, r, ag.concat(heads), x)


def layer_block(bound: BoundParams, r: int, x: Var, feats: Sequence[HeadFeatures], boundary: Var) -> Tuple[Var, Var]:
    """Attention through the block kernel, fronts seeded from `boundary`; returns (next X, boundary after)"""
    cfg = bound.config
    ys, fronts = [], []
    for j, (q_feat, k_feat, v) in enumerate(feats):
        base = j * cfg.head_width
        front = ag.slice_last(boundary, base, base + cfg.head_width)
        y, after = attn_block(q_feat, k_feat, v, front, cfg.block_size)
        ys.append(y)
        fronts.append(after)
    return _tail(bound, r, ag.concat(ys), x), ag.concat(fronts)


@dataclass
class LayerInputs:
    """Everything a layer computes before it needs its boundary row"""
    x: Var
    feats: List[HeadFeatures]
    t: Optional[Var] = None
    gamma: Optional[Var] = None

    def t_sum(self) -> np.ndarray:
        """Column sums of T over the segment rows"""
        if self.t is not None:
            return self.t.value.sum(axis=0)
        parts = []
        for _, k_feat, v in self.feats:
            parts += [k_feat.value.sum(axis=0), (v.value.T @ k_feat.value).ravel()]
        return np.concatenate(parts)


def prepare_layer(bound: BoundParams, r: int, x: Var) -> LayerInputs:
    feats = head_features(bound, r, x)
    if bound.config.attention == "ps":
        t, gamma = pack_features(x, feats)
        return LayerInputs(x, feats, t, gamma)
    return LayerInputs(x, feats)


def finish_layer(bound: BoundParams, r: int, inputs: LayerInputs, boundary: Var) -> Tuple[Var, Var]:
    """Returns (next X, boundary row after the segment)"""
    if inputs.t is not None:
        u = ag.prefix_sum(inputs.t, boundary)
        return layer_G(bound, r, u, inputs.gamma), ag.take_row(u, u.shape[0] - 1)
    return layer_block(bound, r, inputs.x, inputs.feats, boundary)


def logits(bound: BoundParams, x: Var) -> Var:
    return ag.add(ag.matmul(x, bound["out.w"]), bound["out.b"])


def default_mask(length: int) -> np.ndarray:
    """Every predicted position counts; position 0 is never a target"""
    mask = np.ones(length)
    mask[0] = 0.0
    return mask


def loss_slice(x_out: Var, tokens: np.ndarray, offset: int, mask: Optional[np.ndarray] = None) -> Var:
    """
    (L-1)^-1 times the masked cross-entropy of rows offset.. against the next token

    `mask[t]` weights the prediction of tokens[t]; the last position has no
    target and contributes zero.
    """
    length = len(tokens)
    if mask is None:
        mask = default_mask(length)
    rows = x_out.shape[0]
    if offset + rows > length:
        raise DimensionError("loss_slice", f"offset + rows <= {length}", offset + rows)
    target_pos = np.arange(offset + 1, offset + rows + 1)
    valid = target_pos < length
    targets = np.where(valid, tokens[np.minimum(target_pos, length - 1)], 0)
    weights = np.where(valid, np.asarray(mask, dtype=np.float64)[np.minimum(target_pos, length - 1)], 0.0)
    return ag.cross_entropy(x_out, targets, weights / (length - 1))


Seed = Callable[[int, LayerInputs], Var]


@dataclass
class ChunkRun:
    loss: Var
    boundaries: List[Var]
    x_out: Var


def run_chunk(
    bound: BoundParams,
    tokens: np.ndarray,
    offset: int,
    length: int,
    seed: Seed,
    mask: Optional[np.ndarray] = None,
) -> ChunkRun:
    """
    One segment through every layer

    `seed(r, inputs)` supplies the boundary row of layer r once the layer's
    rowwise features are known, which is when a replay can rewind it.
    """
    x = embed(bound, tokens, offset, length)
    boundaries = []
    for r in range(bound.config.layers):
        inputs = prepare_layer(bound, r, x)
        x, after = finish_layer(bound, r, inputs, seed(r, inputs))
        boundaries.append(after)
    x_out = logits(bound, x)
    return ChunkRun(loss_slice(x_out, tokens, offset, mask), boundaries, x_out)


@dataclass
class FullForward:
    loss: float
    tape: Tape
    bound: BoundParams
    run: ChunkRun


def forward_full(params: Params, tokens: np.ndarray, mask: Optional[np.ndarray] = None, differentiable: bool = True) -> FullForward:
    """Whole-sequence forward on a fresh tape; the caller releases the tape"""
    cfg = params.config
    tokens = check_tokens(tokens, cfg.vocab)
    if tokens.shape[0] < 2:
        raise DimensionError("forward_full", "sequence length >= 2", tokens.shape[0])
    tape = Tape(differentiable=differentiable)
    bound = params.bind(tape)
    zero_row = np.zeros(cfg.d1)
    with current_ledger().phase("forward"):
        run = run_chunk(bound, tokens, 0, tokens.shape[0], lambda r, _: tape.constant(zero_row), mask)
    log.debug("full forward: L=%d loss=%.6f nodes=%d", tokens.shape[0], float(run.loss.value), len(tape))
    return FullForward(float(run.loss.value), tape, bound, run)


def full_grad(params: Params, tokens: np.ndarray, mask: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
    """Loss and flat gradient by back-propagating through the whole sequence at once"""
    fwd = forward_full(params, tokens, mask)
    try:
        grads = fwd.tape.backward(fwd.run.loss, wrt=list(fwd.bound.vars.values()))
        return fwd.loss, fwd.bound.flat_grad(grads)
    finally:
        fwd.tape.release()
