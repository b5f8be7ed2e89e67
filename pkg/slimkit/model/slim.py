"""
Chunked exact forward/backward with O(C) activation memory

The forward sweep runs the chunks left to right on evaluation-only tapes
and keeps nothing but the boundary buffer B (one prefix-sum state row per
layer). The backward sweep walks the chunks right to left. For each chunk
it replays the forward on a differentiable tape, rewinding B by the chunk's
T column sums layer by layer as the replay reaches them, and differentiates

    phi = chunk loss + sum_r <stop_gradient(G_r), B_r after the chunk>

G carries d(loss)/d(B) from the chunks to the right; after the chunk it is
replaced by d(phi)/d(B before the chunk). Chunk tapes are released as soon
as their gradients are harvested.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from ..core import autograd as ag
from ..core.autograd import Tape, Var
from ..core.instrument import FlopLedger, current_ledger, current_stats
from ..utils.errors import ConfigError, DimensionError, ReplayMismatchError
from .config import ModelConfig
from .params import Params
from .performer import LayerInputs, check_tokens, run_chunk

log = logging.getLogger(__name__)

FLOP_CATEGORIES = ("forward", "replay", "backward", "rewind", "stitch")


@dataclass(frozen=True)
class ChunkPlan:
    """Contiguous chunks of `chunk` tokens covering [0, length); the last may be shorter"""
    length: int
    chunk: int

    def __post_init__(self):
        if self.length < 1:
            raise ConfigError(f"sequence length must be >= 1, got {self.length}")
        if not 1 <= self.chunk <= self.length:
            raise ConfigError(f"chunk size must be in [1, {self.length}], got {self.chunk}")

    def __len__(self) -> int:
        return -(-self.length // self.chunk)

    @property
    def offsets(self) -> List[int]:
        return list(range(0, self.length, self.chunk))

    @property
    def sizes(self) -> List[int]:
        return [min(self.chunk, self.length - a) for a in self.offsets]

    def __getitem__(self, n: int) -> Tuple[int, int]:
        offset = self.offsets[n]
        return offset, min(self.chunk, self.length - offset)

    def __iter__(self) -> Iterator[Tuple[int, int]]:
        return iter(zip(self.offsets, self.sizes))


@dataclass
class Buffers:
    b: np.ndarray
    g: np.ndarray

    @classmethod
    def zeros(cls, config: ModelConfig) -> "Buffers":
        return cls(np.zeros((config.layers, config.d1)), np.zeros((config.layers, config.d1)))

    @property
    def nbytes(self) -> int:
        return self.b.nbytes + self.g.nbytes


@dataclass
class PhiResult:
    phi: float
    grad_theta: np.ndarray
    grad_b_prev: np.ndarray
    chunk_loss: float
    clamp_events: int = 0


@dataclass
class SlimResult:
    loss: float
    grad: np.ndarray
    buffers: Buffers
    persistent_bytes: int
    boundary_residual: float
    chunks: int


def rewind_boundary(b: np.ndarray, t_sums: np.ndarray, rows: int, ledger: Optional[FlopLedger] = None) -> np.ndarray:
    """
    Boundary state before a chunk from the state after it: b - sum of the chunk's T rows

    Subtracts in place and returns `b`. Billed as `rows` additions per column.
    """
    if b.shape != t_sums.shape:
        raise DimensionError("rewind_boundary", b.shape, t_sums.shape)
    b -= t_sums
    (ledger if ledger is not None else current_ledger()).add("rewind", rows * t_sums.size)
    return b


def _forward_sweep(params: Params, tokens: np.ndarray, plan: ChunkPlan, mask) -> Tuple[float, np.ndarray, List[int]]:
    cfg = params.config
    b = np.zeros((cfg.layers, cfg.d1))
    loss = 0.0
    clamps = []
    for n, (offset, size) in enumerate(plan):
        tape = Tape(differentiable=False)
        bound = params.bind(tape)
        run = run_chunk(bound, tokens, offset, size, lambda r, _: tape.constant(b[r]), mask)
        for r, after in enumerate(run.boundaries):
            b[r] = after.value
        loss += float(run.loss.value)
        clamps.append(tape.clamp_events)
        tape.release()
        log.debug("forward chunk %d/%d: offset=%d size=%d", n + 1, len(plan), offset, size)
    return loss, b, clamps


def chunk_forward_pass(
    params: Params,
    tokens: np.ndarray,
    plan: ChunkPlan,
    mask: Optional[np.ndarray] = None,
) -> Tuple[float, np.ndarray]:
    """Loss and terminal boundary buffer, holding one chunk of activations at a time"""
    tokens = check_tokens(tokens, params.config.vocab)
    with current_ledger().phase("forward"):
        loss, b, _ = _forward_sweep(params, tokens, plan, mask)
    return loss, b


def _replay(
    n: int,
    params: Params,
    b: np.ndarray,
    z: np.ndarray,
    tokens: np.ndarray,
    plan: ChunkPlan,
    mask,
    rewind: bool,
) -> PhiResult:
    """
    Build phi for chunk n and differentiate it

    With `rewind`, `b` holds the state after chunk n and is rewound in
    place, row r just before layer r consumes it; otherwise `b` already is
    the state before chunk n and is left alone.
    """
    offset, size = plan[n]
    ledger = current_ledger()
    tape = Tape()
    bound = params.bind(tape)
    b_prev: Dict[int, Var] = {}

    def seed(r: int, inputs: LayerInputs) -> Var:
        if rewind:
            with ledger.phase("rewind"):
                rewind_boundary(b[r], inputs.t_sum(), size, ledger)
        b_prev[r] = tape.leaf(b[r].copy())
        return b_prev[r]

    try:
        with ledger.phase("replay"):
            run = run_chunk(bound, tokens, offset, size, seed, mask)
        with ledger.phase("stitch"):
            phi = run.loss
            for r, after in enumerate(run.boundaries):
                phi = ag.add(phi, ag.dot(ag.stop_gradient(tape.leaf(z[r])), after))
        wrt = list(bound.vars.values()) + [b_prev[r] for r in range(len(run.boundaries))]
        grads = tape.backward(phi, wrt=wrt)
        return PhiResult(
            phi=float(phi.value),
            grad_theta=bound.flat_grad(grads),
            grad_b_prev=np.stack([grads[b_prev[r]] for r in range(len(run.boundaries))]),
            chunk_loss=float(run.loss.value),
            clamp_events=tape.clamp_events,
        )
    finally:
        tape.release()


def phi_build_and_grad(
    n: int,
    params: Params,
    b_prev: np.ndarray,
    z: np.ndarray,
    tokens: np.ndarray,
    plan: ChunkPlan,
    mask: Optional[np.ndarray] = None,
) -> PhiResult:
    """
    phi for chunk n (counted from 0) given the boundary state entering it

    Returns phi, its gradients with respect to the parameters and to
    `b_prev`, and the chunk loss.
    """
    cfg = params.config
    shape = (cfg.layers, cfg.d1)
    if b_prev.shape != shape or z.shape != shape:
        raise DimensionError("phi_build_and_grad", shape, (b_prev.shape, z.shape))
    if not 0 <= n < len(plan):
        raise ConfigError(f"chunk index {n} outside [0, {len(plan)})")
    tokens = check_tokens(tokens, cfg.vocab)
    return _replay(n, params, b_prev.copy(), z, tokens, plan, mask, rewind=False)


def slim_grad(params: Params, tokens: np.ndarray, chunk: int, mask: Optional[np.ndarray] = None) -> SlimResult:
    """
    Loss and flat gradient of the whole sequence, holding one chunk of activations at a time

    Equal to full back-propagation up to roundoff for every chunk size.
    """
    cfg = params.config
    tokens = check_tokens(tokens, cfg.vocab)
    plan = ChunkPlan(tokens.shape[0], chunk)
    ledger = current_ledger()

    with ledger.phase("forward"):
        loss, b, clamps = _forward_sweep(params, tokens, plan, mask)
    buffers = Buffers(b=b, g=np.zeros_like(b))
    scale = max(1.0, float(np.abs(b).max()))

    grad = np.zeros(params.n_param)
    for n in reversed(range(len(plan))):
        result = _replay(n, params, buffers.b, buffers.g, tokens, plan, mask, rewind=True)
        if result.clamp_events != clamps[n]:
            raise ReplayMismatchError(
                f"chunk {n}: replay clamped {result.clamp_events} denominators, forward clamped {clamps[n]}"
            )
        grad += result.grad_theta
        buffers.g = result.grad_b_prev
        log.debug("backward chunk %d/%d: phi=%.6f", n + 1, len(plan), result.phi)

    residual = float(np.abs(buffers.b).max()) / scale
    if residual > 1e-8:
        log.warning("boundary did not telescope to zero: relative residual %.3e", residual)
    buffers.b[...] = 0.0
    buffers.g[...] = 0.0
    stats = current_stats()
    log.debug("slim grad: C=%d chunks=%d peak activation bytes=%d", chunk, len(plan), stats.peak_activation_bytes)
    return SlimResult(
        loss=loss,
        grad=grad,
        buffers=buffers,
        persistent_bytes=buffers.nbytes,
        boundary_residual=residual,
        chunks=len(plan),
    )


@dataclass
class FlopReport:
    counts: Dict[str, int] = field(default_factory=dict)

    def __getitem__(self, category: str) -> int:
        return self.counts.get(category, 0)

    @property
    def total(self) -> int:
        """Everything except the stitching term"""
        return sum(self[c] for c in ("forward", "replay", "backward", "rewind"))

    def identities(self, config: ModelConfig, length: int, full: Optional["FlopReport"] = None) -> Dict[str, bool]:
        """Counting identities a slim run satisfies; `full` is the report of a full-memory run"""
        checks = {
            "replay == forward": self["replay"] == self["forward"],
            "rewind == L*s*D1": self["rewind"] == expected_rewind_adds(config, length),
            "total == 2*forward + backward + rewind": self.total == 2 * self["forward"] + self["backward"] + self["rewind"],
        }
        if full is not None:
            checks["forward == full forward"] = self["forward"] == full["forward"]
            checks["backward == full backward"] = self["backward"] == full["backward"]
        return checks


def expected_rewind_adds(config: ModelConfig, length: int) -> int:
    return length * config.layers * config.d1


def flop_ledger(ledger: Optional[FlopLedger] = None) -> FlopReport:
    ledger = ledger if ledger is not None else current_ledger()
    snap = ledger.snapshot()
    return FlopReport({c: snap.get(c, 0) for c in sorted(set(FLOP_CATEGORIES) | set(snap))})
