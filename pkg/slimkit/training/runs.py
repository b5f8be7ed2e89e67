"""
Run engines behind the CLI

Each engine returns records; printing and CSV writing stay in the CLI.
Every measured run executes inside its own `tracking()` context so the
allocation counter and FLOP ledger see that run only.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from ..core.instrument import tracking
from ..core.tensor import make_rng
from ..formats.records import RunRecord, TrainRecord
from ..model.config import ModelConfig
from ..model.params import Params, init_params
from ..model.performer import forward_full, full_grad
from ..model.slim import FlopReport, flop_ledger, slim_grad
from ..utils.config import ChunkSchedule, RunConfig
from ..utils.errors import ConfigError
from .adam import AdamState, adam_step
from .copying import gen_copying, masked_accuracy, masked_bits_per_char

log = logging.getLogger(__name__)

TOKEN_STREAM = 1
TRAIN_STREAM = 2
EVAL_STREAM = 3


def sample_tokens(config: ModelConfig, seed: int) -> np.ndarray:
    """Uniform random tokens of the configured length"""
    return make_rng(seed, TOKEN_STREAM).integers(0, config.vocab, size=config.seq_len)


def relative_discrepancy(grad: np.ndarray, reference: np.ndarray) -> float:
    ref = float(np.linalg.norm(reference))
    diff = float(np.linalg.norm(grad - reference))
    return diff / ref if ref > 0 else diff


@dataclass
class BenchRow:
    record: RunRecord
    flops: FlopReport
    persistent_bytes: int = 0


def _reference(params: Params, tokens: np.ndarray) -> Tuple[float, np.ndarray, BenchRow]:
    with tracking() as (stats, ledger):
        start = time.perf_counter()
        loss, grad = full_grad(params, tokens)
        elapsed = time.perf_counter() - start
    flops = flop_ledger(ledger)
    row = BenchRow(
        RunRecord("", tokens.shape[0], tokens.shape[0], 0, elapsed, stats.peak_activation_bytes, flops.total, 0.0, loss),
        flops,
    )
    return loss, grad, row


def gradcheck(cfg: RunConfig, chunks: Sequence[int], seed: int) -> List[BenchRow]:
    """
    Relative gradient discrepancy of slim_grad against full back-propagation

    Wall time is written as 0.0 so the output is byte-reproducible.
    """
    model = cfg.model
    params = init_params(model, seed)
    tokens = sample_tokens(model, seed)
    _, reference, _ = _reference(params, tokens)
    rows = []
    for c in chunks:
        with tracking() as (stats, ledger):
            res = slim_grad(params, tokens, c)
        disc = relative_discrepancy(res.grad, reference)
        flops = flop_ledger(ledger)
        log.debug("gradcheck C=%d discrepancy=%.3e", c, disc)
        rows.append(BenchRow(
            RunRecord(cfg.name, model.seq_len, c, seed, 0.0, stats.peak_activation_bytes, flops.total, disc, res.loss),
            flops,
            res.persistent_bytes,
        ))
    return rows


def _bench_one(cfg: RunConfig, params: Params, tokens: np.ndarray, reference: np.ndarray, c: int, repeats: int, seed: int) -> BenchRow:
    times = []
    for _ in range(repeats):
        with tracking() as (stats, ledger):
            start = time.perf_counter()
            res = slim_grad(params, tokens, c)
            times.append(time.perf_counter() - start)
    flops = flop_ledger(ledger)
    record = RunRecord(
        cfg.name,
        cfg.model.seq_len,
        c,
        seed,
        float(np.mean(times)),
        stats.peak_activation_bytes,
        flops.total,
        relative_discrepancy(res.grad, reference),
        res.loss,
    )
    return BenchRow(record, flops, res.persistent_bytes)


def bench(
    cfg: RunConfig,
    chunks: Sequence[int],
    repeats: int,
    seed: Optional[int] = None,
    parallel: bool = False,
    baseline: bool = False,
) -> List[BenchRow]:
    """
    Time, peak activation bytes and FLOPs of slim_grad per chunk size

    Runs are sequential unless `parallel`, in which case each chunk size runs
    on its own worker thread with its own counters.
    """
    if repeats < 1:
        raise ConfigError(f"repeats must be >= 1, got {repeats}")
    seed = cfg.seed if seed is None else seed
    params = init_params(cfg.model, seed)
    tokens = sample_tokens(cfg.model, seed)
    _, reference, full_row = _reference(params, tokens)

    if parallel:
        with ThreadPoolExecutor() as pool:
            rows = list(pool.map(lambda c: _bench_one(cfg, params, tokens, reference, c, repeats, seed), chunks))
    else:
        rows = [_bench_one(cfg, params, tokens, reference, c, repeats, seed) for c in chunks]

    if baseline:
        rec = full_row.record
        full_row.record = RunRecord(
            f"{cfg.name}:full", rec.L, rec.C, seed, rec.wall_time_seconds,
            rec.peak_activation_bytes, rec.total_flops, 0.0, rec.final_metric,
        )
        rows.append(full_row)
    return rows


@dataclass
class EvalResult:
    accuracy: float
    bits_per_char: float


def evaluate_copying(params: Params, samples: int, rng) -> EvalResult:
    model = params.config
    acc, bpc = [], []
    for _ in range(samples):
        sample = gen_copying(model.seq_len, model.vocab, rng)
        with tracking():
            fwd = forward_full(params, sample.tokens, sample.mask, differentiable=False)
            out = fwd.run.x_out.value
            fwd.tape.release()
        acc.append(masked_accuracy(out, sample))
        bpc.append(masked_bits_per_char(out, sample))
    return EvalResult(float(np.mean(acc)), float(np.mean(bpc)))


def train_copying(
    cfg: RunConfig,
    schedule: ChunkSchedule,
    steps: int,
    seed: int,
    params: Optional[Params] = None,
    on_eval: Optional[Callable[[TrainRecord], None]] = None,
) -> Tuple[Params, List[TrainRecord]]:
    """
    Adam on the copying task; one evaluation row every `eval_interval` steps and at the end

    Chunk size C == L uses full back-propagation, anything smaller slim_grad.
    """
    model = cfg.model
    if params is None:
        params = init_params(model, seed)
    elif params.config != model:
        raise ConfigError("checkpoint model does not match the config's model section")
    length = model.seq_len
    train_rng = make_rng(seed, TRAIN_STREAM)
    eval_rng = make_rng(seed, EVAL_STREAM)
    state = AdamState.zeros(params.n_param, lr=cfg.lr_at(0))
    records: List[TrainRecord] = []

    for step in range(steps):
        c = schedule.at(step, steps, length)
        state.lr = cfg.lr_at(step)
        grad = np.zeros(params.n_param)
        losses = []
        for _ in range(cfg.batch_size):
            sample = gen_copying(length, model.vocab, train_rng)
            with tracking():
                if c >= length:
                    loss, g = full_grad(params, sample.tokens, sample.mask)
                else:
                    res = slim_grad(params, sample.tokens, c, sample.mask)
                    loss, g = res.loss, res.grad
            grad += g
            losses.append(loss)
        params = adam_step(state, params, grad / cfg.batch_size)

        done = step + 1
        if done % cfg.eval_interval == 0 or done == steps:
            ev = evaluate_copying(params, cfg.eval_samples, eval_rng)
            rec = TrainRecord(cfg.name, done, c, seed, state.lr, float(np.mean(losses)), ev.accuracy, ev.bits_per_char)
            records.append(rec)
            log.debug("step %d: loss=%.4f acc=%.3f bpc=%.3f", done, rec.train_loss, rec.accuracy, rec.bits_per_char)
            if on_eval is not None:
                on_eval(rec)
    return params, records
