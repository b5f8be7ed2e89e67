"""
Copying task: sequences 0 w 0 w with the loss on the second half only

A model can predict the second w only by carrying information across the
whole first half, so every chunk boundary is exercised.
"""
from dataclasses import dataclass

import numpy as np

from ..core.tensor import Rng, log_softmax
from ..utils.errors import ConfigError


@dataclass(frozen=True)
class CopyingSample:
    tokens: np.ndarray
    mask: np.ndarray

    @property
    def half(self) -> int:
        return self.tokens.shape[0] // 2


def gen_copying(length: int, vocab: int, rng: Rng) -> CopyingSample:
    """
    tokens = 0 w 0 w with w uniform over the nonzero symbols

    mask[t] = 1 for the target positions of the second half, L/2 .. L-1
    (0-based), so exactly L/2 predictions count.
    """
    if length < 4 or length % 2:
        raise ConfigError(f"copying task needs an even length >= 4, got {length}")
    if vocab < 2:
        raise ConfigError(f"copying task needs vocab >= 2, got {vocab}")
    half = length // 2
    omega = rng.integers(1, vocab, size=half - 1)
    tokens = np.concatenate([[0], omega, [0], omega]).astype(np.int64)
    mask = np.zeros(length)
    mask[half:] = 1.0
    return CopyingSample(tokens, mask)


def masked_accuracy(logits: np.ndarray, sample: CopyingSample) -> float:
    """Fraction of masked targets predicted by argmax; row l predicts token l+1"""
    pred = logits[:-1].argmax(axis=1)
    weights = sample.mask[1:]
    return float(((pred == sample.tokens[1:]) * weights).sum() / weights.sum())


def masked_bits_per_char(logits: np.ndarray, sample: CopyingSample) -> float:
    logp = log_softmax(logits[:-1])
    nll = -logp[np.arange(logp.shape[0]), sample.tokens[1:]]
    weights = sample.mask[1:]
    return float((nll * weights).sum() / weights.sum() / np.log(2.0))
