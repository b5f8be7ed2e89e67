from typing import Callable, Sequence

import numpy as np


def rel_err(a, b) -> float:
    """Norm-relative error of a against the reference b"""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    ref = np.linalg.norm(b)
    diff = np.linalg.norm(a - b)
    return float(diff / ref) if ref > 0 else float(diff)


def central_diff(f: Callable[[np.ndarray], float], x: np.ndarray, coords: Sequence[int], h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar f at flat coordinates `coords` of x"""
    out = np.empty(len(coords))
    flat = x.reshape(-1)
    for i, c in enumerate(coords):
        keep = flat[c]
        flat[c] = keep + h
        up = f(x)
        flat[c] = keep - h
        down = f(x)
        flat[c] = keep
        out[i] = (up - down) / (2 * h)
    return out


def tiny(attention: str = "block", **overrides):
    """L=8, d_model=8, two heads of width 4, two layers, vocab 11"""
    from slimkit.model.config import ModelConfig

    kwargs = dict(seq_len=8, d_model=8, heads=2, layers=2, feature_dim=4, vocab=11, block_size=3, attention=attention)
    kwargs.update(overrides)
    return ModelConfig(**kwargs)
