"""
Trainable parameter set

Parameters live in one ordered mapping whose order (see `param_layout`) is
also the order of the flat vector used by finite differences, Adam and the
checkpoint format.
"""
import math
from collections import OrderedDict
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Dict, Iterator, List, Tuple

import numpy as np

from ..core import tensor as T
from ..core.autograd import GradMap, Tape, Var
from ..utils.errors import DimensionError
from .config import ModelConfig

Shape = Tuple[int, ...]


def layer_prefix(r: int) -> str:
    return f"layers.{r}"


def param_layout(config: ModelConfig) -> List[Tuple[str, Shape]]:
    dm, d, ff = config.d_model, config.head_dim, config.d_ff
    layout: List[Tuple[str, Shape]] = [("tok_emb", (config.vocab, dm))]
    for r in range(config.layers):
        p = layer_prefix(r)
        for j in range(config.heads):
            for w in ("w_q", "w_k", "w_v"):
                layout.append((f"{p}.heads.{j}.{w}", (dm, d)))
        layout += [
            (f"{p}.ln1.gain", (dm,)),
            (f"{p}.ln1.bias", (dm,)),
            (f"{p}.ffn.w1", (dm, ff)),
            (f"{p}.ffn.b1", (ff,)),
            (f"{p}.ffn.w2", (ff, dm)),
            (f"{p}.ffn.b2", (dm,)),
            (f"{p}.ln2.gain", (dm,)),
            (f"{p}.ln2.bias", (dm,)),
        ]
    layout += [("out.w", (dm, config.vocab)), ("out.b", (config.vocab,))]
    return layout


class Params(Mapping):
    """Named float64 arrays in layout order"""

    def __init__(self, config: ModelConfig, arrays: Dict[str, np.ndarray]):
        self.config = config
        self._arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, shape in param_layout(config):
            if name not in arrays:
                raise DimensionError("Params", f"entry {name!r}", "missing")
            value = T.as_tensor(arrays[name])
            if value.shape != shape:
                raise DimensionError("Params", shape, value.shape, detail=name)
            self._arrays[name] = value
        extra = set(arrays) - set(self._arrays)
        if extra:
            raise DimensionError("Params", "layout entries only", sorted(extra))

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    @property
    def n_param(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._arrays.values()])

    @classmethod
    def unflatten(cls, config: ModelConfig, flat: np.ndarray) -> "Params":
        flat = np.asarray(flat, dtype=np.float64)
        total = sum(math.prod(shape) for _, shape in param_layout(config))
        if flat.shape != (total,):
            raise DimensionError("Params.unflatten", (total,), flat.shape)
        arrays, pos = {}, 0
        for name, shape in param_layout(config):
            size = math.prod(shape)
            arrays[name] = flat[pos:pos + size].reshape(shape).copy()
            pos += size
        return cls(config, arrays)

    def bind(self, tape: Tape) -> "BoundParams":
        """Register every array as a leaf of `tape`"""
        return BoundParams(tape, self.config, OrderedDict((n, tape.leaf(a)) for n, a in self._arrays.items()))


def init_params(config: ModelConfig, seed: int) -> Params:
    """
    Seeded initialization: matrices uniform on +-1/sqrt(fan_in), gains 1, biases 0

    Fan-in is the leading extent of each matrix (rows multiply on the left).
    """
    rng = T.make_rng(seed)
    arrays = {}
    for name, shape in param_layout(config):
        if name.endswith(".gain"):
            arrays[name] = np.ones(shape)
        elif len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return Params(config, arrays)


@dataclass
class BoundParams:
    tape: Tape
    config: ModelConfig
    vars: "OrderedDict[str, Var]"

    def __getitem__(self, name: str) -> Var:
        return self.vars[name]

    def layer(self, r: int, name: str) -> Var:
        return self.vars[f"{layer_prefix(r)}.{name}"]

    def head(self, r: int, j: int, name: str) -> Var:
        return self.vars[f"{layer_prefix(r)}.heads.{j}.{name}"]

    def flat_grad(self, grads: GradMap) -> np.ndarray:
        return np.concatenate([grads[v].ravel() for v in self.vars.values()])
