from dataclasses import asdict, dataclass, fields
from typing import Any, Dict

from ..attention.linear import DEFAULT_BLOCK_SIZE, FeatureMap
from ..utils.errors import ConfigError

ATTENTION_MODES = ("block", "ps")


@dataclass(frozen=True)
class ModelConfig:
    """
    Shape of a Performer language model

    `attention` picks how the causal prefix sums are evaluated inside the
    model: "block" runs the block-iterative kernel from a running front,
    "ps" materializes T and takes an explicit prefix sum. Both produce the
    same numbers up to roundoff.
    """
    seq_len: int
    d_model: int
    heads: int
    layers: int
    feature_dim: int
    vocab: int
    d_ff: int = 0
    feature_map: str = "square"
    block_size: int = DEFAULT_BLOCK_SIZE
    ln_eps: float = 1e-5
    attention: str = "block"

    def __post_init__(self):
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        for name in ("seq_len", "d_model", "heads", "layers", "feature_dim", "vocab", "d_ff", "block_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"model.{name} must be positive, got {getattr(self, name)}")
        if self.seq_len < 2:
            raise ConfigError(f"model.seq_len must be >= 2, got {self.seq_len}")
        if self.vocab < 2:
            raise ConfigError(f"model.vocab must be >= 2, got {self.vocab}")
        if self.d_model % self.heads:
            raise ConfigError(f"model.heads ({self.heads}) must divide model.d_model ({self.d_model})")
        if self.ln_eps <= 0:
            raise ConfigError(f"model.ln_eps must be positive, got {self.ln_eps}")
        if self.attention not in ATTENTION_MODES:
            raise ConfigError(f"model.attention must be one of {ATTENTION_MODES}, got {self.attention!r}")
        expected = self.feature.output_dim(self.head_dim)
        if self.feature_dim != expected:
            raise ConfigError(
                f"model.feature_dim must be {expected} for the {self.feature_map!r} map, got {self.feature_dim}"
            )

    @property
    def feature(self) -> FeatureMap:
        return FeatureMap(self.feature_map)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def head_width(self) -> int:
        """Columns of T per head: M for g(K) plus d*M for the outer product"""
        return self.feature_dim * (self.head_dim + 1)

    @property
    def d1(self) -> int:
        return self.head_width * self.heads

    @property
    def d2(self) -> int:
        return self.feature_dim * self.heads + self.d_model

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown model key: {unknown[0]}")
        missing = [name for name in _REQUIRED if name not in data]
        if missing:
            raise ConfigError(f"missing model key: {missing[0]}")
        values = dict(data)
        try:
            for name in _INT_FIELDS:
                if name in values:
                    values[name] = int(values[name])
            if "ln_eps" in values:
                values["ln_eps"] = float(values["ln_eps"])
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad model value: {e}") from e
        return cls(**values)


_REQUIRED = ("seq_len", "d_model", "heads", "layers", "feature_dim", "vocab")
_INT_FIELDS = _REQUIRED + ("d_ff", "block_size")
