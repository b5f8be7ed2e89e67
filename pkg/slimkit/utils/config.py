import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Tuple

import yaml

from ..model.config import ModelConfig
from .errors import ConfigError

try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass

DESK_MODEL = {
    "seq_len": 256,
    "d_model": 32,
    "d_ff": 128,
    "heads": 2,
    "layers": 2,
    "feature_dim": 16,
    "vocab": 256,
    "feature_map": "square",
    "block_size": 64,
    "ln_eps": 1e-5,
    "attention": "block",
}

DESK_CONFIG = {
    "name": "desk",
    "seed": 0,
    "steps": 200,
    "lr_schedule": [[0, 1e-2]],
    "eval_interval": 50,
    "eval_samples": 8,
    "batch_size": 1,
    "tolerance": 1e-10,
    "model": DESK_MODEL,
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    name: str = "run"
    seed: int = 0
    steps: int = 200
    lr_schedule: Tuple[Tuple[int, float], ...] = ((0, 1e-2),)
    eval_interval: int = 50
    eval_samples: int = 8
    batch_size: int = 1
    tolerance: float = 1e-10

    def lr_at(self, step: int) -> float:
        """Piecewise-constant: the rate of the last breakpoint at or before `step`"""
        lr = self.lr_schedule[0][1]
        for start, rate in self.lr_schedule:
            if step >= start:
                lr = rate
        return lr

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "seed": self.seed,
            "steps": self.steps,
            "lr_schedule": [list(p) for p in self.lr_schedule],
            "eval_interval": self.eval_interval,
            "eval_samples": self.eval_samples,
            "batch_size": self.batch_size,
            "tolerance": self.tolerance,
            "model": self.model.to_dict(),
        }


_TOP_KEYS = ("name", "seed", "steps", "lr_schedule", "eval_interval", "eval_samples", "batch_size", "tolerance", "model")


def _schedule(raw) -> Tuple[Tuple[int, float], ...]:
    try:
        points = tuple((int(step), float(lr)) for step, lr in raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"lr_schedule must be a list of [step, lr] pairs: {e}") from e
    if not points or points[0][0] != 0:
        raise ConfigError("lr_schedule must start at step 0")
    if any(b[0] <= a[0] for a, b in zip(points, points[1:])):
        raise ConfigError("lr_schedule steps must increase")
    if any(lr <= 0 for _, lr in points):
        raise ConfigError("lr_schedule rates must be positive")
    return points


def parse_config(data: Dict[str, Any], default_name: str = "run") -> RunConfig:
    """
    Build a RunConfig from a parsed mapping
    Environment variables override the model section
    """
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    unknown = sorted(set(data) - set(_TOP_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}")
    if "model" not in data or not isinstance(data["model"], dict):
        raise ConfigError("config needs a 'model' section")

    model = dict(data["model"])
    if os.getenv("SLIMKIT_ATTENTION"):
        model["attention"] = os.getenv("SLIMKIT_ATTENTION")
    if os.getenv("SLIMKIT_BLOCK_SIZE"):
        model["block_size"] = os.getenv("SLIMKIT_BLOCK_SIZE")

    try:
        cfg = RunConfig(
            model=ModelConfig.from_dict(model),
            name=str(data.get("name", default_name)),
            seed=int(data.get("seed", 0)),
            steps=int(data.get("steps", 200)),
            lr_schedule=_schedule(data.get("lr_schedule", [[0, 1e-2]])),
            eval_interval=int(data.get("eval_interval", 50)),
            eval_samples=int(data.get("eval_samples", 8)),
            batch_size=int(data.get("batch_size", 1)),
            tolerance=float(data.get("tolerance", 1e-10)),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad config value: {e}") from e

    if cfg.steps < 0 or min(cfg.eval_interval, cfg.eval_samples, cfg.batch_size) < 1:
        raise ConfigError("steps must be >= 0; eval_interval, eval_samples and batch_size >= 1")
    if cfg.tolerance < 0:
        raise ConfigError(f"tolerance must be >= 0, got {cfg.tolerance}")
    return cfg


def load_config(config_path: Path) -> RunConfig:
    """
    Load a run config from JSON or YAML
    Environment variables override config file
    """
    config_path = Path(config_path)
    if not config_path.exists():
        raise FileNotFoundError(f"Config not found: {config_path}")

    with open(config_path) as f:
        try:
            data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{config_path}: {e}") from e

    return parse_config(data, default_name=config_path.stem)


def parse_chunks(spec: str, length: int) -> List[int]:
    """'1,8,64,full' -> [1, 8, 64, length]"""
    chunks = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if part == "full":
            chunks.append(length)
            continue
        try:
            c = int(part)
        except ValueError:
            raise ConfigError(f"bad chunk size: {part!r}") from None
        if not 1 <= c <= length:
            raise ConfigError(f"chunk size {c} outside [1, {length}]")
        chunks.append(c)
    if not chunks:
        raise ConfigError("empty chunk list")
    return chunks


@dataclass(frozen=True)
class ChunkSchedule:
    """Constant C, 'full', or 'finetune:C' (full for the first half of the steps, C after)"""
    chunk: int
    finetune: bool = False

    def at(self, step: int, steps: int, length: int) -> int:
        if self.finetune and step < steps // 2:
            return length
        return self.chunk


def parse_schedule(spec: str, length: int) -> ChunkSchedule:
    spec = spec.strip()
    if spec.startswith("finetune:"):
        chunks = parse_chunks(spec.split(":", 1)[1], length)
        if len(chunks) != 1:
            raise ConfigError(f"expected one chunk size after finetune:, got {spec!r}")
        return ChunkSchedule(chunk=chunks[0], finetune=True)
    chunks = parse_chunks(spec, length)
    if len(chunks) != 1:
        raise ConfigError(f"expected one chunk size, got {spec!r}")
    return ChunkSchedule(chunk=chunks[0])
