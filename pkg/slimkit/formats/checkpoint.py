"""
Params checkpoint format

    b"SLIMPRM1" | header length (uint64, little-endian) | JSON header | float64 LE data

The header carries the ModelConfig and the field order with shapes; the
data section is the flat parameter vector in that order.
"""
import json
import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from ..model.config import ModelConfig
from ..model.params import Params, param_layout
from ..utils.errors import CheckpointError, ConfigError

MAGIC = b"SLIMPRM1"
_LEN = struct.Struct("<Q")


def dumps(params: Params) -> bytes:
    header = {
        "config": params.config.to_dict(),
        "fields": [[name, list(shape)] for name, shape in param_layout(params.config)],
        "dtype": "<f8",
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + _LEN.pack(len(raw)) + raw + params.flatten().astype("<f8").tobytes()


def loads(data: bytes) -> Tuple[ModelConfig, Params]:
    if not data.startswith(MAGIC):
        raise CheckpointError("not a slimkit checkpoint (bad magic)")
    start = len(MAGIC) + _LEN.size
    if len(data) < start:
        raise CheckpointError("truncated header")
    (size,) = _LEN.unpack_from(data, len(MAGIC))
    try:
        header = json.loads(data[start:start + size].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError, ConfigError) as e:
        raise CheckpointError(f"bad checkpoint header: {e}") from e

    expected = [[name, list(shape)] for name, shape in param_layout(config)]
    if header.get("fields") != expected:
        raise CheckpointError("field order does not match the model layout")
    if header.get("dtype") != "<f8":
        raise CheckpointError(f"unsupported dtype {header.get('dtype')!r}")

    body = data[start + size:]
    count = sum(int(np.prod(shape)) for _, shape in expected)
    if len(body) != 8 * count:
        raise CheckpointError(f"expected {8 * count} data bytes, found {len(body)}")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return config, Params.unflatten(config, flat)


def save_params(path: Union[str, Path], params: Params) -> Path:
    path = Path(path)
    path.write_bytes(dumps(params))
    return path


def load_params(path: Union[str, Path]) -> Tuple[ModelConfig, Params]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    return loads(path.read_bytes())
