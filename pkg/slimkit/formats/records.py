import csv
import io
import math
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Iterable, List, Sequence, Union


@dataclass(frozen=True)
class RunRecord:
    """One benchmark row"""
    config_name: str
    L: int
    C: int
    seed: int
    wall_time_seconds: float
    peak_activation_bytes: int
    total_flops: int
    rel_grad_discrepancy: float
    final_metric: float


@dataclass(frozen=True)
class TrainRecord:
    """One evaluation point of a training run"""
    config_name: str
    step: int
    C: int
    seed: int
    lr: float
    train_loss: float
    accuracy: float
    bits_per_char: float


def field_names(record_type) -> List[str]:
    return [f.name for f in fields(record_type)]


def _cell(value) -> str:
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"non-finite value in record: {value}")
        return repr(float(value))
    return str(value)


def to_csv(records: Sequence, record_type=None) -> str:
    """Header plus one row per record; floats keep full precision"""
    if record_type is None:
        if not records:
            raise ValueError("record type needed for an empty table")
        record_type = type(records[0])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(field_names(record_type))
    for rec in records:
        writer.writerow([_cell(v) for v in astuple(rec)])
    return buf.getvalue()


def write_csv(path: Union[str, Path], records: Iterable, record_type=None) -> Path:
    path = Path(path)
    path.write_text(to_csv(list(records), record_type), newline="")
    return path
