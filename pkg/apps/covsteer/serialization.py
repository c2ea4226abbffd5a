"""
covsteer - Artifact Serialization
JSON and CSV writers with shortest round-trip float formatting, so identical
inputs always produce byte-identical artifacts.
"""

import csv
import dataclasses
import enum
import io
import json
import math
from pathlib import Path
from typing import Any, Iterable, List, Sequence, Union

import numpy as np


PathLike = Union[str, Path]


def to_jsonable(data: Any) -> Any:
    """
    Convert numpy arrays, dataclasses and enums into JSON-compatible values.

    Non-finite floats become ``None``.
    """
    if isinstance(data, enum.Enum):
        return data.value
    if dataclasses.is_dataclass(data) and not isinstance(data, type):
        return {f.name: to_jsonable(getattr(data, f.name)) for f in dataclasses.fields(data)}
    if isinstance(data, dict):
        return {str(k): to_jsonable(v) for k, v in data.items()}
    if isinstance(data, (list, tuple)):
        return [to_jsonable(v) for v in data]
    if isinstance(data, np.ndarray):
        return to_jsonable(data.tolist())
    if isinstance(data, (bool, np.bool_)):
        return bool(data)
    if isinstance(data, (int, np.integer)):
        return int(data)
    if isinstance(data, (float, np.floating)):
        value = float(data)
        return value if math.isfinite(value) else None
    return data


def dumps(data: Any) -> str:
    """Serialize to a stable, sorted, indented JSON document."""
    return json.dumps(to_jsonable(data), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path: PathLike, data: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(data), encoding="utf-8")
    return path


def read_json(path: PathLike) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def format_value(value: Any) -> str:
    """CSV cell text; floats use repr (shortest round-trip)."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(list(header))
    for row in rows:
        writer.writerow([format_value(v) for v in row])
    return buffer.getvalue()


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(header, rows), encoding="utf-8")
    return path


def read_csv(path: PathLike) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))
