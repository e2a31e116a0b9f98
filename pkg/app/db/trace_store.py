import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
from pydantic import ValidationError

from app.core.errors import TraceError
from app.db.models import TraceRecord

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class TraceStore:
    """Line-delimited TraceRecord sink: one JSON object per line, steps strictly increasing"""

    def __init__(self, path: Optional[PathLike] = None):
        self.path = Path(path) if path is not None else None
        self.last_step: Optional[int] = None
        # In-memory fallback when no path is configured
        self._memory_lines: List[str] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def record(self, rec: TraceRecord):
        """Append one record; steps must be strictly increasing"""
        if self.last_step is not None and rec.step <= self.last_step:
            raise TraceError(f"out-of-order step {rec.step} after {self.last_step}")

        line = encode_record(rec)
        if self.path is None:
            self._memory_lines.append(line)
        else:
            with self.path.open("a", encoding="utf-8", newline="\n") as fh:
                fh.write(line + "\n")
        self.last_step = rec.step

    def record_all(self, records: List[TraceRecord]):
        for rec in records:
            self.record(rec)

    def lines(self) -> List[str]:
        if self.path is None:
            return list(self._memory_lines)
        return self.path.read_text(encoding="utf-8").splitlines()

    def read(self) -> List[TraceRecord]:
        return [decode_record(line, i) for i, line in enumerate(self.lines())]


def encode_record(rec: TraceRecord) -> str:
    # json.dumps writes floats with repr: the shortest round-trip decimal form
    return json.dumps(rec.model_dump())


def decode_record(line: str, lineno: int = 0) -> TraceRecord:
    try:
        payload = json.loads(line)
        return TraceRecord.model_validate(payload)
    except (json.JSONDecodeError, ValidationError) as e:
        raise TraceError(f"malformed trace line {lineno + 1}: {e}") from e


def read_trace(path: PathLike) -> List[TraceRecord]:
    """Load a trace file, enforcing strictly increasing steps"""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise TraceError(f"cannot read trace {path}: {e}") from e

    records = [decode_record(line, i) for i, line in enumerate(text.splitlines()) if line.strip()]
    for prev, cur in zip(records, records[1:]):
        if cur.step <= prev.step:
            raise TraceError(f"out-of-order step {cur.step} after {prev.step} in {path}")
    logger.debug(f"Read {len(records)} trace records from {path}")
    return records


def write_json(path: PathLike, document: Dict[str, Any]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # strict JSON: a non-finite float raises instead of writing Infinity/NaN
    path.write_text(json.dumps(document, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def write_params(path: PathLike, params: np.ndarray):
    """8-byte little-endian element count, then little-endian f64 values"""
    flat = np.asarray(params, dtype="<f8").ravel()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.array([flat.size], dtype="<u8").tobytes() + flat.tobytes())


def read_params(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise TraceError(f"{path}: missing length header")
    (count,) = np.frombuffer(raw[:8], dtype="<u8")
    values = np.frombuffer(raw[8:], dtype="<f8")
    if values.size != int(count):
        raise TraceError(f"{path}: header says {int(count)} values, found {values.size}")
    return values.astype(np.float64)
