"""Dataset container: one JSON object per line plus binary sidecar vectors.

The first line is a header object carrying the format kind and version; every
following line is one patient. Short vectors (saps, labels) are stored inline;
text/image/gcn embeddings and token matrices live in little-endian float32
sidecar files under `<stem>_vectors/`, length-prefixed with unsigned 32-bit
counts. Vector fields accept either an inline list or a path string relative
to the dataset file.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fusion import DEFAULT_DIMS, FeatureBundle, FeatureCohort
from .survival import Cohort, SurvivalRecord

__all__ = [
    "Dataset",
    "DatasetError",
    "FORMAT_VERSION",
    "load_dataset",
    "save_dataset",
    "read_vector",
    "write_vector",
    "read_matrix",
    "write_matrix",
]

FORMAT_VERSION = 1

_KIND = "icusurv_dataset"
_INLINE_LIMIT = 64
_ROW_FIELDS = frozenset(
    ["patient_id", "observed_time_hours", "event", "tokens", *DEFAULT_DIMS]
)
_ID_PATTERN = re.compile(r"[A-Za-z0-9_.~-]+")
_TOKEN_DIM = DEFAULT_DIMS["text"]


class DatasetError(ValueError):
    """The file does not satisfy the dataset schema."""


@dataclass(frozen=True)
class Dataset:
    """In-memory dataset: survival features plus optional token matrices."""

    features: FeatureCohort
    tokens: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def n(self) -> int:
        return self.features.n


def write_vector(path, values) -> None:
    arr = np.asarray(values, dtype="<f4").reshape(-1)
    Path(path).write_bytes(struct.pack("<I", arr.shape[0]) + arr.tobytes())


def read_vector(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise DatasetError(f"{path}: too short for a length prefix")
    (count,) = struct.unpack("<I", data[:4])
    if len(data) != 4 + 4 * count:
        raise DatasetError(
            f"{path}: declares {count} floats but holds {len(data) - 4} bytes"
        )
    return np.frombuffer(data[4:], dtype="<f4").astype(np.float64)


def write_matrix(path, values) -> None:
    arr = np.asarray(values, dtype="<f4")
    if arr.ndim != 2:
        raise DatasetError(f"token matrices must be 2-D, got shape {arr.shape}")
    header = struct.pack("<II", arr.shape[0], arr.shape[1])
    Path(path).write_bytes(header + arr.tobytes())


def read_matrix(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise DatasetError(f"{path}: too short for a shape prefix")
    rows, cols = struct.unpack("<II", data[:8])
    if len(data) != 8 + 4 * rows * cols:
        raise DatasetError(
            f"{path}: declares {rows}x{cols} but holds {len(data) - 8} bytes"
        )
    return np.frombuffer(data[8:], dtype="<f4").astype(np.float64).reshape(rows, cols)


def _resolve_vector(value, name, base_dir):
    if isinstance(value, str):
        target = base_dir / value
        if not target.is_file():
            raise DatasetError(f"field {name!r}: sidecar {value!r} not found")
        return read_vector(target)
    if isinstance(value, list):
        return np.asarray(value, dtype=np.float64)
    raise DatasetError(f"field {name!r}: expected a list or a path string")


def _parse_row(obj, base_dir):
    unknown = set(obj) - _ROW_FIELDS
    if unknown:
        raise DatasetError(f"unknown fields: {', '.join(sorted(unknown))}")
    for name in ("patient_id", "observed_time_hours", "event", "saps"):
        if name not in obj:
            raise DatasetError(f"missing required field {name!r}")
    if not isinstance(obj["patient_id"], str):
        raise DatasetError("field 'patient_id': must be a string")
    if not isinstance(obj["event"], bool):
        raise DatasetError("field 'event': must be true or false")
    if not isinstance(obj["observed_time_hours"], (int, float)) or isinstance(
        obj["observed_time_hours"], bool
    ):
        raise DatasetError("field 'observed_time_hours': must be a number")
    record = SurvivalRecord(
        patient_id=obj["patient_id"],
        observed_time=float(obj["observed_time_hours"]),
        event=obj["event"],
    )
    vectors = {}
    for name in DEFAULT_DIMS:
        if name in obj:
            vectors[name] = _resolve_vector(obj[name], name, base_dir)
    try:
        bundle = FeatureBundle(**vectors)
    except ValueError as exc:
        raise DatasetError(str(exc)) from None
    tokens = None
    if "tokens" in obj:
        if not isinstance(obj["tokens"], str):
            raise DatasetError("field 'tokens': must be a sidecar path string")
        target = base_dir / obj["tokens"]
        if not target.is_file():
            raise DatasetError(f"field 'tokens': sidecar {obj['tokens']!r} not found")
        tokens = read_matrix(target)
        if tokens.shape[1] != _TOKEN_DIM:
            raise DatasetError(
                f"field 'tokens': embeddings must have {_TOKEN_DIM} columns, "
                f"got {tokens.shape[1]}"
            )
    return record, bundle, tokens


def load_dataset(path) -> Dataset:
    """Parse and validate; errors carry the 1-based line number."""
    path = Path(path)
    base_dir = path.parent
    records = []
    bundles = []
    token_map = {}
    seen = set()
    header = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: not valid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DatasetError(f"line {lineno}: expected an object")
            if header is None:
                if obj.get("kind") != _KIND:
                    raise DatasetError(f"line {lineno}: not a {_KIND} header")
                if obj.get("format_version") != FORMAT_VERSION:
                    raise DatasetError(
                        f"line {lineno}: unsupported format_version "
                        f"{obj.get('format_version')!r}"
                    )
                header = obj
                continue
            try:
                record, bundle, tokens = _parse_row(obj, base_dir)
            except DatasetError as exc:
                raise DatasetError(f"line {lineno}: {exc}") from None
            except ValueError as exc:
                raise DatasetError(f"line {lineno}: {exc}") from None
            if record.patient_id in seen:
                raise DatasetError(
                    f"line {lineno}: duplicate patient_id {record.patient_id!r}"
                )
            seen.add(record.patient_id)
            records.append(record)
            bundles.append(bundle)
            if tokens is not None:
                token_map[record.patient_id] = tokens
    if header is None:
        raise DatasetError(f"{path}: empty file, expected a header line")
    if not records:
        raise DatasetError(f"{path}: no patient rows")
    features = FeatureCohort(cohort=Cohort(records), bundles=tuple(bundles))
    return Dataset(features=features, tokens=token_map)


def save_dataset(dataset: Dataset, path) -> Path:
    """Write rows in order; long vectors and token matrices become sidecars."""
    path = Path(path)
    vec_dir = path.parent / f"{path.stem}_vectors"
    needs_dir = any(dataset.tokens) or any(
        b.get(name) is not None and b.get(name).shape[0] > _INLINE_LIMIT
        for b in dataset.features.bundles
        for name in DEFAULT_DIMS
    )
    if needs_dir:
        vec_dir.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"kind": _KIND, "format_version": dataset.format_version}, sort_keys=True)]
    for record, bundle in zip(dataset.features.cohort.records, dataset.features.bundles):
        pid = record.patient_id
        if not _ID_PATTERN.fullmatch(pid):
            raise DatasetError(
                f"patient_id {pid!r} is not filesystem-safe "
                "(allowed: letters, digits, '_', '.', '~', '-')"
            )
        row = {
            "patient_id": pid,
            "observed_time_hours": record.observed_time,
            "event": bool(record.event),
        }
        for name in DEFAULT_DIMS:
            values = bundle.get(name)
            if values is None:
                continue
            if values.shape[0] <= _INLINE_LIMIT:
                row[name] = [float(v) for v in values]
            else:
                sidecar = vec_dir / f"{pid}.{name}.bin"
                write_vector(sidecar, values)
                row[name] = f"{vec_dir.name}/{sidecar.name}"
        if pid in dataset.tokens:
            sidecar = vec_dir / f"{pid}.tokens.bin"
            write_matrix(sidecar, dataset.tokens[pid])
            row["tokens"] = f"{vec_dir.name}/{sidecar.name}"
        lines.append(json.dumps(row, sort_keys=True))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
