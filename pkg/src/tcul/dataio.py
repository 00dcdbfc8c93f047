"""On-disk formats.

Datasets are a pair of files sharing a stem:

* ``<stem>.feat``: ``b"TCUL"``, u16 version, u32 count, u32 dim, then
  count*dim float32 values, row-major; all little-endian.
* ``<stem>.csv``: ``sample_id,camera_id,frame_id,role,identity`` with one
  row per feature row, in the same order; identity is empty when withheld.

Model weights are u32 ``d_raw, d_hidden, d_emb`` followed by W1, b1, W2, b2
as little-endian float64. Configs are ``key=value`` text with ``#``
comments. Run records are JSON lines, one object per iteration.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import struct
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .core import WITHHELD, Dataset, PipelineConfig
from .embedder import PARAM_NAMES, EmbedderModel
from .errors import (BadMagic, ConfigError, CountMismatch, DataIOError, MalformedRow, ParseError,
                     TruncatedFile, VersionMismatch)

MAGIC = b"TCUL"
VERSION = 1
_HEADER = struct.Struct("<4sHII")
CSV_COLUMNS = ["sample_id", "camera_id", "frame_id", "role", "identity"]
RECORD_KEYS = ("iter", "reliable_count", "mean_triplet_loss", "rank1", "rank5", "map")


def _paths(stem):
    stem = str(stem)
    return Path(stem + ".feat"), Path(stem + ".csv")


def save_dataset(ds: Dataset, path_stem) -> None:
    feat_path, csv_path = _paths(path_stem)
    try:
        feat_path.parent.mkdir(parents=True, exist_ok=True)
        with open(feat_path, "wb") as f:
            f.write(_HEADER.pack(MAGIC, VERSION, len(ds), ds.d_raw))
            f.write(np.ascontiguousarray(ds.features, dtype="<f4").tobytes())
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(CSV_COLUMNS)
            for sid, cam, fid, ident in zip(ds.sample_ids.tolist(), ds.camera_ids.tolist(),
                                            ds.frame_ids.tolist(), ds.identities.tolist()):
                w.writerow([sid, cam, fid, ds.role, "" if ident == WITHHELD else ident])
    except OSError as e:
        raise DataIOError(f"write failed: {e.strerror or e}", path=getattr(e, "filename", None) or path_stem) from e


def read_features(path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataIOError(f"read failed: {e.strerror or e}", path=path) from e
    if len(data) < _HEADER.size:
        raise TruncatedFile(f"file has {len(data)} bytes, shorter than the {_HEADER.size}-byte header", path)
    magic, version, count, dim = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}", path)
    if version != VERSION:
        raise VersionMismatch(f"version {version}, expected {VERSION}", path)
    expected = _HEADER.size + 4 * count * dim
    if len(data) < expected:
        raise TruncatedFile(f"expected {expected} bytes, found {len(data)}", path)
    if len(data) > expected:
        raise CountMismatch(f"{len(data) - expected} trailing bytes after {count}x{dim} floats", path)
    return np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(count, dim).astype(np.float32)


def _int_field(value, name, line, path, allow_empty=False):
    if allow_empty and value == "":
        return WITHHELD
    try:
        return int(value)
    except ValueError:
        raise MalformedRow(f"line {line}: {name}={value!r} is not an integer", path) from None


def load_dataset(path_stem) -> Dataset:
    feat_path, csv_path = _paths(path_stem)
    feats = read_features(feat_path)
    try:
        with open(csv_path, newline="") as f:
            rows = list(csv.reader(f))
    except OSError as e:
        raise DataIOError(f"read failed: {e.strerror or e}", path=csv_path) from e
    if not rows or rows[0] != CSV_COLUMNS:
        raise MalformedRow(f"header must be {','.join(CSV_COLUMNS)}", csv_path)
    body = rows[1:]
    if len(body) != feats.shape[0]:
        raise CountMismatch(f"{len(body)} metadata rows but {feats.shape[0]} feature rows", csv_path)
    cols = {n: [] for n in ("sample_ids", "camera_ids", "frame_ids", "identities")}
    roles = set()
    for line, row in enumerate(body, start=2):
        if len(row) != len(CSV_COLUMNS):
            raise MalformedRow(f"line {line}: expected {len(CSV_COLUMNS)} fields, got {len(row)}", csv_path)
        cols["sample_ids"].append(_int_field(row[0], "sample_id", line, csv_path))
        cols["camera_ids"].append(_int_field(row[1], "camera_id", line, csv_path))
        cols["frame_ids"].append(_int_field(row[2], "frame_id", line, csv_path))
        cols["identities"].append(_int_field(row[4], "identity", line, csv_path, allow_empty=True))
        roles.add(row[3])
    if len(roles) > 1:
        raise MalformedRow(f"mixed roles in one file: {sorted(roles)}", csv_path)
    role = roles.pop() if roles else "target_train"
    return Dataset(features=feats, role=role, **cols)


# model weights

_MODEL_HEADER = struct.Struct("<III")


def save_model(model: EmbedderModel, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_MODEL_HEADER.pack(model.d_raw, model.d_hidden, model.d_emb))
        for name in PARAM_NAMES:
            f.write(np.ascontiguousarray(getattr(model, name), dtype="<f8").tobytes())


def load_model(path) -> EmbedderModel:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _MODEL_HEADER.size:
        raise TruncatedFile("model file shorter than its header", path)
    d_raw, d_hidden, d_emb = _MODEL_HEADER.unpack_from(data)
    shapes = {"W1": (d_hidden, d_raw), "b1": (d_hidden,), "W2": (d_emb, d_hidden), "b2": (d_emb,)}
    total = _MODEL_HEADER.size + 8 * sum(int(np.prod(s)) for s in shapes.values())
    if len(data) != total:
        raise TruncatedFile(f"expected {total} bytes for dims {d_raw}/{d_hidden}/{d_emb}, found {len(data)}", path)
    offset = _MODEL_HEADER.size
    tensors = {}
    for name in PARAM_NAMES:
        n = int(np.prod(shapes[name]))
        tensors[name] = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shapes[name]).astype(np.float64)
        offset += 8 * n
    return EmbedderModel(**tensors)


# key=value config files

def parse_kv(text: str, source="<config>") -> Dict[str, str]:
    out = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{line_no}: expected key=value, got {raw.strip()!r}")
        if key in out:
            raise ConfigError(f"{source}:{line_no}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(value: str, default, key: str):
    try:
        if isinstance(default, bool):
            if value.lower() in ("1", "true", "yes"):
                return True
            if value.lower() in ("0", "false", "no"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            parts = [p.strip() for p in value.replace(":", ",").split(",")]
            return tuple(type(d)(p) for d, p in zip(default, parts, strict=True))
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    return value


def dataclass_from_kv(cls, kv: Dict[str, str], base=None):
    """Build ``cls`` from string key/values; unknown keys are errors."""
    base = base if base is not None else cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(kv) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) for {cls.__name__}: {', '.join(unknown)}")
    vals = {f.name: getattr(base, f.name) for f in dataclasses.fields(cls)}
    for key, value in kv.items():
        vals[key] = _coerce(value, vals[key], key)
    return cls(**vals)


def dataclass_to_kv(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def load_config(path) -> PipelineConfig:
    path = Path(path)
    return dataclass_from_kv(PipelineConfig, parse_kv(path.read_text(), str(path)))


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(dataclass_to_kv(cfg))


# run records

def _json_value(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, np.generic):
        return v.item()
    return v


def save_run_record(entries: List[dict], path) -> None:
    """Write one JSON object per iteration entry (non-finite floats become null)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for e in entries:
            f.write(json.dumps({k: _json_value(v) for k, v in e.items()}) + "\n")


def load_run_record(path) -> List[dict]:
    path = Path(path)
    entries = []
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON ({e.msg})", line_no, path) from None
            if not isinstance(obj, dict):
                raise ParseError("expected a JSON object", line_no, path)
            missing = [k for k in RECORD_KEYS if k not in obj]
            if missing:
                raise ParseError(f"missing key(s) {', '.join(missing)}", line_no, path)
            entries.append(obj)
    return entries
