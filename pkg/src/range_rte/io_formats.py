"""File formats: CSV logs, JSON configs and reports.

Odometry CSV: header ``t,px,py,pz,qx,qy,qz,qw`` (seconds, meters,
quaternion scalar-last). Range CSV: header ``t,d``. UTF-8, '.' decimal,
LF newlines. Floats are written with repr so files round-trip
bit-exactly; all writes are atomic (temp file + rename).
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile
from typing import Iterable

import numpy as np

from .geometry import Pose
from .measurement import RangeSample

ODOM_HEADER = ["t", "px", "py", "pz", "qx", "qy", "qz", "qw"]
RANGE_HEADER = ["t", "d"]


class ParseError(ValueError):
    """Malformed input file or config."""


def _fmt(x) -> str:
    return repr(float(x))


def atomic_write_text(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_odometry_csv(path: str, poses: Iterable[Pose]) -> None:
    lines = [",".join(ODOM_HEADER)]
    for p in poses:
        lines.append(
            ",".join([_fmt(p.t)] + [_fmt(v) for v in p.p] + [_fmt(v) for v in p.q])
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_odometry_csv(path: str) -> list[Pose]:
    poses = []
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ODOM_HEADER:
                raise ParseError(f"{path}: expected header {','.join(ODOM_HEADER)}")
            for ln, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 8:
                    raise ParseError(f"{path}:{ln}: expected 8 fields, got {len(row)}")
                vals = [float(v) for v in row]
                poses.append(Pose(t=vals[0], p=np.array(vals[1:4]), q=np.array(vals[4:8])))
    except (ValueError, OSError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"{path}: {exc}") from exc
    return poses


def write_ranges_csv(path: str, ranges: Iterable[RangeSample]) -> None:
    lines = [",".join(RANGE_HEADER)]
    for r in ranges:
        lines.append(f"{_fmt(r.t)},{_fmt(r.d)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_ranges_csv(path: str) -> list[RangeSample]:
    out = []
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != RANGE_HEADER:
                raise ParseError(f"{path}: expected header {','.join(RANGE_HEADER)}")
            for ln, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 2:
                    raise ParseError(f"{path}:{ln}: expected 2 fields, got {len(row)}")
                out.append(RangeSample(t=float(row[0]), d=float(row[1])))
    except (ValueError, OSError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"{path}: {exc}") from exc
    return out


def load_config(path: str, allowed_keys: set, defaults: dict) -> dict:
    """Strict config loader: unknown keys are rejected, defaults filled in."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ParseError(f"{path}: config must be a JSON object")
    unknown = set(raw) - allowed_keys
    if unknown:
        raise ParseError(f"{path}: unknown config keys: {sorted(unknown)}")
    cfg = dict(defaults)
    cfg.update(raw)
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def dump_json(path: str, payload: dict) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def jsonable(obj):
    """Recursively convert numpy scalars/arrays for json.dumps."""
    if isinstance(obj, dict):
        return {k: jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and (np.isnan(obj) or np.isinf(obj)):
        return None if np.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj
