"""Single-file checkpoint container: one JSON text header line, then raw
little-endian float payloads concatenated in header record order.

The header carries names, shapes, dtype, plan fields, and free-form meta;
a CRC32 over the payload makes corruption an explicit error rather than a
silent misread.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

from .errors import IntegrityError
from .model import SplitPlan

MAGIC = "offsite-fl-ckpt"
VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], dtype: str,
                    plan: SplitPlan | None = None, meta: dict | None = None) -> None:
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}, got {dtype!r}")
    wire = np.dtype(_DTYPES[dtype])
    names = list(arrays)
    payload = b"".join(np.ascontiguousarray(arrays[n], dtype=wire).tobytes()
                       for n in names)
    header = {
        "magic": MAGIC,
        "version": VERSION,
        "dtype": dtype,
        "records": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
        "plan": plan.to_dict() if plan is not None else None,
        "meta": meta or {},
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    blob = json.dumps(header, sort_keys=True).encode() + b"\n" + payload
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], str,
                                               SplitPlan | None, dict]:
    """Returns (arrays, dtype, plan, meta); raises IntegrityError on damage."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise IntegrityError(f"{path}: no header line")
    try:
        header = json.loads(raw[:nl].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: unreadable header ({exc})") from exc
    if not isinstance(header, dict) or header.get("magic") != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint file")
    if header.get("version") != VERSION:
        raise IntegrityError(f"{path}: unsupported version {header.get('version')}")
    dtype = header["dtype"]
    if dtype not in _DTYPES:
        raise IntegrityError(f"{path}: unknown dtype {dtype!r}")
    payload = raw[nl + 1:]
    if len(payload) != header["payload_bytes"]:
        raise IntegrityError(
            f"{path}: payload is {len(payload)} bytes, header says {header['payload_bytes']}")
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise IntegrityError(f"{path}: payload checksum mismatch")
    wire = np.dtype(_DTYPES[dtype])
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for rec in header["records"]:
        shape = tuple(rec["shape"])
        n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = n_items * wire.itemsize
        if offset + nbytes > len(payload):
            raise IntegrityError(f"{path}: record {rec['name']} overruns payload")
        arrays[rec["name"]] = np.frombuffer(
            payload, dtype=wire, count=n_items, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise IntegrityError(f"{path}: {len(payload) - offset} trailing payload bytes")
    plan = SplitPlan.from_dict(header["plan"]) if header.get("plan") else None
    return arrays, dtype, plan, header.get("meta", {})
