"""Byte-stable encoding helpers shared by checkpoints and reports."""

from __future__ import annotations

import base64
import hashlib
import json
from typing import Any

import numpy as np


def encode_array(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr).reshape(np.shape(arr))
    if a.dtype.kind == "f":
        a = a.astype("<f8", copy=False)
    elif a.dtype.kind in "iub":
        a = a.astype("<i8", copy=False)
    return {
        "dtype": a.dtype.str,
        "shape": list(a.shape),
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def decode_array(doc: dict) -> np.ndarray:
    raw = base64.b64decode(doc["data"])
    arr = np.frombuffer(raw, dtype=np.dtype(doc["dtype"])).reshape(tuple(doc["shape"]))
    return arr.copy()


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def digest_of(obj: Any) -> str:
    return sha256_hex(canonical_json(obj))


def derive_seed(*parts: Any) -> int:
    """Deterministic 63-bit seed from an arbitrary tuple of JSON-able parts."""
    h = hashlib.sha256(canonical_json([str(p) for p in parts]).encode()).digest()
    return int.from_bytes(h[:8], "little") & ((1 << 63) - 1)
