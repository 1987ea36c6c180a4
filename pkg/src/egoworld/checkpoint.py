"""Checkpoint file format shared by the representation model and the policy.

Layout: magic b"EGW1", then a u32 little-endian length, then that many bytes
of UTF-8 JSON listing parameter names and shapes in order (plus free-form
metadata), then the raw little-endian float64 parameter buffers concatenated
in header order.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Optional, Tuple, Union

import numpy as np

from .autodiff import Tensor
from .errors import FormatError

MAGIC = b"EGW1"


def save_checkpoint(path, params: Mapping[str, Union[Tensor, np.ndarray]],
                    meta: Optional[dict] = None) -> None:
    entries = []
    buffers = []
    for name, p in params.items():
        arr = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape)})
        buffers.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    header = json.dumps({"params": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    blob = MAGIC + struct.pack("<I", len(header)) + header + b"".join(buffers)
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> Tuple["OrderedDict[str, np.ndarray]", dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
        entries = header["params"]
        meta = header.get("meta", {})
    except (ValueError, KeyError) as e:
        raise FormatError(f"{path}: unreadable header ({e})") from None
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    offset = 8 + hlen
    for entry in entries:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 8 if shape else 8
        chunk = raw[offset:offset + nbytes]
        if len(chunk) < nbytes:
            raise FormatError(f"{path}: truncated data for parameter {entry['name']!r}")
        params[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes after parameter data")
    return params, meta
