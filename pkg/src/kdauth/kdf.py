"""KDF feature container.

Layout::

    b"KDF1" | uint32 LE header length | UTF-8 JSON header | float32 LE payload

The header carries ``dtype`` ("f32"), ``layout`` ("kdi" | "kds"), the full
``shape`` (leading axis = samples), ``channel_order``, ``normalization``,
``user_ids`` and ``labels`` (or null).  The payload is row-major.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .features import FeatureSet

MAGIC = b"KDF1"


class KDFError(ValueError):
    pass


def encode(fs: FeatureSet) -> bytes:
    data = np.ascontiguousarray(fs.data, dtype="<f4")
    header = {
        "dtype": "f32",
        "layout": fs.layout,
        "shape": list(data.shape),
        "channel_order": list(fs.channel_order),
        "normalization": fs.normalization,
        "user_ids": list(fs.user_ids),
        "labels": None if fs.labels is None else [int(v) for v in fs.labels],
    }
    if len(fs.user_ids) != data.shape[0]:
        raise KDFError("one user id per sample required")
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(blob)) + blob + data.tobytes(order="C")


def decode(raw: bytes) -> FeatureSet:
    if raw[:4] != MAGIC:
        raise KDFError("not a KDF1 file (bad magic)")
    if len(raw) < 8:
        raise KDFError("truncated header")
    (n,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + n].decode("utf-8"))
    if header.get("dtype") != "f32":
        raise KDFError(f"unsupported dtype {header.get('dtype')!r}")
    shape = tuple(header["shape"])
    payload = raw[8 + n:]
    expected = int(np.prod(shape)) * 4
    if len(payload) != expected:
        raise KDFError(f"payload is {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return FeatureSet(
        data=data,
        user_ids=list(header["user_ids"]),
        layout=header["layout"],
        channel_order=list(header["channel_order"]),
        normalization=header["normalization"],
        labels=header.get("labels"),
    )


def atomic_write(path: str | Path, payload: bytes) -> None:
    """Write via a temp file in the target directory and rename into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, fs: FeatureSet) -> None:
    atomic_write(path, encode(fs))


def load(path) -> FeatureSet:
    return decode(Path(path).read_bytes())
