"""Deterministic array container: a JSON header followed by raw array bytes.

Used for model checkpoints and the feature cache. The format is designed so
that writing the same payload twice produces byte-identical files (no
timestamps, sorted keys, fixed layout), which makes reruns checksum-stable.

Layout
------
    bytes 0..7    magic  b"HTRIAGE1"
    bytes 8..15   header length ``n`` as little-endian uint64
    bytes 16..16+n  UTF-8 JSON header
    remainder     raw array bytes, C-order, little-endian, concatenated in
                  header order

Header schema::

    {
      "arrays": [{"name": str, "dtype": str, "shape": [int, ...]}, ...],
      "meta": {...}          # arbitrary JSON-serializable metadata
    }
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .errors import DataError

MAGIC = b"HTRIAGE1"

_ALLOWED_DTYPES = {"<f8", "<f4", "<i8", "<i4", "<u8", "|u1"}


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def save(path, arrays: dict, meta: dict | None = None) -> None:
    """Write ``arrays`` (name -> ndarray) plus ``meta`` atomically to ``path``."""
    entries = []
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        arr = arr.astype(dtype, copy=False)
        dstr = arr.dtype.str
        if dstr not in _ALLOWED_DTYPES:
            raise ValueError(f"unsupported dtype {dstr!r} for array {name!r}")
        entries.append({"name": name, "dtype": dstr, "shape": list(arr.shape)})
        blobs.append(arr.tobytes(order="C"))
    header = _canonical_json({"arrays": entries, "meta": meta or {}}).encode("utf-8")

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-container-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(len(header).to_bytes(8, "little"))
            fh.write(header)
            for blob in blobs:
                fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def load(path) -> tuple[dict, dict]:
    """Read a container; returns (arrays, meta)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise DataError(f"{path}: not a container file (bad magic)")
        (hlen,) = (int.from_bytes(fh.read(8), "little"),)
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: corrupt container header: {exc}") from exc
        arrays = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise DataError(f"{path}: truncated array {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return arrays, header.get("meta", {})
