"""Self-describing binary archive of named arrays.

One flat container used for every persisted artifact: detector weights,
embedder weights and the gallery index all go through this format. The
byte layout is fully determined by its contents (no timestamps, no
pickle), so identical arrays serialize to identical bytes — which is what
makes weight fingerprints meaningful.

Layout (all integers little-endian):

    magic b"SVAR" | u32 version | u32 meta_len | meta JSON (sorted keys)
    u32 n_records, then per record:
        u32 name_len | name utf-8
        u32 dtype_len | numpy dtype str, e.g. "<f4"
        u32 ndim | u64 * ndim shape
        u64 data_len | raw C-order bytes
"""

from __future__ import annotations

import hashlib
import io
import json
import struct

import numpy as np

MAGIC = b"SVAR"
VERSION = 1


class ArchiveError(RuntimeError):
    """Raised when an archive is truncated, corrupt or of the wrong kind."""


def _write_u32(fh, value: int) -> None:
    fh.write(struct.pack("<I", value))


def _write_u64(fh, value: int) -> None:
    fh.write(struct.pack("<Q", value))


def _read(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ArchiveError("archive truncated")
    return data


def _read_u32(fh) -> int:
    return struct.unpack("<I", _read(fh, 4))[0]


def _read_u64(fh) -> int:
    return struct.unpack("<Q", _read(fh, 8))[0]


def dump_arrays(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    """Serialize named arrays (insertion order preserved) to bytes."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    _write_u32(buf, VERSION)
    meta_blob = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    _write_u32(buf, len(meta_blob))
    buf.write(meta_blob)
    _write_u32(buf, len(arrays))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        name_b = name.encode("utf-8")
        dtype_b = arr.dtype.str.encode("ascii")
        _write_u32(buf, len(name_b))
        buf.write(name_b)
        _write_u32(buf, len(dtype_b))
        buf.write(dtype_b)
        _write_u32(buf, arr.ndim)
        for dim in arr.shape:
            _write_u64(buf, dim)
        raw = arr.tobytes()
        _write_u64(buf, len(raw))
        buf.write(raw)
    return buf.getvalue()


def load_arrays(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    """Inverse of :func:`dump_arrays`."""
    fh = io.BytesIO(data)
    if _read(fh, 4) != MAGIC:
        raise ArchiveError("not a shelfvision archive (bad magic)")
    version = _read_u32(fh)
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    try:
        meta = json.loads(_read(fh, _read_u32(fh)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"corrupt archive metadata: {exc}") from exc
    arrays: dict[str, np.ndarray] = {}
    for _ in range(_read_u32(fh)):
        name = _read(fh, _read_u32(fh)).decode("utf-8")
        dtype = np.dtype(_read(fh, _read_u32(fh)).decode("ascii"))
        ndim = _read_u32(fh)
        shape = tuple(_read_u64(fh) for _ in range(ndim))
        raw = _read(fh, _read_u64(fh))
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if len(raw) != expected:
            raise ArchiveError(f"record {name!r} has inconsistent size")
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    if fh.read(1):
        raise ArchiveError("trailing bytes after last record")
    return arrays, meta


def save_archive(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    data = dump_arrays(arrays, meta)
    with open(path, "wb") as fh:
        fh.write(data)


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ArchiveError(f"cannot read archive {path}: {exc}") from exc
    return load_arrays(data)


def fingerprint(data: bytes) -> str:
    """Hex digest identifying an archive's exact bytes."""
    return hashlib.sha256(data).hexdigest()


def fingerprint_file(path) -> str:
    with open(path, "rb") as fh:
        return fingerprint(fh.read())
