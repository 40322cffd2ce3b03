"""Named-tensor container (`.ptc`): one format for datasets, checkpoints,
prompt embeddings, and predictions.

Layout: 4-byte magic ``PTC1``, little-endian uint32 manifest length, UTF-8
JSON manifest, then a contiguous blob of row-major little-endian float32 or
float64 tensors. The manifest maps each name to dtype/shape/offset and can
carry an arbitrary JSON ``meta`` block.

Writing is deterministic (names sorted, compact JSON, no timestamps) and
atomic (temp file + rename), so identical inputs produce byte-identical
files and concurrent readers never observe partial writes.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .exceptions import ConfigError

__all__ = ["write_container", "read_container"]

MAGIC = b"PTC1"
FORMAT_VERSION = 1

_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


def _dtype_code(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f4"
    if arr.dtype == np.float64:
        return "f8"
    raise ConfigError(f"container holds 32/64-bit floats only, got {arr.dtype}")


def write_container(path, tensors: dict, meta: dict | None = None) -> None:
    """Write name->ndarray map plus optional JSON metadata to `path`."""
    index = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        code = _dtype_code(arr)
        raw = arr.astype(_DTYPES[code], copy=False).tobytes()
        index[name] = {
            "dtype": code,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        chunks.append(raw)
        offset += len(raw)

    manifest = {
        "version": FORMAT_VERSION,
        "endianness": "little",
        "layout": "row-major",
        "tensors": index,
        "meta": meta or {},
    }
    payload = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")

    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".ptc.tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(len(payload).to_bytes(4, "little"))
            f.write(payload)
            for raw in chunks:
                f.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path) -> tuple[dict, dict]:
    """Read a container; returns (tensors, meta). Unknown names are preserved."""
    path = os.fspath(path)
    try:
        f = open(path, "rb")
    except FileNotFoundError:
        raise ConfigError(f"file not found: {path}") from None
    with f:
        head = f.read(8)
        if len(head) < 8 or head[:4] != MAGIC:
            raise ConfigError(f"{path}: not a PTC container")
        man_len = int.from_bytes(head[4:8], "little")
        payload = f.read(man_len)
        if len(payload) < man_len:
            raise ConfigError(f"{path}: truncated manifest")
        try:
            manifest = json.loads(payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ConfigError(f"{path}: corrupt manifest: {e}") from e
        blob = f.read()

    if manifest.get("version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: unknown container version {manifest.get('version')!r}")

    tensors = {}
    for name, info in manifest.get("tensors", {}).items():
        code = info.get("dtype")
        if code not in _DTYPES:
            raise ConfigError(f"{path}: tensor {name!r} has unknown dtype {code!r}")
        dtype = _DTYPES[code]
        shape = tuple(info["shape"])
        offset, nbytes = info["offset"], info["nbytes"]
        if offset < 0 or offset + nbytes > len(blob):
            raise ConfigError(
                f"{path}: tensor {name!r} byte range [{offset}, {offset + nbytes}) "
                f"outside blob of {len(blob)} bytes"
            )
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if expected != nbytes:
            raise ConfigError(
                f"{path}: tensor {name!r} shape {shape} needs {expected} bytes, "
                f"manifest declares {nbytes}"
            )
        arr = np.frombuffer(blob, dtype=dtype, count=expected // dtype.itemsize, offset=offset)
        tensors[name] = arr.reshape(shape).copy()
    return tensors, manifest.get("meta", {})
