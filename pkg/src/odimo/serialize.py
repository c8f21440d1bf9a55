"""``ODT1`` flat binary tensor container and multi-tensor checkpoints.

Layout of one container::

    b"ODT1" | u8 dtype code | u8 rank | rank x u32 LE dims | raw LE payload

Dtype codes: 0 float32, 1 float64, 2 uint8, 3 int32, 4 int64.
A checkpoint is a directory holding one container per tensor and a
``manifest.json`` mapping tensor names to files plus free-form metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ODT1"
DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("u1"): 2,
    np.dtype("<i4"): 3,
    np.dtype("<i8"): 4,
}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class FormatError(ValueError):
    """Malformed or truncated container."""


def dumps(array) -> bytes:
    arr = np.asarray(array)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dt not in DTYPE_CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("rank above 255")
    header = MAGIC + struct.pack("<BB", DTYPE_CODES[dt], arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def loads(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise FormatError("bad magic: not an ODT1 container")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    off = 6 + 4 * rank
    if len(buf) < off:
        raise FormatError("truncated header")
    dims = struct.unpack_from(f"<{rank}I", buf, 6)
    dt = CODE_DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    payload = len(buf) - off
    if payload != expected:
        raise FormatError(f"payload is {payload} bytes, shape {tuple(dims)} of {dt} needs {expected}")
    return np.frombuffer(buf, dtype=dt, offset=off).reshape(dims).copy()


def save_tensor(path, array) -> None:
    Path(path).write_bytes(dumps(array))


def load_tensor(path) -> np.ndarray:
    return loads(Path(path).read_bytes())


def save_checkpoint(directory, tensors: dict, meta: dict | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for i, (name, arr) in enumerate(sorted(tensors.items())):
        fname = f"t{i:04d}.odt"
        save_tensor(d / fname, np.asarray(arr))
        files[name] = fname
    manifest = {"format": "odimo-checkpoint/1", "tensors": files, "meta": meta or {}}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(directory) -> tuple[dict, dict]:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"{d} has no manifest.json") from exc
    tensors = {name: load_tensor(d / fname) for name, fname in manifest["tensors"].items()}
    return tensors, manifest.get("meta", {})
