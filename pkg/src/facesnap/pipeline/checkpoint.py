"""Versioned named-tensor checkpoint container.

Layout: 8-byte magic, uint32 format version, uint64 header length, a
canonical JSON header (sorted keys), then raw little-endian tensor bytes
concatenated in lexicographic tensor-name order. Saving the loaded content
again reproduces the file byte for byte; a truncated or inconsistent file is
rejected before any state is applied.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from ..errors import CheckpointVersionError, CorruptCheckpointError

MAGIC = b"FSNAPCK\x00"
FORMAT_VERSION = 1

_DTYPES = {
    "f32": (torch.float32, "<f4"),
    "f64": (torch.float64, "<f8"),
    "i64": (torch.int64, "<i8"),
    "i32": (torch.int32, "<i4"),
    "u8": (torch.uint8, "|u1"),
    "bool": (torch.bool, "|b1"),
}
_DTYPE_OF_TORCH = {td: name for name, (td, _) in _DTYPES.items()}


def save_container(path: str | Path, meta: dict, tensors: dict[str, torch.Tensor]) -> None:
    """Atomically write metadata plus a named-tensor table."""
    names = sorted(tensors)
    manifest = []
    blobs = []
    offset = 0
    for name in names:
        tensor = tensors[name].detach().cpu().contiguous()
        code = _DTYPE_OF_TORCH.get(tensor.dtype)
        if code is None:
            raise ValueError(f"tensor {name!r} has unsupported dtype {tensor.dtype}")
        raw = tensor.numpy().astype(_DTYPES[code][1]).tobytes()
        manifest.append({
            "name": name,
            "dtype": code,
            "shape": list(tensor.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = dict(meta)
    header["format_version"] = FORMAT_VERSION
    header["tensors"] = manifest
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_container(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Read and fully validate a container; returns (meta, tensors)."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CorruptCheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    prefix = len(MAGIC) + 4 + 8
    if len(blob) < prefix:
        raise CorruptCheckpointError(f"checkpoint {path} is truncated before the header")
    if blob[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"checkpoint {path} has wrong magic bytes")
    (version,) = struct.unpack_from("<I", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint {path} has format version {version}, this build reads {FORMAT_VERSION}")
    (header_len,) = struct.unpack_from("<Q", blob, len(MAGIC) + 4)
    if len(blob) < prefix + header_len:
        raise CorruptCheckpointError(f"checkpoint {path} is truncated inside the header")
    try:
        header = json.loads(blob[prefix:prefix + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"checkpoint {path} header is not valid JSON: {exc}") from exc
    manifest = header.get("tensors")
    if not isinstance(manifest, list):
        raise CorruptCheckpointError(f"checkpoint {path} header has no tensor manifest")
    payload = blob[prefix + header_len:]
    expected = sum(entry["nbytes"] for entry in manifest)
    if len(payload) != expected:
        raise CorruptCheckpointError(
            f"checkpoint {path} payload is {len(payload)} bytes, manifest expects {expected}")
    tensors = {}
    for entry in manifest:
        code = entry["dtype"]
        if code not in _DTYPES:
            raise CorruptCheckpointError(
                f"checkpoint {path}: tensor {entry['name']!r} has unknown dtype {code!r}")
        torch_dtype, np_dtype = _DTYPES[code]
        start, nbytes = entry["offset"], entry["nbytes"]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if nbytes != count * np.dtype(np_dtype).itemsize or start + nbytes > len(payload):
            raise CorruptCheckpointError(
                f"checkpoint {path}: tensor {entry['name']!r} manifest entry is inconsistent")
        array = np.frombuffer(payload, dtype=np_dtype, count=count, offset=start).copy()
        tensors[entry["name"]] = torch.from_numpy(array.reshape(shape)).to(torch_dtype)
    return header, tensors
