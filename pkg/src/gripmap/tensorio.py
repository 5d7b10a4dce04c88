"""Binary tensor and checkpoint containers.

Tensor files ("GMT1"): magic, u32 rank, u32 dims..., then the payload in
row-major order, little-endian.  Element type is implied by payload size:
1 byte/element = uint8, 4 = float32, 8 = float64.

Checkpoint files ("GMCK"): magic, a length-prefixed UTF-8 text block echoing
the model configuration, then a count of named tensors, each stored as
(u32 name length, name, u32 blob length, GMT1 blob).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

TENSOR_MAGIC = b"GMT1"
CHECKPOINT_MAGIC = b"GMCK"

_ITEMSIZE_TO_DTYPE = {1: np.uint8, 4: np.float32, 8: np.float64}
_WRITABLE_DTYPES = (np.uint8, np.float32, np.float64)


def tensor_to_bytes(array: np.ndarray) -> bytes:
    """Serialize an array to a GMT1 blob.

    Bool arrays are stored as uint8; everything else must already be one of
    uint8 / float32 / float64.
    """
    if array.dtype == np.bool_:
        array = array.astype(np.uint8)
    if array.dtype not in _WRITABLE_DTYPES:
        raise FormatError(f"unsupported tensor dtype {array.dtype}")
    array = np.ascontiguousarray(array)
    header = TENSOR_MAGIC + struct.pack("<I", array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    if array.dtype != np.uint8:
        array = array.astype(array.dtype.newbyteorder("<"), copy=False)
    return header + array.tobytes()


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    """Parse a complete GMT1 blob (header plus the entire payload)."""
    if blob[:4] != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    offset = 4
    if len(blob) < offset + 4:
        raise FormatError("truncated tensor header")
    (rank,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if rank > 8:
        raise FormatError(f"implausible tensor rank {rank}")
    if len(blob) < offset + 4 * rank:
        raise FormatError("truncated tensor dims")
    dims = struct.unpack_from(f"<{rank}I", blob, offset)
    offset += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = len(blob) - offset
    if count == 0:
        if payload:
            raise FormatError("nonempty payload for empty shape")
        return np.zeros(dims, dtype=np.float32)
    if payload % count:
        raise FormatError(f"payload size {payload} does not match shape {dims}")
    dtype = _ITEMSIZE_TO_DTYPE.get(payload // count)
    if dtype is None:
        raise FormatError(f"payload size {payload} does not match shape {dims}")
    array = np.frombuffer(blob, dtype=np.dtype(dtype).newbyteorder("<"),
                          count=count, offset=offset)
    return array.reshape(dims).astype(dtype)


def write_tensor(path: Path | str, array: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(array))


def read_tensor(path: Path | str) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def write_checkpoint(path: Path | str, config_text: str,
                     tensors: dict[str, np.ndarray]) -> None:
    """Write a GMCK checkpoint: config echo plus named tensors."""
    parts = [CHECKPOINT_MAGIC]
    encoded = config_text.encode("utf-8")
    parts.append(struct.pack("<I", len(encoded)))
    parts.append(encoded)
    parts.append(struct.pack("<I", len(tensors)))
    for name, array in tensors.items():
        name_bytes = name.encode("utf-8")
        blob = tensor_to_bytes(array)
        parts.append(struct.pack("<I", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<I", len(blob)))
        parts.append(blob)
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path: Path | str) -> tuple[str, dict[str, np.ndarray]]:
    """Read a GMCK checkpoint, returning (config text, named tensors)."""
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    offset = 4
    try:
        (config_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        config_text = blob[offset:offset + config_len].decode("utf-8")
        offset += config_len
        (n_tensors,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (blob_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            tensors[name] = tensor_from_bytes(blob[offset:offset + blob_len])
            offset += blob_len
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from exc
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return config_text, tensors
