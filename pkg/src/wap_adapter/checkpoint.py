"""Named-tensor checkpoint container.

Layout (little-endian)::

    magic b"WAPC", uint32 version, uint32 tensor count, then per tensor
    uint32 name length, utf-8 name, uint32 rank, rank x uint32 dims,
    float32 payload (C order)

Tensors are written in lexicographic name order, so equal dicts give equal bytes.
"""

import struct

import numpy as np

CHECKPOINT_MAGIC = b"WAPC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(tensors) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"non-finite values in tensor {name!r}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> dict:
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"version mismatch: {version}")
        pos = 12
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) * 4
            if pos + size > len(data):
                raise CheckpointError(f"truncated payload for tensor {name!r}")
            out[name] = np.frombuffer(data[pos:pos + size], dtype="<f4").reshape(dims).astype(np.float64)
            pos += size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(data):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def save_checkpoint(path, tensors):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(tensors))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def with_prefix(prefix, tensors):
    return {f"{prefix}{k}": v for k, v in tensors.items()}


def strip_prefix(prefix, tensors):
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
