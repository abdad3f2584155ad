"""Binary checkpoints: parameters plus Adam moments.

Layout (little-endian): ``NAFC``, version u16, 32-byte config digest, tensor
count u32, then per tensor a u16 name length, the UTF-8 name, a u8 rank, u32
dims and float32 data. Optimiser state uses the reserved ``adam.`` prefix.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .objectives import AdamState

MAGIC = b"NAFC"
VERSION = 1
DIGEST_BYTES = 32
ADAM_PREFIX = "adam."


class CheckpointError(ValueError):
    pass


class CheckpointIncompatibleError(CheckpointError):
    pass


def _pack_tensor(name: str, value) -> bytes:
    arr = np.asarray(value, dtype="<f4")
    encoded = name.encode("utf-8")
    head = struct.pack("<H", len(encoded)) + encoded + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def write_checkpoint(path, params: dict, digest: bytes, adam: AdamState | None = None) -> None:
    if len(digest) != DIGEST_BYTES:
        raise CheckpointError(f"digest must be {DIGEST_BYTES} bytes")
    tensors = [(name, params[name]) for name in sorted(params)]
    if adam is not None:
        tensors.append((ADAM_PREFIX + "step", np.array(adam.step)))
        for name in sorted(adam.m):
            tensors.append((f"{ADAM_PREFIX}m.{name}", adam.m[name]))
            tensors.append((f"{ADAM_PREFIX}v.{name}", adam.v[name]))
    body = b"".join(_pack_tensor(n, v) for n, v in tensors)
    Path(path).write_bytes(MAGIC + struct.pack("<H", VERSION) + digest + struct.pack("<I", len(tensors)) + body)


def read_checkpoint(path):
    """Returns ``(params, digest, adam_tensors)``; arrays come back as float64."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    digest = raw[6 : 6 + DIGEST_BYTES]
    offset = 6 + DIGEST_BYTES
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    params, adam = {}, {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, offset)
            name = raw[offset + 2 : offset + 2 + nlen].decode("utf-8")
            offset += 2 + nlen
            (rank,) = struct.unpack_from("<B", raw, offset)
            shape = struct.unpack_from(f"<{rank}I", raw, offset + 1)
            offset += 1 + 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if offset + 4 * size > len(raw):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            arr = np.frombuffer(raw, dtype="<f4", count=size, offset=offset).reshape(shape).astype(np.float64)
            offset += 4 * size
            (adam if name.startswith(ADAM_PREFIX) else params)[name] = arr
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return params, digest, adam


def adam_from_tensors(tensors: dict, template: AdamState) -> AdamState:
    step = int(tensors.get(ADAM_PREFIX + "step", 0))
    m = {k[len(ADAM_PREFIX) + 2 :]: v for k, v in tensors.items() if k.startswith(ADAM_PREFIX + "m.")}
    v = {k[len(ADAM_PREFIX) + 2 :]: v for k, v in tensors.items() if k.startswith(ADAM_PREFIX + "v.")}
    return AdamState(template.lr_backbone, template.lr_head, template.beta1, template.beta2,
                     template.eps_opt, step, m, v)


def check_compatible(params: dict, digest: bytes, expected_digest: bytes, dim: int) -> None:
    for name, value in params.items():
        if value.ndim == 2 and value.shape[1] != dim:
            raise CheckpointIncompatibleError(
                f"checkpoint tensor {name} has dim {value.shape[1]}, config expects {dim}")
    if digest != expected_digest:
        raise CheckpointIncompatibleError("checkpoint was written for a different model configuration")
