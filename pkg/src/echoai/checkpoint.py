"""EAIW weight checkpoints.

Layout (little-endian): magic ``EAIW``, u32 version, u32 tensor count, then per
tensor a u16 name length, the UTF-8 name, u8 ndim, ndim u32 extents and the
float32 payload. Tensors are written in the order given.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, SchemaError

EAIW_MAGIC = b"EAIW"
EAIW_VERSION = 1


def save_checkpoint(state: dict[str, np.ndarray], path) -> None:
    chunks = [EAIW_MAGIC, struct.pack("<II", EAIW_VERSION, len(state))]
    for name, array in state.items():
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(array, dtype="<f4")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, schema: dict[str, tuple[int, ...]] | None = None) -> dict[str, np.ndarray]:
    """Read every tensor; with ``schema`` given, names and shapes must match it exactly."""
    raw = Path(path).read_bytes()
    if raw[:4] != EAIW_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise FormatError(f"{path}: truncated at byte {pos}")
        values = struct.unpack_from(fmt, raw, pos)
        pos += size
        return values

    version, count = take("<II")
    if version != EAIW_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    state = {}
    for _ in range(count):
        (name_len,) = take("<H")
        if pos + name_len > len(raw):
            raise FormatError(f"{path}: truncated tensor name at byte {pos}")
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        if pos + 4 * n > len(raw):
            raise FormatError(f"{path}: payload of {name} truncated")
        if name in state:
            raise FormatError(f"{path}: duplicate tensor {name}")
        state[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    if schema is not None:
        verify_schema({k: v.shape for k, v in state.items()}, schema)
    return state


def verify_schema(provided: dict[str, tuple[int, ...]], expected: dict[str, tuple[int, ...]]) -> None:
    missing = sorted(set(expected) - set(provided))
    extra = sorted(set(provided) - set(expected))
    mismatched = sorted(f"{n} {tuple(provided[n])} != {tuple(expected[n])}"
                        for n in set(expected) & set(provided) if tuple(provided[n]) != tuple(expected[n]))
    if missing or extra or mismatched:
        parts = []
        for label, names, sep in (("missing", missing, ", "), ("unexpected", extra, ", "),
                                  ("shape mismatches", mismatched, "; ")):
            if names:
                more = f"{sep}... ({len(names) - 8} more)" if len(names) > 8 else ""
                parts.append(f"{len(names)} {label}: {sep.join(names[:8])}{more}")
        err = SchemaError("checkpoint does not match config schema: " + " | ".join(parts))
        err.missing, err.extra, err.mismatched = missing, extra, mismatched
        raise err
