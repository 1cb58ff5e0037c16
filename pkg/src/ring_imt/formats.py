"""Binary persistence for datasets and network weights.

Both formats are little-endian and store tensors as 32-bit floats.

Dataset (``RINGDS01``)::

    magic      8 bytes   b"RINGDS01"
    header     <II       version, sequence count
    crc        <I        CRC-32 of the header
    then per sequence one chunk:
      <IId               N, T, F (Hz)
      <{N}I              parent array
      <f4[T*N*10]        X, C order (T, N, 10)
      <f4[T*N*4]         Y, C order (T, N, 4)
      <I                 CRC-32 of the chunk bytes above

Weights (``RINGWT01``)::

    magic      8 bytes   b"RINGWT01"
    <IIII                version, H, M, tensor count
    per tensor:
      <H name length, utf-8 name, <B ndim, <{ndim}I shape, <f4 data
    <I                   CRC-32 of every preceding byte
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path
from typing import Sequence

import numpy as np

from .kinematics import ParentArrayError, validate_parent_array
from .net import RingParams, param_shapes
from .rcmg import LayoutError, TrainingPair

__all__ = [
    "FormatError",
    "MagicError",
    "VersionError",
    "ChecksumError",
    "InvariantError",
    "ShapeMismatchError",
    "DATASET_MAGIC",
    "WEIGHTS_MAGIC",
    "write_dataset",
    "read_dataset",
    "write_weights",
    "read_weights",
]

DATASET_MAGIC = b"RINGDS01"
WEIGHTS_MAGIC = b"RINGWT01"
DATASET_VERSION = 1
WEIGHTS_VERSION = 1

_F4 = np.dtype("<f4")


class FormatError(ValueError):
    pass


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class ChecksumError(FormatError):
    """Checksum mismatch or a file that ends before its declared contents."""


class InvariantError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    pass


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# --------------------------------------------------------------------------- #
# datasets


def _encode_pair(pair: TrainingPair) -> bytes:
    T, N = pair.X.shape[:2]
    parts = [
        struct.pack("<IId", N, T, float(pair.F)),
        struct.pack(f"<{N}I", *pair.parents),
        np.ascontiguousarray(pair.X, dtype=_F4).tobytes(),
        np.ascontiguousarray(pair.Y, dtype=_F4).tobytes(),
    ]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def write_dataset(path, pairs: Sequence[TrainingPair]) -> None:
    for p in pairs:
        p.validate()
    header = struct.pack("<II", DATASET_VERSION, len(pairs))
    blob = [DATASET_MAGIC, header, struct.pack("<I", zlib.crc32(header))]
    blob.extend(_encode_pair(p) for p in pairs)
    _atomic_write(path, b"".join(blob))


def _check_pair(pair: TrainingPair, index: int) -> None:
    norms = np.linalg.norm(pair.Y.astype(np.float64), axis=-1)
    bad = np.argwhere(np.abs(norms - 1.0) > 1e-6)
    if len(bad):
        t, i = bad[0]
        raise InvariantError(
            f"sequence {index}, timestep {t}, body {i + 1}: target norm {norms[t, i]:.9g} is not 1"
        )
    rate = np.float32(1.0 / pair.F)
    bad_t = np.argwhere(pair.X[..., 9] != rate)
    if len(bad_t):
        raise InvariantError(f"sequence {index}, timestep {bad_t[0][0]}: rate channel is not 1/F")
    if not np.isfinite(pair.X).all():
        raise InvariantError(f"sequence {index}: non-finite inputs")


def read_dataset(path) -> list[TrainingPair]:
    """Read and fully validate a dataset; raises before returning any pair on error."""
    data = Path(path).read_bytes()
    if data[:8] != DATASET_MAGIC:
        raise MagicError(f"{path}: not a dataset file (magic {data[:8]!r})")
    if len(data) < 20:
        raise ChecksumError(f"{path}: truncated header")
    header = data[8:16]
    (crc,) = struct.unpack_from("<I", data, 16)
    if zlib.crc32(header) != crc:
        raise ChecksumError(f"{path}: header checksum mismatch")
    version, count = struct.unpack("<II", header)
    if version != DATASET_VERSION:
        raise VersionError(f"{path}: unsupported dataset version {version}")

    pos = 20
    pairs = []
    for k in range(count):
        if pos + 16 > len(data):
            raise ChecksumError(f"{path}: truncated before sequence {k}")
        N, T, F = struct.unpack_from("<IId", data, pos)
        remaining = len(data) - pos
        # bound every size against what is actually in the file before allocating
        size = 16 + 4 * N + 4 * T * N * 14
        if N == 0 or size + 4 > remaining:
            raise ChecksumError(f"{path}: sequence {k} extends past the end of the file")
        body = data[pos : pos + size]
        (crc,) = struct.unpack_from("<I", data, pos + size)
        if zlib.crc32(body) != crc:
            raise ChecksumError(f"{path}: checksum mismatch in sequence {k}")
        off = 16
        parents = struct.unpack_from(f"<{N}I", body, off)
        off += 4 * N
        X = np.frombuffer(body, _F4, T * N * 10, off).reshape(T, N, 10)
        off += X.nbytes
        Y = np.frombuffer(body, _F4, T * N * 4, off).reshape(T, N, 4)
        try:
            lam = validate_parent_array(parents)
        except ParentArrayError as exc:
            raise InvariantError(f"sequence {k}: {exc}") from None
        if not F > 0:
            raise InvariantError(f"sequence {k}: sampling rate {F} is not positive")
        pair = TrainingPair(X.astype(np.float64), Y.astype(np.float64), F, lam)
        _check_pair(TrainingPair(X, Y, F, lam), k)
        pairs.append(pair)
        pos += size + 4
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return pairs


# --------------------------------------------------------------------------- #
# weights


def write_weights(path, params: RingParams) -> None:
    if not params.all_finite():
        raise ValueError("refusing to write non-finite weights")
    names = params.names()
    parts = [WEIGHTS_MAGIC, struct.pack("<IIII", WEIGHTS_VERSION, params.H, params.M, len(names))]
    for name in names:
        t = params[name]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{t.ndim}I", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t, dtype=_F4).tobytes())
    blob = b"".join(parts)
    _atomic_write(path, blob + struct.pack("<I", zlib.crc32(blob)))


def read_weights(path, H: int | None = None, M: int | None = None) -> RingParams:
    """Load weights; ``H`` / ``M`` if given must match the stored widths."""
    data = Path(path).read_bytes()
    if data[:8] != WEIGHTS_MAGIC:
        raise MagicError(f"{path}: not a weights file (magic {data[:8]!r})")
    if len(data) < 28:
        raise ChecksumError(f"{path}: truncated")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise ChecksumError(f"{path}: checksum mismatch")
    body = data[:-4]
    version, h, m, count = struct.unpack_from("<IIII", body, 8)
    if version != WEIGHTS_VERSION:
        raise VersionError(f"{path}: unsupported weights version {version}")
    if (H is not None and H != h) or (M is not None and M != m):
        raise ShapeMismatchError(f"{path}: stored widths H={h}, M={m}; requested H={H}, M={M}")
    expected = param_shapes(h, m)
    pos = 24
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", body, pos)
        shape = struct.unpack_from(f"<{ndim}I", body, pos + 1)
        pos += 1 + 4 * ndim
        if name not in expected or tuple(shape) != expected[name]:
            raise ShapeMismatchError(f"{path}: tensor {name!r} with shape {shape} does not fit H={h}, M={m}")
        size = int(np.prod(shape, dtype=np.int64))
        if pos + 4 * size > len(body):
            raise FormatError(f"{path}: tensor {name!r} extends past the end of the file")
        tensors[name] = np.frombuffer(body, _F4, size, pos).reshape(shape).astype(np.float64)
        pos += 4 * size
    if set(tensors) != set(expected):
        raise ShapeMismatchError(f"{path}: missing tensors {sorted(set(expected) - set(tensors))}")
    return RingParams(h, m, tensors)
