import struct
import zlib

import numpy as np
import pytest

from ring_imt.formats import (
    ChecksumError,
    FormatError,
    InvariantError,
    MagicError,
    ShapeMismatchError,
    VersionError,
    read_dataset,
    read_weights,
    write_dataset,
    write_weights,
)
from ring_imt.net import init_params, param_shapes, ring_apply
from ring_imt.rcmg import AblationFlags, generate_batch

F4 = np.dtype("<f4")


@pytest.fixture
def pairs():
    return generate_batch(4, 3, AblationFlags(sparse=True), rate_set=(40.0, 100.0), timesteps=50)


def test_dataset_roundtrip_bit_identical(tmp_path, pairs):
    path = tmp_path / "d.ringds"
    write_dataset(path, pairs)
    back = read_dataset(path)
    assert len(back) == len(pairs)
    for a, b in zip(pairs, back):
        assert a.F == b.F and a.parents == b.parents
        np.testing.assert_array_equal(b.X, a.X.astype(F4))
        np.testing.assert_array_equal(b.Y, a.Y.astype(F4))
    write_dataset(tmp_path / "again.ringds", back)
    assert (tmp_path / "again.ringds").read_bytes() == path.read_bytes()


def test_dataset_header_layout(tmp_path, pairs):
    path = tmp_path / "d.ringds"
    write_dataset(path, pairs)
    raw = path.read_bytes()
    assert raw[:8] == b"RINGDS01"
    assert struct.unpack_from("<II", raw, 8) == (1, 3)
    N, T, F = struct.unpack_from("<IId", raw, 20)
    assert (N, T, F) == (3, 50, pairs[0].F)
    assert struct.unpack_from("<3I", raw, 36) == (0, 1, 2)


def test_truncated_dataset(tmp_path, pairs):
    path = tmp_path / "d.ringds"
    write_dataset(path, pairs)
    raw = path.read_bytes()
    for cut in (10, 30, len(raw) // 2, len(raw) - 1):
        path.write_bytes(raw[:cut])
        with pytest.raises(ChecksumError):
            read_dataset(path)


def test_flipped_byte_fails_checksum(tmp_path, pairs):
    path = tmp_path / "d.ringds"
    write_dataset(path, pairs)
    raw = bytearray(path.read_bytes())
    raw[200] ^= 0x40
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        read_dataset(path)


def test_corrupted_target_norm_names_location(tmp_path, pairs):
    path = tmp_path / "d.ringds"
    write_dataset(path, pairs)
    raw = bytearray(path.read_bytes())
    # second sequence, timestep 7, body 2, w component
    first = 16 + 4 * 3 + 4 * 50 * 3 * 14 + 4
    start = 20 + first
    y_off = start + 16 + 12 + 4 * 50 * 3 * 10
    pos = y_off + 4 * ((7 * 3 + 1) * 4)
    struct.pack_into("<f", raw, pos, 3.0)
    body_end = start + first - 4
    struct.pack_into("<I", raw, body_end, zlib.crc32(bytes(raw[start:body_end])))
    path.write_bytes(bytes(raw))
    with pytest.raises(InvariantError, match=r"sequence 1, timestep 7, body 2"):
        read_dataset(path)


def test_bad_magic_and_version(tmp_path, pairs):
    path = tmp_path / "d.ringds"
    path.write_bytes(b"NOTADATA" + bytes(20))
    with pytest.raises(MagicError):
        read_dataset(path)
    header = struct.pack("<II", 2, 0)
    path.write_bytes(b"RINGDS01" + header + struct.pack("<I", zlib.crc32(header)))
    with pytest.raises(VersionError):
        read_dataset(path)


def test_huge_declared_size_is_rejected_before_allocation(tmp_path):
    header = struct.pack("<II", 1, 1)
    chunk = struct.pack("<IId", 3, 2**31, 100.0)
    path = tmp_path / "d.ringds"
    path.write_bytes(b"RINGDS01" + header + struct.pack("<I", zlib.crc32(header)) + chunk + bytes(64))
    with pytest.raises(ChecksumError):
        read_dataset(path)


def test_weights_roundtrip_preserves_inference(tmp_path, rng):
    params = init_params(8, 4, 0).astype(F4).astype(np.float64)
    path = tmp_path / "w.ringwt"
    write_weights(path, params)
    back = read_weights(path, 8, 4)
    X = rng.standard_normal((20, 3, 10))
    X[..., 9] = 0.01
    np.testing.assert_array_equal(ring_apply(X, (0, 1, 2), back), ring_apply(X, (0, 1, 2), params))


def test_weights_width_mismatch(tmp_path):
    path = tmp_path / "w.ringwt"
    write_weights(path, init_params(32, 16, 0))
    with pytest.raises(ShapeMismatchError):
        read_weights(path, H=64)
    with pytest.raises(ShapeMismatchError):
        read_weights(path, M=8)


def test_weights_checksum_and_magic(tmp_path):
    path = tmp_path / "w.ringwt"
    write_weights(path, init_params(4, 2, 0))
    raw = bytearray(path.read_bytes())
    raw[40] ^= 1
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        read_weights(path)
    path.write_bytes(b"RINGDS01" + bytes(40))
    with pytest.raises(MagicError):
        read_weights(path)


def test_refuses_non_finite_weights(tmp_path):
    params = init_params(4, 2, 0)
    params.tensors["gru1.b"][0] = np.inf
    with pytest.raises(ValueError):
        write_weights(tmp_path / "w.ringwt", params)


def _golden_weights(H, M, special):
    """Encode a weights file byte by byte, independently of the writer."""
    shapes = param_shapes(H, M)
    body = b"RINGWT01" + struct.pack("<IIII", 1, H, M, len(shapes))
    for name, shape in shapes.items():
        values = special.get(name, np.zeros(shape))
        raw = name.encode()
        body += struct.pack("<H", len(raw)) + raw + struct.pack(f"<B{len(shape)}I", len(shape), *shape)
        body += struct.pack(f"<{values.size}f", *values.ravel())
    return body + struct.pack("<I", zlib.crc32(body))


def test_golden_weights_file(tmp_path):
    H, M = 2, 1
    known = np.array([[0.5, -1.25], [3.0, 0.125]])
    path = tmp_path / "golden.ringwt"
    path.write_bytes(_golden_weights(H, M, {"msg.w1": known, "head.b2": np.array([1.0, 2.0, -3.0, 0.25])}))
    params = read_weights(path, H, M)
    np.testing.assert_array_equal(params["msg.w1"], known)
    np.testing.assert_array_equal(params["head.b2"], [1.0, 2.0, -3.0, 0.25])
    np.testing.assert_array_equal(params["gru2.wh"], 0.0)
    write_weights(tmp_path / "again.ringwt", params)
    assert (tmp_path / "again.ringwt").read_bytes() == path.read_bytes()


def test_unknown_tensor_name(tmp_path):
    blob = _golden_weights(2, 1, {})
    blob = blob.replace(b"msg.w1", b"msg.wX")[:-4]
    path = tmp_path / "bad.ringwt"
    path.write_bytes(blob + struct.pack("<I", zlib.crc32(blob)))
    with pytest.raises(FormatError):
        read_weights(path)
