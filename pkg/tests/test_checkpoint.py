import struct
import zlib

import numpy as np
import pytest

from ssmb.backbone import add_ssmb_blocks, build_backbone
from ssmb.block import GATE_SCALED, VALUE_PRESERVING
from ssmb.checkpoint import (
    MAGIC,
    ChecksumError,
    CorruptMagicError,
    ShapeMismatchError,
    TruncatedCheckpointError,
    UnsupportedVersionError,
    decode_tensors,
    encode_tensors,
    load_checkpoint,
    save_checkpoint,
)


def with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def test_layout_by_hand():
    """Assemble the byte layout field by field and compare."""
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    body = MAGIC + b"\x01" + struct.pack("<I", 1)
    body += struct.pack("<H", 1) + b"w" + struct.pack("<B", 2) + struct.pack("<II", 2, 3) + arr.tobytes()
    assert encode_tensors({"w": arr}) == with_crc(body)


def test_round_trip_bitwise(tmp_path):
    model = build_backbone(seed=3)
    save_checkpoint(model, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    for k, v in model.arrays().items():
        assert back.params[k].data.tobytes() == v.tobytes()
    save_checkpoint(back, tmp_path / "n.ckpt")
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "n.ckpt").read_bytes()


@pytest.mark.parametrize("mode", [GATE_SCALED, VALUE_PRESERVING])
def test_student_round_trip(tmp_path, mode):
    student = add_ssmb_blocks(build_backbone(seed=1), 3, mode, 0)
    student.params["ssmb.1.router.weight"].data += 0.5
    save_checkpoint(student, tmp_path / "s")
    back = load_checkpoint(tmp_path / "s")
    assert back.gate_modes() == [mode] * 3
    assert back.frozen == student.frozen
    for k, v in student.arrays().items():
        assert back.params[k].data.tobytes() == v.tobytes()


def test_unicode_names():
    arr = {"ä.δ": np.ones(2, np.float32), "s": np.float32(2.0)}
    back = decode_tensors(encode_tensors(arr))
    assert set(back) == set(arr) and back["s"].shape == ()


def test_wrong_magic():
    buf = bytearray(encode_tensors({"a": np.ones(1, np.float32)}))
    buf[0:8] = b"NOTACKPT"
    with pytest.raises(CorruptMagicError):
        decode_tensors(bytes(buf))


def test_unsupported_version():
    buf = bytearray(encode_tensors({"a": np.ones(1, np.float32)}))
    buf[8] = 2
    with pytest.raises(UnsupportedVersionError):
        decode_tensors(with_crc(bytes(buf[:-4])))


@pytest.mark.parametrize("cut", [5, 12, 20, 40])
def test_truncated(cut):
    buf = encode_tensors({"alpha": np.ones(16, np.float32)})
    with pytest.raises(TruncatedCheckpointError):
        decode_tensors(buf[:cut])


def test_bad_crc():
    buf = bytearray(encode_tensors({"a": np.ones(4, np.float32)}))
    buf[-6] ^= 0xFF
    with pytest.raises(ChecksumError):
        decode_tensors(bytes(buf))


def test_shape_mismatch(tmp_path):
    arrays = build_backbone().arrays()
    arrays["fc.bias"] = np.zeros(63, np.float32)
    (tmp_path / "bad").write_bytes(encode_tensors(arrays))
    with pytest.raises(ShapeMismatchError):
        load_checkpoint(tmp_path / "bad")


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope")


def test_errors_are_distinct():
    kinds = {CorruptMagicError, UnsupportedVersionError, TruncatedCheckpointError, ChecksumError, ShapeMismatchError}
    assert len(kinds) == 5 and all(not issubclass(a, b) for a in kinds for b in kinds if a is not b)
