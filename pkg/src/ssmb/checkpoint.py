"""Binary checkpoint format for named float32 tensors.

Layout (little-endian)::

    b"SSMBCKPT" 0x01
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 rank, rank × u32 extents,
                prod(extents) × f32 values
    u32 CRC32 of every preceding byte
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .backbone import NUM_SLOTS, BackboneConfig, ModelState, build_backbone, state_from_arrays
from .block import GATE_MODES

MAGIC = b"SSMBCKPT"
VERSION = 1


class CheckpointError(ValueError):
    """Base class for unreadable checkpoint files."""


class CorruptMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    out = bytearray(MAGIC)
    out.append(VERSION)
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < len(MAGIC) and MAGIC.startswith(buf):
        raise TruncatedCheckpointError("file ends inside the magic bytes")
    if buf[: len(MAGIC)] != MAGIC:
        raise CorruptMagicError("not an SSMB checkpoint (bad magic bytes)")
    pos = len(MAGIC)

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedCheckpointError(f"file ends inside {what} at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    (version,) = take(1, "header")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack("<I", take(4, "header"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "tensor name"))
        name = take(nlen, "tensor name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"tensor {name!r}"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"tensor {name!r}"))
        n = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(take(4 * n, f"tensor {name!r}"), dtype="<f4")
        tensors[name] = values.reshape(shape).astype(np.float32)
    (crc,) = struct.unpack("<I", take(4, "checksum"))
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} unexpected trailing bytes")
    if zlib.crc32(buf[: pos - 4]) != crc:
        raise ChecksumError("CRC32 mismatch, file is corrupted")
    return tensors


def save_checkpoint(model: ModelState, path) -> None:
    tensors = dict(model.arrays())
    for s, mode in enumerate(model.gate_modes()):
        if mode is not None:
            tensors[f"ssmb.{s}.gate_scaled"] = np.float32(mode == GATE_MODES[0])
    Path(path).write_bytes(encode_tensors(tensors))


def load_checkpoint(path, config: BackboneConfig | None = None) -> ModelState:
    """Read a checkpoint and validate every tensor against ``config``'s shapes."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    tensors = decode_tensors(path.read_bytes())
    config = config or BackboneConfig()

    gate_modes: list[str | None] = [None] * NUM_SLOTS
    for s in range(NUM_SLOTS):
        flag = tensors.pop(f"ssmb.{s}.gate_scaled", None)
        if flag is not None:
            gate_modes[s] = GATE_MODES[0] if float(flag) else GATE_MODES[1]

    template = build_backbone(config, seed=0).arrays()
    missing = sorted(set(template) - set(tensors))
    if missing:
        raise ShapeMismatchError(f"checkpoint lacks backbone tensors {missing}")
    for name, arr in tensors.items():
        if name in template:
            want = template[name].shape
        elif name.startswith("ssmb."):
            want = _ssmb_shape(name, tensors, config)
        else:
            raise ShapeMismatchError(f"unexpected tensor {name!r}")
        if arr.shape != want:
            raise ShapeMismatchError(f"tensor {name!r} has shape {arr.shape}, expected {want}")
    model = state_from_arrays(config, tensors, gate_modes)
    if any(m is not None for m in gate_modes):
        model.freeze_backbone()
    return model


def _ssmb_shape(name: str, tensors, config: BackboneConfig) -> tuple[int, ...]:
    _, slot, *rest = name.split(".")
    c2 = 2 * config.stage_channels[int(slot)]
    router = tensors.get(f"ssmb.{slot}.router.weight")
    n = router.shape[-1] if router is not None and router.ndim == 2 else 0
    kind = ".".join(rest)
    if kind == "router.weight":
        return (c2, n)
    if kind == "router.bias":
        return (n,)
    if rest[0] == "expert" and int(rest[1]) < n:
        return (c2, c2) if rest[2] == "weight" else (c2,)
    raise ShapeMismatchError(f"unexpected tensor {name!r}")
