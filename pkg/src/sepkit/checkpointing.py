"""Binary checkpoint persistence: named tensors plus provenance.

Layout, all little-endian: magic, u32 format version, length-prefixed
component tag, u64 seed, length-prefixed config snapshot text, u32 tensor
count, then per tensor a length-prefixed name, dtype string, u8 rank, u32
dims, and the raw payload. Tensors are written sorted by name so identical
state always produces identical bytes.
"""

import struct
from dataclasses import dataclass

import numpy as np

from sepkit.errors import FormatError

MAGIC = b"SEPALM01"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    tag: str
    arrays: dict
    config_text: str = ""
    seed: int = 0


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"checkpoint truncated: wanted {n} bytes, got {len(data)}")
    return data


def _write_str(f, text: str, width: str) -> None:
    raw = text.encode("utf-8")
    f.write(struct.pack(width, len(raw)))
    f.write(raw)


def _read_str(f, width: str) -> str:
    (n,) = struct.unpack(width, _read_exact(f, struct.calcsize(width)))
    return _read_exact(f, n).decode("utf-8")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_str(f, ckpt.tag, "<H")
        f.write(struct.pack("<Q", ckpt.seed))
        _write_str(f, ckpt.config_text, "<I")
        f.write(struct.pack("<I", len(ckpt.arrays)))
        for name in sorted(ckpt.arrays):
            arr = np.ascontiguousarray(ckpt.arrays[name])
            _write_str(f, name, "<H")
            _write_str(f, arr.dtype.str, "<B")
            if arr.ndim > 255:
                raise FormatError(f"tensor {name} rank {arr.ndim} too large")
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path, expect_tag: str | None = None) -> Checkpoint:
    with open(path, "rb") as f:
        magic = _read_exact(f, 8)
        if magic != MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != CHECKPOINT_VERSION:
            raise FormatError(
                f"unsupported checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
            )
        tag = _read_str(f, "<H")
        if expect_tag is not None and tag != expect_tag:
            raise FormatError(f"checkpoint tagged {tag!r}, expected {expect_tag!r}")
        (seed,) = struct.unpack("<Q", _read_exact(f, 8))
        config_text = _read_str(f, "<I")
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        arrays = {}
        for _ in range(count):
            name = _read_str(f, "<H")
            dtype = np.dtype(_read_str(f, "<B"))
            (ndim,) = struct.unpack("<B", _read_exact(f, 1))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
            payload = _read_exact(f, dtype.itemsize * int(np.prod(shape, dtype=np.int64)))
            arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    return Checkpoint(tag=tag, arrays=arrays, config_text=config_text, seed=seed)


def checkpoint_from_module(tag: str, module, config_text: str = "", seed: int = 0) -> Checkpoint:
    arrays = {name: t.data.copy() for name, t in module.tensors().items()}
    return Checkpoint(tag=tag, arrays=arrays, config_text=config_text, seed=seed)


def load_into_module(path, module, expect_tag: str) -> Checkpoint:
    ckpt = load_checkpoint(path, expect_tag=expect_tag)
    module.load_arrays(ckpt.arrays)
    return ckpt
