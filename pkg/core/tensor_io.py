"""Little-endian tensor and checkpoint containers.

TensorFile::

    "DTNS" | version u8 | dtype u8 (0=f32, 1=f64) | ndim u8 | reserved u8
    | ndim x u64 extents | row-major payload

CheckpointFile::

    "DCKP" | version u8 | count u32 | count x (name_len u16 | utf-8 name | TensorFile)
    | crc32 u32 of every preceding byte
"""

from __future__ import annotations

import logging
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from core.errors import TensorFormatError

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"DTNS"
CHECKPOINT_MAGIC = b"DCKP"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_HEADER = struct.Struct("<4sBBBB")


def _as_array(tensor) -> np.ndarray:
    if isinstance(tensor, torch.Tensor):
        tensor = tensor.detach().cpu().numpy()
    array = np.asarray(tensor)
    if array.dtype not in _CODE_FOR:
        raise TensorFormatError(f"unsupported dtype {array.dtype} (only float32/float64 are stored)")
    return array


def encode_tensor(tensor) -> bytes:
    array = _as_array(tensor)
    code = _CODE_FOR[array.dtype]
    header = _HEADER.pack(TENSOR_MAGIC, VERSION, code, array.ndim, 0)
    extents = struct.pack(f"<{array.ndim}Q", *array.shape)
    payload = np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes(order="C")
    return header + extents + payload


def decode_tensor(buf: bytes, offset: int = 0, *, source: str = "<bytes>") -> tuple[np.ndarray, int]:
    """Parse one TensorFile at ``offset``; returns the array and the offset just past it."""
    if len(buf) - offset < _HEADER.size:
        raise TensorFormatError(f"{source}: truncated tensor header")
    magic, version, code, ndim, _reserved = _HEADER.unpack_from(buf, offset)
    if magic != TENSOR_MAGIC:
        raise TensorFormatError(f"{source}: bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
    if version != VERSION:
        raise TensorFormatError(f"{source}: unsupported version {version}")
    if code not in DTYPE_CODES:
        raise TensorFormatError(f"{source}: unknown dtype code {code}")
    offset += _HEADER.size
    if len(buf) - offset < 8 * ndim:
        raise TensorFormatError(f"{source}: truncated extents for ndim={ndim}")
    shape = struct.unpack_from(f"<{ndim}Q", buf, offset)
    offset += 8 * ndim
    dtype = DTYPE_CODES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - offset < nbytes:
        raise TensorFormatError(f"{source}: payload holds {len(buf) - offset} bytes, header needs {nbytes}")
    array = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset).reshape(shape)
    return array.astype(dtype.newbyteorder("="), copy=True), offset + nbytes


def write_tensor(path: str | Path, tensor) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(encode_tensor(tensor))
    return out


def read_tensor(path: str | Path) -> np.ndarray:
    src = Path(path)
    if not src.exists():
        raise TensorFormatError(f"tensor file not found: {src}")
    buf = src.read_bytes()
    array, end = decode_tensor(buf, source=str(src))
    if end != len(buf):
        raise TensorFormatError(f"{src}: {len(buf) - end} trailing bytes after payload")
    return array


def encode_checkpoint(tensors: dict[str, object]) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<BI", VERSION, len(tensors))]
    for name, tensor in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise TensorFormatError(f"checkpoint entry name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(encode_tensor(tensor))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(buf: bytes, *, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if len(buf) < 4 + 5 + 4:
        raise TensorFormatError(f"{source}: truncated checkpoint")
    body, (stored_crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != stored_crc:
        raise TensorFormatError(f"{source}: CRC mismatch (stored {stored_crc:#010x})")
    if body[:4] != CHECKPOINT_MAGIC:
        raise TensorFormatError(f"{source}: bad magic {body[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    version, count = struct.unpack_from("<BI", body, 4)
    if version != VERSION:
        raise TensorFormatError(f"{source}: unsupported checkpoint version {version}")
    offset = 9
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, offset)
        offset += 2
        name = body[offset : offset + name_len].decode("utf-8")
        offset += name_len
        if name in tensors:
            raise TensorFormatError(f"{source}: duplicate entry '{name}'")
        tensors[name], offset = decode_tensor(body, offset, source=f"{source}[{name}]")
    if offset != len(body):
        raise TensorFormatError(f"{source}: {len(body) - offset} unexpected bytes before CRC")
    return tensors


def write_checkpoint(path: str | Path, tensors: dict[str, object]) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(encode_checkpoint(tensors))
    logger.info("Wrote checkpoint %s (%d tensors)", out, len(tensors))
    return out


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    src = Path(path)
    if not src.exists():
        raise TensorFormatError(f"checkpoint not found: {src}")
    return decode_checkpoint(src.read_bytes(), source=str(src))


def load_into(
    module: torch.nn.Module, tensors: dict[str, np.ndarray], *, source: str = "<checkpoint>"
) -> None:
    """Copy checkpoint arrays into ``module``; names and shapes must match exactly."""
    state = module.state_dict()
    missing = sorted(set(state) - set(tensors))
    unexpected = sorted(set(tensors) - set(state))
    if missing or unexpected:
        raise TensorFormatError(f"{source}: missing {missing[:3]} unexpected {unexpected[:3]}")
    with torch.no_grad():
        for name, target in state.items():
            value = torch.from_numpy(np.ascontiguousarray(tensors[name]))
            if tuple(value.shape) != tuple(target.shape):
                raise TensorFormatError(
                    f"{source}: '{name}' has shape {tuple(value.shape)}, model expects {tuple(target.shape)}"
                )
            target.copy_(value.to(target.dtype))


__all__ = [
    "decode_checkpoint",
    "decode_tensor",
    "encode_checkpoint",
    "encode_tensor",
    "load_into",
    "read_checkpoint",
    "read_tensor",
    "write_checkpoint",
    "write_tensor",
]
