from __future__ import annotations

import struct
import zlib

import numpy as np
import pytest
import torch

from core.errors import TensorFormatError
from core.layers import Linear
from core.tensor_io import (
    decode_checkpoint,
    encode_checkpoint,
    encode_tensor,
    load_into,
    read_checkpoint,
    read_tensor,
    write_checkpoint,
    write_tensor,
)


def test_tensor_header_layout() -> None:
    buf = encode_tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert buf[:4] == b"DTNS"
    assert buf[4:8] == bytes([1, 0, 2, 0])
    assert struct.unpack("<2Q", buf[8:24]) == (2, 3)
    assert len(buf) == 24 + 6 * 4


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_tensor_file_round_trip(tmp_path, dtype) -> None:
    array = np.random.default_rng(0).normal(size=(3, 4, 5)).astype(dtype)
    path = write_tensor(tmp_path / "sub" / "x.dtns", array)
    loaded = read_tensor(path)
    assert loaded.dtype == dtype
    assert loaded.tobytes() == array.tobytes()
    assert write_tensor(tmp_path / "y.dtns", loaded).read_bytes() == path.read_bytes()


def test_scalar_and_torch_input(tmp_path) -> None:
    path = write_tensor(tmp_path / "s.dtns", torch.tensor(2.5))
    assert read_tensor(path).shape == ()
    assert read_tensor(path).item() == 2.5


def test_unsupported_dtype() -> None:
    with pytest.raises(TensorFormatError):
        encode_tensor(np.zeros(3, dtype=np.int64))


def test_bad_magic_truncation_and_trailing_bytes(tmp_path) -> None:
    good = encode_tensor(np.ones(4, dtype=np.float32))
    cases = {
        "magic": b"XXXX" + good[4:],
        "truncated": good[:-2],
        "trailing": good + b"\x00",
    }
    for name, payload in cases.items():
        path = tmp_path / f"{name}.dtns"
        path.write_bytes(payload)
        with pytest.raises(TensorFormatError, match=name if name != "truncated" else "payload"):
            read_tensor(path)
    with pytest.raises(TensorFormatError, match="not found"):
        read_tensor(tmp_path / "absent.dtns")


def test_checkpoint_round_trip(tmp_path) -> None:
    tensors = {"a.weight": np.eye(3, dtype=np.float32), "b": np.zeros((1, 2), dtype=np.float64)}
    path = write_checkpoint(tmp_path / "ckpt.dckp", tensors)
    loaded = read_checkpoint(path)
    assert list(loaded) == ["a.weight", "b"]
    assert np.array_equal(loaded["a.weight"], tensors["a.weight"])
    assert loaded["b"].shape == (1, 2)
    assert encode_checkpoint(loaded) == path.read_bytes()


def test_checkpoint_detects_every_single_byte_corruption() -> None:
    buf = bytearray(encode_checkpoint({"w": np.arange(4, dtype=np.float32)}))
    for position in range(len(buf)):
        corrupted = bytearray(buf)
        corrupted[position] ^= 0xFF
        with pytest.raises(TensorFormatError):
            decode_checkpoint(bytes(corrupted))


def test_checkpoint_duplicate_names_rejected() -> None:
    entry = struct.pack("<H", 1) + b"w" + encode_tensor(np.zeros(1, dtype=np.float32))
    body = b"DCKP" + struct.pack("<BI", 1, 2) + entry + entry
    with pytest.raises(TensorFormatError, match="duplicate"):
        decode_checkpoint(body + struct.pack("<I", zlib.crc32(body)))


def test_load_into_module() -> None:
    source = Linear(3, 2)
    target = Linear(3, 2)
    state = {k: v.detach().numpy() for k, v in source.state_dict().items()}
    load_into(target, decode_checkpoint(encode_checkpoint(state)))
    assert torch.equal(target.weight, source.weight)
    with pytest.raises(TensorFormatError, match="missing"):
        load_into(target, {"weight": state["weight"]})
    with pytest.raises(TensorFormatError, match="shape"):
        load_into(target, {"weight": np.zeros((2, 3), dtype=np.float32), "bias": state["bias"]})
