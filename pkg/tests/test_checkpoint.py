import struct

import numpy as np
import pytest

from mgvit.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from mgvit.errors import FormatError


def test_round_trip_bit_exact(tmp_path, tiny_model):
    tiny_model.mg_flow = True
    extra = {"opt/m/head.w": np.random.default_rng(0).standard_normal((8, 3)), "scalar": np.array(2.5)}
    save_checkpoint(tmp_path / "a.ckpt", tiny_model, {"epoch": 3}, extra)
    model, meta, arrays = load_checkpoint(tmp_path / "a.ckpt")
    assert meta == {"epoch": 3} and model.mg_flow and model.config == tiny_model.config
    assert list(model.params) == list(tiny_model.params)
    for k, p in tiny_model.params.items():
        assert np.array_equal(model.params[k].data, p.data)
    assert np.array_equal(arrays["opt/m/head.w"], extra["opt/m/head.w"])
    assert arrays["scalar"].shape == () and arrays["scalar"] == 2.5
    save_checkpoint(tmp_path / "b.ckpt", model, {"epoch": 3}, arrays)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_header_layout(tmp_path, tiny_model):
    save_checkpoint(tmp_path / "a.ckpt", tiny_model)
    raw = (tmp_path / "a.ckpt").read_bytes()
    assert raw[:4] == MAGIC and struct.unpack("<I", raw[4:8]) == (1,)


def corrupt(tmp_path, tiny_model, fn):
    save_checkpoint(tmp_path / "a.ckpt", tiny_model)
    raw = bytearray((tmp_path / "a.ckpt").read_bytes())
    (tmp_path / "a.ckpt").write_bytes(bytes(fn(raw)))
    with pytest.raises(FormatError) as info:
        load_checkpoint(tmp_path / "a.ckpt")
    return info.value


def test_bad_magic_offset_zero(tmp_path, tiny_model):
    err = corrupt(tmp_path, tiny_model, lambda r: b"XXXX" + r[4:])
    assert err.offset == 0 and "offset 0" in str(err)


def test_bad_version(tmp_path, tiny_model):
    assert corrupt(tmp_path, tiny_model, lambda r: r[:4] + struct.pack("<I", 9) + r[8:]).offset == 4


def test_truncated(tmp_path, tiny_model):
    corrupt(tmp_path, tiny_model, lambda r: r[:-3])


def test_trailing_bytes(tmp_path, tiny_model):
    err = corrupt(tmp_path, tiny_model, lambda r: r + b"\0\0")
    assert "trailing" in str(err)
