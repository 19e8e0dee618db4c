"""Tensor file and checkpoint container round-trips and corruption handling."""

import numpy as np
import pytest

from tasam.errors import FormatError
from tasam.tensorio import load_checkpoint, load_tensor, save_checkpoint, save_tensor

RNG = np.random.default_rng(7)


class TestTensorFile:
    def test_f32_roundtrip(self, tmp_path):
        x = RNG.normal(0, 1, (3, 5, 7)).astype(np.float32)
        p = tmp_path / "x.tsr"
        save_tensor(p, x)
        y = load_tensor(p)
        assert y.dtype == np.float32
        np.testing.assert_array_equal(x, y)

    def test_u8_roundtrip(self, tmp_path):
        x = RNG.integers(0, 256, (16, 16)).astype(np.uint8)
        p = tmp_path / "x.tsr"
        save_tensor(p, x)
        y = load_tensor(p)
        assert y.dtype == np.uint8
        np.testing.assert_array_equal(x, y)

    def test_scalar_and_1d(self, tmp_path):
        for x in (np.float32(3.5)[None], np.arange(9, dtype=np.float32)):
            p = tmp_path / "v.tsr"
            save_tensor(p, x)
            np.testing.assert_array_equal(load_tensor(p), x)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.tsr"
        save_tensor(p, np.zeros(4, dtype=np.float32))
        raw = bytearray(p.read_bytes())
        raw[:4] = b"NOPE"
        p.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_tensor(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "x.tsr"
        save_tensor(p, np.zeros((4, 4), dtype=np.float32))
        raw = p.read_bytes()
        p.write_bytes(raw[:-7])
        with pytest.raises(FormatError):
            load_tensor(p)

    def test_trailing_garbage(self, tmp_path):
        p = tmp_path / "x.tsr"
        save_tensor(p, np.zeros(3, dtype=np.float32))
        p.write_bytes(p.read_bytes() + b"xx")
        with pytest.raises(FormatError):
            load_tensor(p)

    def test_byte_identical_writes(self, tmp_path):
        x = RNG.normal(0, 1, (8, 8)).astype(np.float32)
        a, b = tmp_path / "a.tsr", tmp_path / "b.tsr"
        save_tensor(a, x)
        save_tensor(b, x.copy())
        assert a.read_bytes() == b.read_bytes()


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        entries = {
            "decoder/head/w": RNG.normal(0, 1, (64, 4)).astype(np.float32),
            "frozen/pos_embed": RNG.normal(0, 1, (16, 8)).astype(np.float32),
            "a": np.arange(3, dtype=np.float32),
        }
        p = tmp_path / "c.tsmc"
        save_checkpoint(p, entries)
        back = load_checkpoint(p)
        assert set(back) == set(entries)
        for k in entries:
            assert back[k].tobytes() == entries[k].tobytes()

    def test_name_order_does_not_change_bytes(self, tmp_path):
        a = {"x": np.ones(2, dtype=np.float32), "y": np.zeros(2, dtype=np.float32)}
        b = dict(reversed(list(a.items())))
        pa, pb = tmp_path / "a.tsmc", tmp_path / "b.tsmc"
        save_checkpoint(pa, a)
        save_checkpoint(pb, b)
        assert pa.read_bytes() == pb.read_bytes()

    def test_corrupt_magic(self, tmp_path):
        p = tmp_path / "c.tsmc"
        save_checkpoint(p, {"x": np.ones(2, dtype=np.float32)})
        raw = bytearray(p.read_bytes())
        raw[0] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_checkpoint(p)

    def test_truncation(self, tmp_path):
        p = tmp_path / "c.tsmc"
        save_checkpoint(p, {"x": np.ones(8, dtype=np.float32)})
        p.write_bytes(p.read_bytes()[:-5])
        with pytest.raises(FormatError):
            load_checkpoint(p)
