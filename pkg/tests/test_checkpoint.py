import json
import struct
import zlib

import numpy as np
import pytest

from crackseg.checkpoint import MAGIC, CheckpointData, CheckpointError, load, model_tensors, restore_model, save
from crackseg.model import ModelConfig, build_model
from crackseg.sae import SaeConfig


@pytest.fixture
def data(rng):
    return CheckpointData(
        config={"model": {"variant": "full"}},
        tensors={
            "param/a": rng.standard_normal((3, 4)).astype(np.float32),
            "param/b": np.array(2.5, np.float32),
            "adam_m/a": np.zeros((3, 4), np.float32),
        },
        train_state={"epoch": 3, "history": [{"val_total": 0.5}]},
        rng_state={"seed": 0},
    )


def corrupt(path, fn):
    raw = bytearray(path.read_bytes())
    path.write_bytes(bytes(fn(raw)))


def reseal(raw):
    """Recompute the trailing CRC so a deliberate edit reaches the later checks."""
    body = bytes(raw[:-4])
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class TestRoundTrip:
    def test_bit_exact(self, data, tmp_path):
        save(tmp_path / "x.ckpt", data)
        back = load(tmp_path / "x.ckpt")
        assert back.config == data.config
        assert back.train_state == data.train_state
        assert back.rng_state == data.rng_state
        assert list(back.tensors) == list(data.tensors)
        for k, v in data.tensors.items():
            assert back.tensors[k].dtype == np.float32
            assert back.tensors[k].tobytes() == v.tobytes()
        assert back.group("param").keys() == {"a", "b"}

    def test_layout(self, data, tmp_path):
        save(tmp_path / "x.ckpt", data)
        raw = (tmp_path / "x.ckpt").read_bytes()
        magic, version, hlen = struct.unpack_from("<8sIQ", raw)
        assert magic == MAGIC == b"CRKSEGCK" and version == 1
        header = json.loads(raw[20 : 20 + hlen])
        assert header["dtype"] == "float32-le"
        assert [t["name"] for t in header["tensors"]] == list(data.tensors)

    def test_atomic_no_tmp_left(self, data, tmp_path):
        save(tmp_path / "x.ckpt", data)
        save(tmp_path / "x.ckpt", data)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["x.ckpt"]

    def test_model_round_trip(self, tiny_model_cfg, rng, tmp_path):
        a = build_model(tiny_model_cfg)
        for p in a.parameters():
            p.data[...] = rng.standard_normal(p.shape)
        a.train()
        a(rng.standard_normal((2, 3, 16, 16)).astype(np.float32))  # moves BN running stats
        save(tmp_path / "m.ckpt", CheckpointData({}, model_tensors(a)))
        b = build_model(tiny_model_cfg)
        restore_model(b, load(tmp_path / "m.ckpt"))
        x = rng.standard_normal((1, 3, 16, 16)).astype(np.float32)
        np.testing.assert_array_equal(a.eval().predict(x).probs.data, b.eval().predict(x).probs.data)


class TestCorruption:
    @pytest.mark.parametrize(
        "edit,reason",
        [
            (lambda r: r[: len(r) // 2], "truncated"),
            (lambda r: r[:-8], "checksum_mismatch"),
            (lambda r: r[:10], "truncated"),
            (lambda r: b"NOTACKPT" + r[8:], "bad_magic"),
            (lambda r: r[:8] + struct.pack("<I", 99) + r[12:], "version_mismatch"),
            (lambda r: r[:-30] + bytes([r[-30] ^ 0xFF]) + r[-29:], "checksum_mismatch"),
            (lambda r: r[:12] + struct.pack("<Q", 10**9) + r[20:], "truncated"),
            (lambda r: reseal(r[:20] + b"\xff" + r[21:]), "bad_header"),
        ],
        ids=["half", "tail", "tiny", "magic", "version", "flipped_byte", "header_len", "header_bytes"],
    )
    def test_reasons(self, data, tmp_path, edit, reason):
        path = tmp_path / "x.ckpt"
        save(path, data)
        corrupt(path, edit)
        with pytest.raises(CheckpointError) as info:
            load(path)
        assert info.value.reason == reason
        assert str(path) in str(info.value)

    def test_bad_tensor_index(self, tmp_path):
        path = tmp_path / "x.ckpt"
        save(path, CheckpointData({}, {"param/a": np.zeros(4, np.float32)}))

        def grow_shape(raw):
            text = bytes(raw).replace(b'"shape": [4]', b'"shape": [9]')
            return reseal(bytearray(text))

        corrupt(path, grow_shape)
        with pytest.raises(CheckpointError) as info:
            load(path)
        assert info.value.reason == "bad_tensor_index"

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError) as info:
            load(tmp_path / "nope.ckpt")
        assert info.value.reason == "unreadable"

    def test_shape_mismatch_leaves_model_untouched(self, tiny_model_cfg, tmp_path):
        big = build_model(ModelConfig(sae=SaeConfig(embed_dim=16), dat=tiny_model_cfg.dat))
        save(tmp_path / "m.ckpt", CheckpointData({}, model_tensors(big)))
        small = build_model(tiny_model_cfg)
        before = {n: p.data.copy() for n, p in small.named_parameters()}
        with pytest.raises(ValueError):
            restore_model(small, load(tmp_path / "m.ckpt"))
        for n, p in small.named_parameters():
            np.testing.assert_array_equal(p.data, before[n])
