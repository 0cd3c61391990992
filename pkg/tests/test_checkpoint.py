import numpy as np
import pytest

from radiomap.actgan import GeneratorConfig, init_generator
from radiomap.checkpoint import (
    MAGIC,
    Checkpoint,
    CheckpointError,
    config_digest,
    load_checkpoint,
    save_checkpoint,
)
from radiomap.tensor import AdamState, Tensor, adam_step


def small_ckpt(rng):
    ck = Checkpoint({"model": {"width": 3}, "epoch": 2})
    ck.arrays["a"] = rng.normal(size=(3, 4)).astype(np.float32)
    ck.arrays["b"] = rng.normal(size=(2,))
    ck.arrays["c"] = np.array(7, dtype=np.int64)
    ck.arrays["d"] = np.arange(5, dtype=np.uint8)
    return ck


class TestFormat:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        ck = small_ckpt(rng)
        p = save_checkpoint(ck, tmp_path / "x.ckpt")
        back = load_checkpoint(p)
        assert back.config == ck.config
        for k, v in ck.arrays.items():
            assert back.arrays[k].dtype == v.dtype
            np.testing.assert_array_equal(back.arrays[k], v)
        again = save_checkpoint(back, tmp_path / "y.ckpt")
        assert again.read_bytes() == p.read_bytes()

    def test_header(self, tmp_path, rng):
        raw = save_checkpoint(small_ckpt(rng), tmp_path / "x.ckpt").read_bytes()
        assert raw[:4] == MAGIC
        assert raw[6:38] == config_digest({"model": {"width": 3}, "epoch": 2})

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOPE" + bytes(60))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_truncated(self, tmp_path, rng):
        raw = save_checkpoint(small_ckpt(rng), tmp_path / "x.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(raw[:-9])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.ckpt")

    def test_tampered_config(self, tmp_path, rng):
        raw = bytearray(save_checkpoint(small_ckpt(rng), tmp_path / "x.ckpt").read_bytes())
        i = raw.index(b'"width": 3')
        raw[i + 9] = ord("4")
        (tmp_path / "m.ckpt").write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="digest"):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_version_checked(self, tmp_path, rng):
        raw = bytearray(save_checkpoint(small_ckpt(rng), tmp_path / "x.ckpt").read_bytes())
        raw[4] = 9
        (tmp_path / "v.ckpt").write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(tmp_path / "v.ckpt")

    def test_expect_config(self, tmp_path, rng):
        p = save_checkpoint(small_ckpt(rng), tmp_path / "x.ckpt")
        load_checkpoint(p, expect_config={"model": {"width": 3}, "epoch": 2})
        with pytest.raises(CheckpointError):
            load_checkpoint(p, expect_config={"model": {"width": 4}, "epoch": 2})

    def test_unsupported_dtype(self, tmp_path):
        ck = Checkpoint({}, {"z": np.zeros(2, dtype=np.complex64)})
        with pytest.raises(CheckpointError):
            save_checkpoint(ck, tmp_path / "z.ckpt")


class TestModelState:
    def test_generator_round_trip(self, tmp_path):
        cfg = GeneratorConfig.desk(2, seed=1)
        src = init_generator(cfg).named_parameters()
        ck = Checkpoint({"g": cfg.to_dict()})
        ck.put_params("gen", src)
        back = load_checkpoint(save_checkpoint(ck, tmp_path / "g.ckpt"))
        dst = init_generator(GeneratorConfig.desk(2, seed=2)).named_parameters()
        back.load_params("gen", dst)
        for k in src:
            assert dst[k].data.dtype == src[k].data.dtype
            np.testing.assert_array_equal(dst[k].data, src[k].data)

    def test_shape_mismatch(self):
        ck = Checkpoint({}, {"gen.w": np.zeros((2, 2), np.float32)})
        with pytest.raises(CheckpointError):
            ck.load_params("gen", {"w": Tensor(np.zeros((3, 2), np.float32))})
        with pytest.raises(CheckpointError):
            ck.load_params("gen", {"other": Tensor(np.zeros((2, 2), np.float32))})

    def test_adam_round_trip(self, tmp_path, rng):
        params = {"w": Tensor(rng.normal(size=(3,)).astype(np.float32), requires_grad=True)}
        state = AdamState()
        for _ in range(3):
            adam_step(params, {"w": rng.normal(size=(3,)).astype(np.float32)}, state, 1e-3)
        adam_step(params, {"w": np.array([np.nan, 0, 0], np.float32)}, state, 1e-3)
        ck = Checkpoint({})
        ck.put_adam("adam", state)
        back = load_checkpoint(save_checkpoint(ck, tmp_path / "a.ckpt")).load_adam("adam")
        assert back.step == state.step and back.skipped == state.skipped == 1
        np.testing.assert_array_equal(back.m["w"], state.m["w"])
        np.testing.assert_array_equal(back.v["w"], state.v["w"])
