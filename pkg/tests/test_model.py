import numpy as np
import pytest

from oah.model import (CheckpointError, ModelConfig, init_params, load_checkpoint, save_checkpoint,
                       toy_config)
from oah.seeding import rng_stream


def test_checkpoint_round_trip(tmp_path, tiny_params):
    extra = {"optim/m/enc.proj.w": np.ones((8, 16))}
    save_checkpoint(tmp_path / "m.ckpt", tiny_params, extra, meta={"epoch": 3})
    p, ex, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert p.config == tiny_params.config
    assert p.names() == tiny_params.names()
    for n in p.names():
        np.testing.assert_array_equal(p[n].data, tiny_params[n].data)
    np.testing.assert_array_equal(ex["optim/m/enc.proj.w"], 1.0)
    assert meta == {"epoch": 3}


def test_checkpoint_corruption_reports_offset(tmp_path, tiny_params):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tiny_params)
    raw = path.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-9])
    with pytest.raises(CheckpointError, match="byte"):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "b.ckpt").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "b.ckpt")
    (tmp_path / "x.ckpt").write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(tmp_path / "x.ckpt")


def test_config_validation_and_dict_round_trip():
    cfg = toy_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        toy_config(d_model=30, heads=4)
    with pytest.raises(ValueError):
        toy_config(epsilon=-1)


def test_init_is_seeded(tiny_config):
    a = init_params(tiny_config, rng_stream(5, "init"))
    b = init_params(tiny_config, rng_stream(5, "init"))
    c = init_params(tiny_config, rng_stream(6, "init"))
    np.testing.assert_array_equal(a["enc.proj.w"].data, b["enc.proj.w"].data)
    assert not np.array_equal(a["enc.proj.w"].data, c["enc.proj.w"].data)


def test_parameter_shapes(tiny_params, tiny_config):
    eps = tiny_config.encoder.epsilon
    assert tiny_params["enc.ctx.w"].shape == (eps + 1, 16, 16)
    assert tiny_params["enc.conv1.w"].shape == (3, 6, 8)
    assert tiny_params["ctc.w"].shape == (16, 9)
    assert tiny_params["dec.out.w"].shape == (16, 9)
    assert tiny_params.num_parameters() == sum(t.data.size for t in tiny_params.values())


def test_copy_is_deep(tiny_params):
    c = tiny_params.copy()
    c["enc.proj.b"].data += 1
    assert not np.array_equal(c["enc.proj.b"].data, tiny_params["enc.proj.b"].data)


def test_rng_streams_are_independent():
    a = rng_stream(0, "mask", 1).normal(size=4)
    b = rng_stream(0, "mask", 2).normal(size=4)
    c = rng_stream(0, "shuffle", 1).normal(size=4)
    assert not np.array_equal(a, b) and not np.array_equal(a, c)
    np.testing.assert_array_equal(a, rng_stream(0, "mask", 1).normal(size=4))
