"""Checkpoint and configuration round-trip tests."""

import numpy as np
import pytest

from sepkit import checkpointing as ckpt
from sepkit import config as cfgmod
from sepkit import nn
from sepkit.errors import ConfigError, FormatError


def _sample_checkpoint():
    rng = np.random.default_rng(0)
    return ckpt.Checkpoint(
        tag="separator",
        arrays={
            "enc.weight": rng.normal(size=(64, 1, 16)),
            "enc.bias": rng.normal(size=64),
            "counts": rng.integers(0, 100, size=(4, 64)).astype(np.int64),
        },
        config_text="seed = 3\n",
        seed=3,
    )


def test_checkpoint_round_trip_bit_exact(tmp_path):
    path = tmp_path / "m.ckpt"
    original = _sample_checkpoint()
    ckpt.save_checkpoint(path, original)
    back = ckpt.load_checkpoint(path)
    assert back.tag == "separator" and back.seed == 3
    assert back.config_text == "seed = 3\n"
    assert set(back.arrays) == set(original.arrays)
    for name in original.arrays:
        assert np.array_equal(back.arrays[name], original.arrays[name])
        assert back.arrays[name].dtype == original.arrays[name].dtype


def test_checkpoint_files_deterministic(tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    ckpt.save_checkpoint(a, _sample_checkpoint())
    ckpt.save_checkpoint(b, _sample_checkpoint())
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_tag_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    ckpt.save_checkpoint(path, _sample_checkpoint())
    with pytest.raises(FormatError, match="separator"):
        ckpt.load_checkpoint(path, expect_tag="codec")


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    ckpt.save_checkpoint(path, _sample_checkpoint())
    raw = bytearray(path.read_bytes())
    raw[3] ^= 0x55
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        ckpt.load_checkpoint(path)


def test_checkpoint_version_rejected(tmp_path):
    import struct

    path = tmp_path / "m.ckpt"
    ckpt.save_checkpoint(path, _sample_checkpoint())
    raw = bytearray(path.read_bytes())
    raw[8:12] = struct.pack("<I", 9)
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version 9"):
        ckpt.load_checkpoint(path)


def test_checkpoint_truncation(tmp_path):
    path = tmp_path / "m.ckpt"
    ckpt.save_checkpoint(path, _sample_checkpoint())
    raw = path.read_bytes()
    path.write_bytes(raw[:-7])
    with pytest.raises(FormatError, match="truncated"):
        ckpt.load_checkpoint(path)


def test_module_checkpoint_restores_weights(tmp_path):
    rng = np.random.default_rng(1)
    src = nn.TransformerBlock(8, 2, 16, rng)
    path = tmp_path / "b.ckpt"
    ckpt.save_checkpoint(path, ckpt.checkpoint_from_module("block", src, seed=4))
    dst = nn.TransformerBlock(8, 2, 16, np.random.default_rng(2))
    loaded = ckpt.load_into_module(path, dst, expect_tag="block")
    assert loaded.seed == 4
    for name, tens in src.tensors().items():
        assert np.array_equal(tens.data, dst.tensors()[name].data)


# -- config -----------------------------------------------------------------------


def test_config_parses_and_coerces():
    cfg = cfgmod.parse_config_text("seed = 9\nsep_lr = 0.01  # comment\n\nnoise_kind = white\n")
    assert cfg.seed == 9 and cfg.sep_lr == 0.01 and cfg.noise_kind == "white"
    assert cfg.sample_rate == 8000  # untouched default


def test_config_rejects_unknown_key():
    with pytest.raises(ConfigError, match="unknown key"):
        cfgmod.parse_config_text("not_a_key = 1\n")


def test_config_rejects_bad_value():
    with pytest.raises(ConfigError, match="seed"):
        cfgmod.parse_config_text("seed = banana\n")


def test_config_rejects_missing_equals():
    with pytest.raises(ConfigError, match="key = value"):
        cfgmod.parse_config_text("just some text\n")


def test_config_text_round_trips():
    cfg = cfgmod.PipelineConfig(seed=5, sep_epochs=3, noise_kind="babble")
    back = cfgmod.parse_config_text(cfgmod.config_text(cfg))
    assert back == cfg


def test_config_hash_tracks_content():
    a = cfgmod.PipelineConfig()
    b = cfgmod.PipelineConfig(seed=1)
    assert cfgmod.config_hash(a) != cfgmod.config_hash(b)
    assert cfgmod.config_hash(a) == cfgmod.config_hash(cfgmod.PipelineConfig())
    assert len(cfgmod.config_hash(a)) == 12


def test_config_overrides_coerce_strings():
    cfg = cfgmod.apply_overrides(cfgmod.PipelineConfig(), {"sep_epochs": "7", "snr_min": "-3.5"})
    assert cfg.sep_epochs == 7 and cfg.snr_min == -3.5
    with pytest.raises(ConfigError):
        cfgmod.apply_overrides(cfg, {"nope": "1"})
