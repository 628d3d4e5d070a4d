import struct

import numpy as np
import pytest

from oogen.checkpoint import (
    FORMAT_VERSION, MAGIC, Checkpoint, CheckpointError, decode_checkpoint, encode_checkpoint, load_checkpoint,
    save_checkpoint,
)
from oogen.model import ModelConfig, ModelParams
from oogen.train import Adam


def sample_ckpt(with_opt=True, score="distmult"):
    cfg = ModelConfig(7, 4, 2, dim=3, n_bases=2, score=score)
    params = ModelParams.initialize(cfg, np.random.default_rng(0))
    opt = None
    if with_opt:
        opt = Adam(lr=0.01)
        grads = {n: np.random.default_rng(1).normal(size=params[n].shape) for n in params.names()}
        opt.step({n: params[n].copy() for n in params.names()}, grads)
    return Checkpoint(params, "abc123", {"lr": 0.01, "dim": 3}, opt, {"best_episode": 4})


@pytest.mark.parametrize("with_opt", [True, False])
@pytest.mark.parametrize("score", ["distmult", "linear"])
def test_round_trip_bit_exact(with_opt, score):
    ck = sample_ckpt(with_opt, score)
    back = decode_checkpoint(encode_checkpoint(ck), "abc123")
    assert back.params.config == ck.params.config
    for n in ck.params.names():
        assert np.array_equal(back.params[n], ck.params[n])
    assert back.hyperparams == ck.hyperparams and back.extra == ck.extra
    if with_opt:
        assert back.optimizer.t == 1 and set(back.optimizer.m) == set(ck.optimizer.m)
        for n in ck.optimizer.m:
            assert np.array_equal(back.optimizer.m[n], ck.optimizer.m[n])
            assert np.array_equal(back.optimizer.v[n], ck.optimizer.v[n])
    else:
        assert back.optimizer is None


def test_encoding_deterministic():
    assert encode_checkpoint(sample_ckpt()) == encode_checkpoint(sample_ckpt())


def test_header_layout():
    data = encode_checkpoint(sample_ckpt())
    magic, version, n_meta = struct.unpack_from("<8sIQ", data)
    assert magic == MAGIC and version == FORMAT_VERSION and n_meta > 0


@pytest.mark.parametrize("cut", [0, 5, 20, 200, -1])
def test_truncation(cut):
    data = encode_checkpoint(sample_ckpt())
    with pytest.raises(CheckpointError):
        decode_checkpoint(data[:cut])


def test_flipped_payload_byte():
    data = bytearray(encode_checkpoint(sample_ckpt()))
    data[-3] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        decode_checkpoint(bytes(data))


def test_bad_magic():
    data = encode_checkpoint(sample_ckpt())
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"NOTACKPT" + data[8:])


def test_version_mismatch():
    data = bytearray(encode_checkpoint(sample_ckpt()))
    struct.pack_into("<I", data, 8, FORMAT_VERSION + 1)
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(bytes(data))


def test_vocab_mismatch():
    with pytest.raises(CheckpointError, match="vocabulary"):
        decode_checkpoint(encode_checkpoint(sample_ckpt()), "other")


def test_save_load(tmp_path):
    ck = sample_ckpt()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, ck)
    assert not (tmp_path / "m.ckpt.tmp").exists()
    back = load_checkpoint(path)
    assert all(np.array_equal(back.params[n], ck.params[n]) for n in ck.params.names())
    assert path.read_bytes() == encode_checkpoint(ck)
