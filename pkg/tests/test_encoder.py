import math

import numpy as np
import pytest

from unsupseg.corpus import Waveform
from unsupseg.encoder import (Encoder, EncoderConfig, FORMAT_VERSION, MAGIC, init_encoder,
                              load_checkpoint, out_length, save_checkpoint)
from unsupseg.errors import CheckpointError, ContractError, InputTooShortError, SampleRateError

SMALL = EncoderConfig(channels=16, projection_dim=8)


def iterate_lengths(T, kernels=(10, 8, 4, 4, 4), strides=(5, 4, 2, 2, 2)):
    for k, s in zip(kernels, strides):
        T = (T - k) // s + 1
    return T


@pytest.fixture(scope="module")
def trained_small():
    """A narrow encoder with populated batch-norm statistics."""
    enc = Encoder(SMALL, seed=5)
    rng = np.random.default_rng(0)
    enc.forward([rng.standard_normal(4000) for _ in range(3)], training=True)
    enc._cache = None
    return enc


def test_config_defaults():
    cfg = EncoderConfig()
    assert cfg.kernel_sizes == (10, 8, 4, 4, 4)
    assert cfg.strides == (5, 4, 2, 2, 2)
    assert cfg.channels == 256 and cfg.projection_dim == 64
    assert cfg.hop_samples == 160
    assert cfg.receptive_field == 465


def test_config_rejects_bad_hop():
    with pytest.raises(ContractError):
        EncoderConfig(strides=(5, 4, 2, 2, 1))
    with pytest.raises(ContractError):
        EncoderConfig(kernel_sizes=(10, 8, 4, 4))


@pytest.mark.parametrize("T, L", [(16000, 98), (465, 1), (32000, 198)])
def test_out_length(T, L):
    assert out_length(T) == L == iterate_lengths(T)


def test_out_length_too_short():
    with pytest.raises(InputTooShortError, match="465"):
        out_length(464)


def test_out_length_grows_one_frame_per_hop():
    prev = out_length(465)
    for T in range(466, 465 + 160 * 6):
        L = out_length(T)
        assert L >= prev
        assert L == 1 + (T - 465) // 160
        prev = L


def test_init_deterministic_and_seed_dependent():
    a, b, c = Encoder(SMALL, seed=1), Encoder(SMALL, seed=1), Encoder(SMALL, seed=2)
    for name in a.params:
        assert np.array_equal(a.params[name].value, b.params[name].value)
    assert any(not np.array_equal(a.params[n].value, c.params[n].value) for n in a.params)


def test_parameter_count_default():
    c, n = 256, 64
    conv = (c * 1 * 10 + c) + (c * c * 8 + c) + 3 * (c * c * 4 + c)
    bn_affine = 5 * 2 * c
    bn_running = 5 * 2 * c
    proj = n * c + n
    expected = conv + bn_affine + bn_running + proj
    assert expected == 1_336_128
    assert init_encoder(EncoderConfig(), seed=0).num_parameters == expected


def test_no_context_network():
    names = set(Encoder(SMALL).params)
    assert names == {f"conv{i}.{p}" for i in range(5) for p in ("weight", "bias")} \
        | {f"bn{i}.{p}" for i in range(5) for p in ("gamma", "beta")} \
        | {"proj.weight", "proj.bias"}


def test_init_uniform_bounds():
    enc = Encoder(SMALL, seed=0)
    w = enc.params["conv1.weight"].value
    assert np.abs(w).max() <= math.sqrt(1 / (16 * 8))
    assert np.abs(enc.params["proj.weight"].value).max() <= math.sqrt(1 / 16)


@pytest.mark.parametrize("T, L", [(16000, 98), (465, 1)])
def test_encode_shapes(trained_small, T, L):
    z = trained_small.encode(Waveform(np.zeros(T, dtype=np.float32)))
    assert z.vectors.shape == (L, 8)
    assert (z.hop_samples, z.window_samples, z.sample_rate) == (160, 465, 16000)


def test_encode_default_width():
    z = Encoder(seed=0).encode(np.random.default_rng(0).standard_normal(16000), mode="train")
    assert z.vectors.shape == (98, 64)


def test_encode_eval_deterministic(trained_small):
    x = np.random.default_rng(1).standard_normal(5000)
    a = trained_small.encode(Waveform(x)).vectors
    b = trained_small.encode(Waveform(x)).vectors
    assert np.array_equal(a, b)


def test_encode_errors(trained_small):
    with pytest.raises(InputTooShortError, match="465"):
        trained_small.encode(Waveform(np.zeros(400)))
    with pytest.raises(SampleRateError, match="8000"):
        trained_small.encode(Waveform(np.zeros(4000), sample_rate=8000))


def test_hop_invariance(trained_small):
    x = np.random.default_rng(2).standard_normal(6000).astype(np.float32)
    z = trained_small.encode(Waveform(x)).vectors
    shifted = trained_small.encode(Waveform(x[160:])).vectors
    assert len(shifted) == len(z) - 1
    assert np.array_equal(shifted, z[1:])


def test_locality(trained_small):
    x = np.random.default_rng(3).standard_normal(6000).astype(np.float32)
    z = trained_small.encode(Waveform(x)).vectors
    i = 10
    y = x.copy()
    y[:i * 160] += 1.0
    y[i * 160 + 465:] -= 1.0
    assert np.array_equal(trained_small.encode(Waveform(y)).vectors[i], z[i])
    # and a change inside the window does move it
    y = x.copy()
    y[i * 160 + 200] += 1.0
    assert not np.array_equal(trained_small.encode(Waveform(y)).vectors[i], z[i])


def test_checkpoint_roundtrip_bitwise(tmp_path, trained_small):
    path = tmp_path / "m.ckpt"
    save_checkpoint(trained_small, path, {"epoch": 3, "best_val_loss": 1.25, "seed": 9})
    loaded = load_checkpoint(path)
    x = Waveform(np.random.default_rng(4).standard_normal(7000).astype(np.float32))
    assert np.array_equal(loaded.encode(x).vectors, trained_small.encode(x).vectors)
    assert loaded.metadata == {"epoch": 3, "best_val_loss": 1.25, "seed": 9}
    assert loaded.config == trained_small.config
    save_checkpoint(loaded, tmp_path / "again.ckpt", {"epoch": 3, "best_val_loss": 1.25, "seed": 9})
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_layout_header(tmp_path, trained_small):
    path = tmp_path / "m.ckpt"
    save_checkpoint(trained_small, path)
    data = path.read_bytes()
    assert data[:8] == MAGIC
    assert int.from_bytes(data[8:12], "little") == FORMAT_VERSION


def test_checkpoint_truncated(tmp_path, trained_small):
    path = tmp_path / "m.ckpt"
    save_checkpoint(trained_small, path)
    data = path.read_bytes()
    for cut in (4, 20, len(data) // 2, len(data) - 1):
        path.write_bytes(data[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def test_checkpoint_corrupt_and_version(tmp_path, trained_small):
    path = tmp_path / "m.ckpt"
    save_checkpoint(trained_small, path)
    data = bytearray(path.read_bytes())
    flipped = bytearray(data)
    flipped[-100] ^= 0xFF
    path.write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError, match="CRC"):
        load_checkpoint(path)
    data[8:12] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="format_version 99"):
        load_checkpoint(path)


def test_checkpoint_projection_dim(tmp_path):
    enc = Encoder(EncoderConfig(channels=8, projection_dim=32), seed=0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(enc, path)
    assert load_checkpoint(path, expected_projection_dim=32).config.projection_dim == 32
    with pytest.raises(CheckpointError, match="projection_dim 32"):
        load_checkpoint(path, expected_projection_dim=64)


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_backward_requires_training_forward():
    with pytest.raises(ContractError):
        Encoder(SMALL).backward([np.zeros((1, 8))])
