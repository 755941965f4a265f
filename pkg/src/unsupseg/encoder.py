"""Raw-waveform convolutional encoder and its checkpoint file format.

Architecture: five valid strided 1-D convolutions, each followed by batch
norm and a leaky ReLU, then a frame-wise linear projection.  With the
default kernels (10, 8, 4, 4, 4) and strides (5, 4, 2, 2, 2) one output
frame covers 465 input samples and frames advance by 160 samples (10 ms at
16 kHz).

Checkpoint layout (all integers little-endian)::

    magic           8 bytes   b"USEGCKPT"
    format_version  uint32
    config          uint32 length + UTF-8 JSON of EncoderConfig
    metadata        uint32 length + UTF-8 JSON (epoch, best_val_loss, seed, bn counters)
    n_tensors       uint32
    n_tensors x:    uint16 name length, UTF-8 name,
                    uint8 dtype tag (1 = float32), uint8 ndim, ndim x uint32 dims,
                    float32 little-endian row-major payload
    crc32           uint32 over every preceding byte
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numkit
from .errors import CheckpointError, ContractError, InputTooShortError, SampleRateError
from .numkit import BatchNormStats, Parameter

MAGIC = b"USEGCKPT"
FORMAT_VERSION = 1
_DTYPE_TAGS = {1: np.dtype("<f4")}


@dataclass(frozen=True)
class EncoderConfig:
    kernel_sizes: tuple = (10, 8, 4, 4, 4)
    strides: tuple = (5, 4, 2, 2, 2)
    channels: int = 256
    projection_dim: int = 64
    leaky_slope: float = 0.01
    sample_rate: int = 16000
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if len(self.kernel_sizes) != 5 or len(self.strides) != 5:
            raise ContractError("encoder needs exactly 5 kernel sizes and 5 strides")
        if any(s < 1 for s in self.strides) or any(k < 1 for k in self.kernel_sizes):
            raise ContractError("kernel sizes and strides must be >= 1")
        if math.prod(self.strides) * 100 != self.sample_rate:
            raise ContractError(f"product of strides {math.prod(self.strides)} does not give "
                                f"a 10 ms hop at {self.sample_rate} Hz")
        if self.channels < 1 or self.projection_dim < 1:
            raise ContractError("channels and projection_dim must be positive")

    @property
    def hop_samples(self):
        return math.prod(self.strides)

    @property
    def receptive_field(self):
        rf, jump = 1, 1
        for k, s in zip(self.kernel_sizes, self.strides):
            rf += (k - 1) * jump
            jump *= s
        return rf

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def out_length(num_samples, config=None):
    """Number of frames produced for ``num_samples`` input samples."""
    config = config or EncoderConfig()
    if num_samples < config.receptive_field:
        raise InputTooShortError(num_samples, config.receptive_field, "waveform")
    length = num_samples
    for k, s in zip(config.kernel_sizes, config.strides):
        length = (length - k) // s + 1
    return length


@dataclass
class FrameEmbeddings:
    """Encoder output: ``vectors`` is ``(L, N)``, row i is frame z_i."""

    vectors: np.ndarray
    hop_samples: int = 160
    window_samples: int = 465
    sample_rate: int = 16000

    def __len__(self):
        return self.vectors.shape[0]


@dataclass
class _LayerCache:
    inputs: list = field(default_factory=list)
    pre_act: list = field(default_factory=list)
    bn: object = None


class Encoder:
    """Encoder parameters, batch-norm statistics and a forward/backward pass.

    ``params`` maps names to :class:`~unsupseg.numkit.Parameter`; ``bn_stats``
    holds one :class:`~unsupseg.numkit.BatchNormStats` per conv block.
    """

    def __init__(self, config=None, seed=0, dtype=np.float32):
        self.config = config or EncoderConfig()
        self.dtype = np.dtype(dtype)
        self.metadata = {}
        self.params = {}
        self.bn_stats = []
        cfg = self.config
        rng = np.random.default_rng(seed)

        def uniform(shape, fan_in):
            bound = math.sqrt(1.0 / fan_in)
            return rng.uniform(-bound, bound, size=shape).astype(self.dtype)

        c_in = 1
        for i, k in enumerate(cfg.kernel_sizes):
            fan_in = c_in * k
            self.params[f"conv{i}.weight"] = Parameter(uniform((cfg.channels, c_in, k), fan_in))
            self.params[f"conv{i}.bias"] = Parameter(uniform((cfg.channels,), fan_in))
            self.params[f"bn{i}.gamma"] = Parameter(np.ones(cfg.channels, dtype=self.dtype))
            self.params[f"bn{i}.beta"] = Parameter(np.zeros(cfg.channels, dtype=self.dtype))
            self.bn_stats.append(BatchNormStats.fresh(cfg.channels, self.dtype))
            c_in = cfg.channels
        self.params["proj.weight"] = Parameter(uniform((cfg.projection_dim, c_in), c_in))
        self.params["proj.bias"] = Parameter(uniform((cfg.projection_dim,), c_in))
        self._cache = None

    @property
    def num_parameters(self):
        """Trainable scalars plus batch-norm running statistics."""
        trainable = sum(p.value.size for p in self.params.values())
        return trainable + sum(s.running_mean.size + s.running_var.size for s in self.bn_stats)

    def tensors(self):
        """Every persisted tensor by name (parameters, then running stats)."""
        out = {name: p.value for name, p in self.params.items()}
        for i, s in enumerate(self.bn_stats):
            out[f"bn{i}.running_mean"] = s.running_mean
            out[f"bn{i}.running_var"] = s.running_var
        return out

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def forward(self, batch, training=False):
        """Encode a batch of 1-D sample arrays (lengths may differ).

        Returns a list of ``(L_b, N)`` embedding matrices.  In training mode
        batch norm uses pooled batch statistics and activations are cached
        for :meth:`backward`.  Eval mode accumulates float32 GEMMs in float64,
        which makes each frame independent of its position in the utterance
        (shifting the input by one hop shifts the output by one row, bitwise).
        """
        cfg = self.config
        # eval: wide accumulation so a frame's value does not depend on its GEMM column
        acc = None if training or self.dtype == np.float64 else np.float64
        xs = []
        for x in batch:
            x = np.asarray(x, dtype=self.dtype)
            if x.ndim != 1:
                raise ContractError(f"expected mono 1-D samples, got shape {x.shape}")
            if len(x) < cfg.receptive_field:
                raise InputTooShortError(len(x), cfg.receptive_field, "waveform")
            xs.append(x[None, :])
        caches = []
        for i, s in enumerate(cfg.strides):
            w = self.params[f"conv{i}.weight"].value
            b = self.params[f"conv{i}.bias"].value
            cache = _LayerCache(inputs=xs)
            hs = [numkit.conv1d_forward(x, w, b, s, acc) for x in xs]
            hs, cache.bn = numkit.batchnorm_forward(
                hs, self.params[f"bn{i}.gamma"].value, self.params[f"bn{i}.beta"].value,
                self.bn_stats[i], training, cfg.bn_momentum, cfg.bn_eps)
            cache.pre_act = hs
            xs = [numkit.leaky_relu(h, cfg.leaky_slope) for h in hs]
            caches.append(cache)
        w, b = self.params["proj.weight"].value, self.params["proj.bias"].value
        zs = [numkit.linear_forward(x, w, b, acc) for x in xs]
        self._cache = (caches, xs) if training else None
        return [z.T for z in zs]

    def backward(self, grad_zs):
        """Accumulate parameter gradients for the last training forward."""
        if self._cache is None:
            raise ContractError("backward called without a preceding training-mode forward")
        caches, feats = self._cache
        cfg = self.config
        pw, pb = self.params["proj.weight"], self.params["proj.bias"]
        grads = []
        for g, x in zip(grad_zs, feats):
            gx, gw, gb = numkit.linear_backward(np.ascontiguousarray(g.T), x, pw.value)
            pw.grad += gw
            pb.grad += gb
            grads.append(gx)
        for i in reversed(range(len(cfg.strides))):
            cache = caches[i]
            grads = [numkit.leaky_relu_backward(g, h, cfg.leaky_slope)
                     for g, h in zip(grads, cache.pre_act)]
            grads, ggamma, gbeta = numkit.batchnorm_backward(grads, cache.bn)
            self.params[f"bn{i}.gamma"].grad += ggamma
            self.params[f"bn{i}.beta"].grad += gbeta
            w = self.params[f"conv{i}.weight"]
            b = self.params[f"conv{i}.bias"]
            new = []
            for g, x in zip(grads, cache.inputs):
                gx, gw, gb = numkit.conv1d_backward(g, x, w.value, cfg.strides[i])
                w.grad += gw
                b.grad += gb
                new.append(gx)
            grads = new
        self._cache = None

    def encode(self, waveform, mode="eval"):
        """Encode one utterance (a ``Waveform`` or a 1-D array at the config rate)."""
        cfg = self.config
        samples = getattr(waveform, "samples", waveform)
        rate = getattr(waveform, "sample_rate", cfg.sample_rate)
        if rate != cfg.sample_rate:
            raise SampleRateError(rate, cfg.sample_rate)
        if mode not in ("train", "eval"):
            raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
        z = self.forward([samples], training=(mode == "train"))[0]
        self._cache = None
        return FrameEmbeddings(np.ascontiguousarray(z), cfg.hop_samples,
                               cfg.receptive_field, cfg.sample_rate)

    def state_copy(self):
        """Snapshot of all persisted tensors (for best-epoch tracking)."""
        return ({k: v.copy() for k, v in self.tensors().items()},
                [s.num_batches_tracked for s in self.bn_stats])

    def load_state(self, snapshot):
        tensors, counters = snapshot
        for name, arr in tensors.items():
            self._tensor_ref(name)[...] = arr
        for s, c in zip(self.bn_stats, counters):
            s.num_batches_tracked = c

    def _tensor_ref(self, name):
        if name in self.params:
            return self.params[name].value
        stem, _, kind = name.partition(".")
        if stem.startswith("bn") and kind in ("running_mean", "running_var"):
            idx = int(stem[2:])
            if idx < len(self.bn_stats):
                return getattr(self.bn_stats[idx], kind)
        raise KeyError(name)


def init_encoder(config=None, seed=0, dtype=np.float32):
    return Encoder(config, seed, dtype)


def save_checkpoint(encoder, path, metadata=None):
    """Write ``encoder`` to ``path`` in the documented binary layout."""
    meta = dict(encoder.metadata)
    meta.update(metadata or {})
    meta["bn_batches_tracked"] = [s.num_batches_tracked for s in encoder.bn_stats]
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", FORMAT_VERSION)
    for blob in (json.dumps(encoder.config.to_dict(), sort_keys=True).encode(),
                 json.dumps(meta, sort_keys=True).encode()):
        buf += struct.pack("<I", len(blob)) + blob
    tensors = encoder.tensors()
    buf += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        encoded = name.encode()
        buf += struct.pack("<H", len(encoded)) + encoded
        buf += struct.pack("<BB", 1, arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected_projection_dim=None):
    """Read an :class:`Encoder` written by :func:`save_checkpoint`.

    Raises :class:`CheckpointError` on a bad magic, unknown version, CRC
    failure, truncation, or a missing/ill-shaped tensor; nothing partial is
    returned.
    """
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic or truncated)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version} "
                              f"(this build reads {FORMAT_VERSION})")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"checkpoint {path} is corrupt or truncated (CRC mismatch)")
    try:
        (n,) = r.unpack("<I")
        config = EncoderConfig.from_dict(json.loads(r.take(n)))
        (n,) = r.unpack("<I")
        meta = json.loads(r.take(n))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"bad config/metadata block: {exc}") from exc
    if expected_projection_dim is not None and config.projection_dim != expected_projection_dim:
        raise CheckpointError(f"checkpoint projection_dim {config.projection_dim} does not match "
                              f"expected {expected_projection_dim}")
    encoder = Encoder(config, seed=0)
    expected = {k: v.shape for k, v in encoder.tensors().items()}
    loaded = {}
    (count,) = r.unpack("<I")
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        tag, ndim = r.unpack("<BB")
        if tag not in _DTYPE_TAGS:
            raise CheckpointError(f"tensor {name!r}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{ndim}I")
        size = math.prod(shape) * _DTYPE_TAGS[tag].itemsize
        arr = np.frombuffer(r.take(size), dtype=_DTYPE_TAGS[tag]).reshape(shape)
        if name not in expected:
            raise CheckpointError(f"unexpected tensor {name!r} in checkpoint")
        if tuple(shape) != expected[name]:
            raise CheckpointError(f"tensor {name!r} has shape {tuple(shape)}, "
                                  f"expected {expected[name]}")
        loaded[name] = arr
    missing = sorted(set(expected) - set(loaded))
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {', '.join(missing)}")
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensor table")
    counters = meta.pop("bn_batches_tracked", [1] * len(encoder.bn_stats))
    encoder.load_state((loaded, counters))
    encoder.metadata = meta
    return encoder
