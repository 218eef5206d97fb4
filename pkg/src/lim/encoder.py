"""SincNet-style waveform encoder.

Pipeline for a batch of raw chunks ``[batch, N]``::

    layer_norm -> sinc conv -> |.| -> maxpool -> layer_norm -> leaky_relu
    -> (conv -> maxpool -> layer_norm -> leaky_relu) x 2
    -> flatten -> (linear -> batch_norm -> leaky_relu) x 2

The output of the last fully-connected block is the embedding.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import DimensionError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderConfig:
    chunk_len: int = 3200
    sinc_filters: int = 80
    sinc_len: int = 251
    conv_filters: tuple = (60, 60)
    conv_len: tuple = (5, 5)
    pool: int = 3
    fc: tuple = (2048, 1024)
    leaky_slope: float = 0.2
    ln_eps: float = 1e-6
    bn_momentum: float = 0.05
    bn_eps: float = 1e-5
    sample_rate: int = 16000
    min_low_hz: float = 30.0
    max_high_hz: float = 7950.0

    def __post_init__(self):
        if self.sinc_len % 2 != 1:
            raise DimensionError(f"sinc_len must be odd, got {self.sinc_len}")
        if len(self.conv_filters) != len(self.conv_len):
            raise DimensionError("conv_filters and conv_len must have the same length")
        object.__setattr__(self, "conv_filters", tuple(self.conv_filters))
        object.__setattr__(self, "conv_len", tuple(self.conv_len))
        object.__setattr__(self, "fc", tuple(self.fc))
        self.flatten_width()

    @classmethod
    def desk(cls):
        """Reduced widths that train on one CPU core in minutes."""
        return cls(sinc_filters=24, sinc_len=101, conv_filters=(24, 24), fc=(128, 64))

    @classmethod
    def tiny(cls):
        """Gradient-check configuration."""
        return cls(chunk_len=160, sinc_filters=4, sinc_len=31, conv_filters=(4, 4), fc=(16, 8))

    @property
    def embedding_dim(self):
        return self.fc[-1]

    def time_extents(self):
        """Time length after each conv+pool block."""
        t = (self.chunk_len - self.sinc_len + 1) // self.pool
        sizes = [t]
        for k in self.conv_len:
            t = (t - k + 1) // self.pool
            sizes.append(t)
        return sizes

    def flatten_width(self):
        sizes = self.time_extents()
        if min(sizes) < 1:
            raise DimensionError(f"chunk_len {self.chunk_len} too short for the conv stack: extents {sizes}")
        channels = self.conv_filters[-1] if self.conv_filters else self.sinc_filters
        return channels * sizes[-1]

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise ValueError(f"unknown encoder config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


@dataclass
class EncoderParams:
    config: EncoderConfig
    tensors: dict
    bn: dict

    def n_parameters(self):
        return sum(t.size for t in self.tensors.values())

    def parameters(self):
        return list(self.tensors.values())

    def copy(self):
        tensors = {k: nc.Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.tensors.items()}
        return EncoderParams(self.config, tensors, {k: s.copy() for k, s in self.bn.items()})


# ---------------------------------------------------------------------------
# Sinc layer
# ---------------------------------------------------------------------------
def constrain_cutoffs(raw_low, raw_bandwidth):
    """Map unconstrained values to cutoffs with ``0 <= f1 <= f2 <= 0.5``."""
    f1 = nc.clip(nc.absolute(nc.as_tensor(raw_low)), 0.0, 0.5)
    f2 = nc.clip(f1 + nc.absolute(nc.as_tensor(raw_bandwidth)), 0.0, 0.5)
    return f1, f2


def sinc_taps(f1, f2, klen):
    """Hamming-windowed band-pass taps for one filter, as a float64 array."""
    with nc.precision(64), nc.no_grad():
        return nc.sinc_bandpass(nc.Tensor([f1]), nc.Tensor([f2]), klen).data[0].copy()


def hz_to_mel(hz):
    return 2595 * np.log10(1 + np.asarray(hz) / 700)


def mel_to_hz(mel):
    return 700 * (10 ** (np.asarray(mel) / 2595) - 1)


def mel_cutoffs(n_filters, low_hz, high_hz, sample_rate):
    """Adjacent mel-spaced bands; returns normalised (low, bandwidth)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), n_filters + 1)) / sample_rate
    return edges[:-1], np.diff(edges)


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------
def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder(seed, config=None):
    """Fresh encoder parameters, deterministic in ``seed``.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    cfg = config or EncoderConfig()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    t = {}

    def param(name, value):
        t[name] = nc.Tensor(value, requires_grad=True, name=name)

    sizes = cfg.time_extents()
    param("enc.ln0.gain", np.ones(cfg.chunk_len))
    param("enc.ln0.offset", np.zeros(cfg.chunk_len))
    low, band = mel_cutoffs(cfg.sinc_filters, cfg.min_low_hz, cfg.max_high_hz, cfg.sample_rate)
    param("enc.sinc.low", low)
    param("enc.sinc.band", band)
    param("enc.ln1.gain", np.ones((cfg.sinc_filters, sizes[0])))
    param("enc.ln1.offset", np.zeros((cfg.sinc_filters, sizes[0])))
    in_ch = cfg.sinc_filters
    for i, (out_ch, klen) in enumerate(zip(cfg.conv_filters, cfg.conv_len), start=2):
        param(f"enc.conv{i}.kernel", _uniform(rng, (out_ch, in_ch, klen), in_ch * klen))
        param(f"enc.ln{i}.gain", np.ones((out_ch, sizes[i - 1])))
        param(f"enc.ln{i}.offset", np.zeros((out_ch, sizes[i - 1])))
        in_ch = out_ch
    width = cfg.flatten_width()
    bn = {}
    for j, units in enumerate(cfg.fc):
        param(f"enc.fc{j}.weight", _uniform(rng, (units, width), width))
        param(f"enc.bn{j}.gain", np.ones(units))
        param(f"enc.bn{j}.offset", np.zeros(units))
        bn[f"enc.bn{j}"] = nc.BatchNormState(units, cfg.bn_momentum, cfg.bn_eps)
        width = units
    params = EncoderParams(cfg, t, bn)
    log.info("encoder initialised: %d parameters, flatten width %d, embedding %d",
             params.n_parameters(), cfg.flatten_width(), cfg.embedding_dim)
    return params


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------
def _as_batch(chunks, n):
    if isinstance(chunks, nc.Tensor):
        x = chunks
    else:
        if isinstance(chunks, (list, tuple)) and chunks and hasattr(chunks[0], "samples"):
            chunks = [c.samples for c in chunks]
        x = nc.Tensor(np.asarray(chunks))
    if x.ndim == 1:
        x = nc.reshape(x, (1, x.shape[0]))
    if x.ndim != 2 or x.shape[1] != n:
        raise DimensionError(f"encoder expects chunks of {n} samples, got shape {x.shape}")
    return x


def sinc_filters(params):
    cfg = params.config
    f1, f2 = constrain_cutoffs(params.tensors["enc.sinc.low"], params.tensors["enc.sinc.band"])
    return nc.sinc_bandpass(f1, f2, cfg.sinc_len)


def encode(chunks, params, mode="eval"):
    """Embed a batch of raw chunks; returns a [batch, M] tensor.

    ``mode='train'`` normalises the fully-connected layers with batch
    statistics and updates the running state.
    """
    cfg, p = params.config, params.tensors
    slope = cfg.leaky_slope
    x = _as_batch(chunks, cfg.chunk_len)
    batch = x.shape[0]
    h = nc.layer_norm(x, p["enc.ln0.gain"], p["enc.ln0.offset"], cfg.ln_eps)
    h = nc.reshape(h, (batch, 1, cfg.chunk_len))
    taps = sinc_filters(params)
    h = nc.conv1d(h, nc.reshape(taps, (cfg.sinc_filters, 1, cfg.sinc_len)))
    h = nc.max_pool1d(nc.absolute(h), cfg.pool)
    h = nc.leaky_relu(nc.layer_norm(h, p["enc.ln1.gain"], p["enc.ln1.offset"], cfg.ln_eps), slope)
    for i in range(2, 2 + len(cfg.conv_filters)):
        h = nc.max_pool1d(nc.conv1d(h, p[f"enc.conv{i}.kernel"]), cfg.pool)
        h = nc.leaky_relu(nc.layer_norm(h, p[f"enc.ln{i}.gain"], p[f"enc.ln{i}.offset"], cfg.ln_eps), slope)
    width = int(np.prod(h.shape[1:]))
    if width != cfg.flatten_width():
        raise DimensionError(f"flatten width drifted: computed {width}, configured {cfg.flatten_width()}")
    h = nc.reshape(h, (batch, width))
    for j in range(len(cfg.fc)):
        # no bias: batch norm's offset subsumes it
        h = nc.linear(h, p[f"enc.fc{j}.weight"])
        h = nc.batch_norm(h, p[f"enc.bn{j}.gain"], p[f"enc.bn{j}.offset"], params.bn[f"enc.bn{j}"], mode)
        h = nc.leaky_relu(h, slope)
    return h


def embed(chunks, params, batch_size=256):
    """Eval-mode embeddings as a numpy array, without recording a tape."""
    if isinstance(chunks, (list, tuple)) and chunks and hasattr(chunks[0], "samples"):
        chunks = [c.samples for c in chunks]
    arr = np.asarray(chunks)
    out = []
    with nc.no_grad():
        for lo in range(0, len(arr), batch_size):
            out.append(encode(arr[lo : lo + batch_size], params, "eval").data)
    return np.concatenate(out) if out else np.zeros((0, params.config.embedding_dim))
