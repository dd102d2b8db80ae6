"""Encoder + decoder assembly, weight initialization and parameter accounting."""

from __future__ import annotations

import hashlib
import json
import math
from collections import OrderedDict
from typing import Optional

import numpy as np

from . import decoder as dec
from . import encoder as enc
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .tensor import Tensor, default_dtype, parameter


def _trunc_normal(rng, shape, std=0.02):
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)


def _uniform_fan_in(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _linear(out, rng, name, c_in, c_out, bias=True, std=0.02):
    out[name + ".weight"] = _trunc_normal(rng, (c_in, c_out), std)
    if bias:
        out[name + ".bias"] = np.zeros(c_out)


def _layer_norm(out, name, c, gain=1.0):
    out[name + ".weight"] = np.full(c, gain)
    out[name + ".bias"] = np.zeros(c)


def init_encoder_params(config: EncoderConfig, rng: np.random.Generator) -> "OrderedDict[str, np.ndarray]":
    config.validate()
    p: "OrderedDict[str, np.ndarray]" = OrderedDict()
    patch_dim = 3 * config.patch_size ** 2
    _linear(p, rng, "enc.patch_embed.proj", patch_dim, config.embed_dim)
    _layer_norm(p, "enc.patch_embed.norm", config.embed_dim)
    for stage in range(1, enc.N_STAGES + 1):
        c = config.stage_channels(stage)
        m = config.stage_window(stage)
        heads = config.heads[stage - 1]
        hidden = int(c * config.mlp_ratio)
        # Post-norm branches start closed so every block is the identity at init.
        gain = 0.0 if config.attention == enc.V2 else 1.0
        for j in range(config.depths[stage - 1]):
            b = f"enc.stage{stage}.block{j}"
            _layer_norm(p, b + ".norm1", c, gain)
            _linear(p, rng, b + ".attn.qkv", c, 3 * c)
            _linear(p, rng, b + ".attn.proj", c, c)
            if config.attention == enc.V1:
                p[b + ".attn.rel_bias_table"] = _trunc_normal(rng, ((2 * m - 1) ** 2, heads))
            else:
                p[b + ".attn.logit_scale"] = np.full((heads, 1, 1), math.log(10.0))
                p[b + ".attn.cpb.fc1.weight"] = _uniform_fan_in(rng, (2, config.cpb_hidden), 2)
                p[b + ".attn.cpb.fc1.bias"] = _uniform_fan_in(rng, (config.cpb_hidden,), 2)
                p[b + ".attn.cpb.fc2.weight"] = _uniform_fan_in(rng, (config.cpb_hidden, heads), config.cpb_hidden)
            _layer_norm(p, b + ".norm2", c, gain)
            _linear(p, rng, b + ".mlp.fc1", c, hidden)
            _linear(p, rng, b + ".mlp.fc2", hidden, c)
        if stage < enc.N_STAGES:
            _layer_norm(p, f"enc.stage{stage}.merge.norm", 4 * c)
            _linear(p, rng, f"enc.stage{stage}.merge.reduction", 4 * c, 2 * c, bias=False)
    _layer_norm(p, "enc.norm", config.out_channels)
    return p


def init_decoder_params(config: DecoderConfig, in_channels: int, rng: np.random.Generator) -> "OrderedDict[str, np.ndarray]":
    config.validate()
    p: "OrderedDict[str, np.ndarray]" = OrderedDict()
    seed = config.seed_side ** 3 * config.seed_channels
    p["dec.proj.weight"] = _uniform_fan_in(rng, (in_channels, seed), in_channels)
    p["dec.proj.bias"] = _uniform_fan_in(rng, (seed,), in_channels)
    for k, (ci, co) in enumerate(config.block_channels(), start=1):
        fan_in = co * 4 ** 3  # torch convention for transposed conv weights
        p[f"dec.up{k}.conv.weight"] = _uniform_fan_in(rng, (ci, co, 4, 4, 4), fan_in)
        p[f"dec.up{k}.conv.bias"] = _uniform_fan_in(rng, (co,), fan_in)
        p[f"dec.up{k}.bn.weight"] = np.ones(co)
        p[f"dec.up{k}.bn.bias"] = np.zeros(co)
    last = config.channels[-1]
    p["dec.head.weight"] = _uniform_fan_in(rng, (last, 1), last)
    p["dec.head.bias"] = np.zeros(1)
    return p


def init_decoder_buffers(config: DecoderConfig) -> "OrderedDict[str, np.ndarray]":
    b: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for k, (_, co) in enumerate(config.block_channels(), start=1):
        b[f"dec.up{k}.bn.running_mean"] = np.zeros(co)
        b[f"dec.up{k}.bn.running_var"] = np.ones(co)
    return b


def config_fingerprint(encoder: EncoderConfig, decoder: DecoderConfig) -> str:
    blob = json.dumps({"encoder": encoder.to_dict(), "decoder": decoder.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class Model:
    """Parameters, batch-norm buffers and the forward pass ``decode(encode(image))``."""

    def __init__(self, encoder: EncoderConfig, decoder: DecoderConfig, params=None, buffers=None,
                 rng: Optional[np.random.Generator] = None, dtype=None):
        self.encoder = encoder.validate()
        self.decoder = decoder.validate()
        dtype = dtype or default_dtype()
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            arrays = init_encoder_params(encoder, rng)
            arrays.update(init_decoder_params(decoder, encoder.out_channels, rng))
        else:
            arrays = params
        self.params: "OrderedDict[str, Tensor]" = OrderedDict(
            (k, parameter(v, name=k, dtype=dtype)) for k, v in arrays.items())
        bufs = buffers if buffers is not None else init_decoder_buffers(decoder)
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict(
            (k, np.asarray(v, dtype=dtype).copy()) for k, v in bufs.items())

    @property
    def fingerprint(self) -> str:
        return config_fingerprint(self.encoder, self.decoder)

    def astype(self, dtype) -> "Model":
        return Model(self.encoder, self.decoder,
                     params={k: v.data for k, v in self.params.items()},
                     buffers=self.buffers, dtype=dtype)

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self.params.items())

    def load_arrays(self, arrays) -> None:
        for k, v in arrays.items():
            p = self.params[k]
            if v.shape != p.shape:
                raise ValueError(f"{k}: shape {v.shape} does not match {p.shape}")
            p.data = np.asarray(v, dtype=p.dtype)

    def features(self, images: Tensor, rng=None) -> Tensor:
        return enc.encode(images, self.params, self.encoder, rng=rng)

    def forward(self, images: Tensor, training: bool = False, rng=None) -> Tensor:
        """Occupancy probabilities (b, 32, 32, 32). ``rng`` drives drop-path in training."""
        feats = self.features(images, rng=rng if training else None)
        return dec.decode(feats, self.params, self.buffers, self.decoder, training=training)

    __call__ = forward


# ------------------------------------------------------------ accounting


def _linear_count(c_in, c_out, bias=True):
    return c_in * c_out + (c_out if bias else 0)


def encoder_param_groups(config: EncoderConfig) -> "OrderedDict[str, int]":
    """Closed-form parameter counts per encoder group."""
    config.validate()
    groups: "OrderedDict[str, int]" = OrderedDict()
    groups["enc.patch_embed"] = _linear_count(3 * config.patch_size ** 2, config.embed_dim) + 2 * config.embed_dim
    for stage in range(1, enc.N_STAGES + 1):
        c = config.stage_channels(stage)
        m = config.stage_window(stage)
        heads = config.heads[stage - 1]
        hidden = int(c * config.mlp_ratio)
        if config.attention == enc.V1:
            bias_terms = (2 * m - 1) ** 2 * heads
        else:
            bias_terms = heads + 2 * config.cpb_hidden + config.cpb_hidden + config.cpb_hidden * heads
        block = (2 * c + _linear_count(c, 3 * c) + _linear_count(c, c) + bias_terms
                 + 2 * c + _linear_count(c, hidden) + _linear_count(hidden, c))
        groups[f"enc.stage{stage}"] = config.depths[stage - 1] * block
        if stage < enc.N_STAGES:
            groups[f"enc.stage{stage}"] += 2 * 4 * c + _linear_count(4 * c, 2 * c, bias=False)
    groups["enc.norm"] = 2 * config.out_channels
    return groups


def decoder_param_groups(config: DecoderConfig, in_channels: int) -> "OrderedDict[str, int]":
    config.validate()
    groups: "OrderedDict[str, int]" = OrderedDict()
    groups["dec.proj"] = _linear_count(in_channels, config.seed_side ** 3 * config.seed_channels)
    for k, (ci, co) in enumerate(config.block_channels(), start=1):
        groups[f"dec.up{k}"] = ci * co * 4 ** 3 + co + 2 * co
    groups["dec.head"] = _linear_count(config.channels[-1], 1)
    return groups


def param_count(encoder: EncoderConfig, decoder: DecoderConfig) -> dict:
    """Exact integer counts: per group, per module, and total."""
    e = encoder_param_groups(encoder)
    d = decoder_param_groups(decoder, encoder.out_channels)
    return {
        "groups": OrderedDict(list(e.items()) + list(d.items())),
        "encoder": sum(e.values()),
        "decoder": sum(d.values()),
        "total": sum(e.values()) + sum(d.values()),
    }


def count_arrays(arrays, prefix: str = "") -> int:
    return int(sum(v.size for k, v in arrays.items() if k.startswith(prefix)))
