"""Transposed-convolution voxel decoder; no attention layers.

Encoder tokens are averaged, linearly projected to a 4^3 seed volume, and
upsampled by three (conv-transpose, batch-norm, relu) blocks to 32^3. A 1x1x1
convolution and a sigmoid produce occupancy probabilities.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, MutableMapping

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor, ops

N_UP = 3


@dataclass(frozen=True)
class DecoderConfig:
    seed_side: int = 4
    seed_channels: int = 64
    channels: tuple = (32, 16, 8)  # output channels of each upsampling block
    activation: str = "relu"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    @classmethod
    def desk(cls, **overrides) -> "DecoderConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "DecoderConfig":
        # Sized so the decoder lands near 1.2M parameters behind a 1024-channel encoder.
        base = dict(seed_channels=16, channels=(64, 32, 16))
        base.update(overrides)
        return cls(**base)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @property
    def output_side(self) -> int:
        return self.seed_side << N_UP

    def validate(self) -> "DecoderConfig":
        if len(self.channels) != N_UP:
            raise ConfigError(f"need {N_UP} upsampling channel counts, got {self.channels}")
        if self.seed_side < 1 or self.seed_channels < 1 or min(self.channels) < 1:
            raise ConfigError("decoder sizes must be positive")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if self.output_side != 32:
            raise ConfigError(f"seed side {self.seed_side} does not reach a 32^3 grid")
        return self

    def block_channels(self) -> list:
        """(c_in, c_out) of every upsampling block."""
        ins = (self.seed_channels,) + self.channels[:-1]
        return list(zip(ins, self.channels))


def project_to_volume(features: Tensor, params: Mapping[str, Tensor], config: DecoderConfig) -> Tensor:
    """(b, h, w, c) tokens -> (b, c0, s, s, s) seed volume.

    Tokens are mean-pooled, so any token count is accepted. The projected
    vector is reshaped channel-major, then depth, height, width (row-major).
    """
    if features.ndim != 4:
        raise DimensionError(f"expected (b, h, w, c) features, got {features.shape}")
    b = features.shape[0]
    s = config.seed_side
    pooled = ops.mean(features, axis=(1, 2))
    flat = ops.linear(pooled, params["dec.proj.weight"], params["dec.proj.bias"])
    return ops.reshape(flat, (b, config.seed_channels, s, s, s))


def upsample_block(
    x: Tensor,
    params: Mapping[str, Tensor],
    buffers: MutableMapping[str, np.ndarray],
    prefix: str,
    training: bool,
    config: DecoderConfig = DecoderConfig(),
) -> Tensor:
    """ConvTranspose3d(k4, s2, p1) -> BatchNorm3d -> ReLU. Updates ``buffers`` in training mode."""
    y = ops.conv_transpose3d(x, params[prefix + "conv.weight"], params[prefix + "conv.bias"])
    y, mean, var = ops.batch_norm3d(
        y, params[prefix + "bn.weight"], params[prefix + "bn.bias"],
        buffers[prefix + "bn.running_mean"], buffers[prefix + "bn.running_var"],
        training=training, momentum=config.bn_momentum, eps=config.bn_eps)
    if training:
        buffers[prefix + "bn.running_mean"] = mean
        buffers[prefix + "bn.running_var"] = var
    return ops.relu(y)


def decode_logits(features: Tensor, params, buffers, config: DecoderConfig, training: bool = False) -> Tensor:
    x = project_to_volume(features, params, config)
    for k in range(1, N_UP + 1):
        x = upsample_block(x, params, buffers, f"dec.up{k}.", training, config)
    b, c = x.shape[:2]
    side = x.shape[2]
    tokens = ops.reshape(ops.transpose(x, (0, 2, 3, 4, 1)), (-1, c))
    logits = ops.linear(tokens, params["dec.head.weight"], params["dec.head.bias"])
    return ops.reshape(logits, (b, side, side, side))


def decode(features: Tensor, params, buffers, config: DecoderConfig, training: bool = False) -> Tensor:
    """Occupancy probabilities (b, 32, 32, 32), strictly inside (0, 1)."""
    return ops.sigmoid(decode_logits(features, params, buffers, config, training))
