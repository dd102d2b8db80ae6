"""Hierarchical shifted-window attention encoder.

Feature maps are tensors laid out (batch, height, width, channels). Weights
live in a flat ``name -> Tensor`` mapping using the checkpoint naming scheme
``enc.stage{i}.block{j}.{attn|mlp|norm1|norm2}.*``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Mapping, Optional

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor, ops

V1 = "v1-bias-table"
V2 = "v2-cosine"
LOGIT_SCALE_MAX = math.log(100.0)
N_STAGES = 4


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 4
    embed_dim: int = 16
    depths: tuple = (1, 1, 2, 1)
    heads: tuple = (1, 2, 4, 8)
    window_size: int = 4
    mlp_ratio: float = 4.0
    attention: str = V2
    drop_path: float = 0.0
    cpb_hidden: int = 512
    shifted: bool = True  # False ablates the shifted windows (every block unshifted)

    @classmethod
    def desk(cls, **overrides) -> "EncoderConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "EncoderConfig":
        base = dict(image_size=224, patch_size=4, embed_dim=128, depths=(2, 2, 18, 2),
                    heads=(4, 8, 16, 32), window_size=7, attention=V2, drop_path=0.2)
        base.update(overrides)
        return cls(**base)

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depths"] = list(self.depths)
        d["heads"] = list(self.heads)
        return d

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    def stage_grid(self, stage: int) -> int:
        """Token grid side inside ``stage`` (1-based)."""
        return self.grid_size >> (stage - 1)

    def stage_channels(self, stage: int) -> int:
        return self.embed_dim << (stage - 1)

    def stage_window(self, stage: int) -> int:
        """Window side actually used; clipped to the grid once the grid is smaller."""
        return min(self.window_size, self.stage_grid(stage))

    def block_shift(self, stage: int, block: int) -> int:
        if not self.shifted or block % 2 == 0:
            return 0
        return self.stage_window(stage) // 2

    @property
    def out_channels(self) -> int:
        return self.stage_channels(N_STAGES)

    @property
    def out_grid(self) -> int:
        return self.stage_grid(N_STAGES)

    def validate(self) -> "EncoderConfig":
        if len(self.depths) != N_STAGES or len(self.heads) != N_STAGES:
            raise ConfigError(f"need {N_STAGES} depths and heads, got {self.depths} / {self.heads}")
        if min(self.depths) < 1:
            raise ConfigError(f"stage depths must be >= 1, got {self.depths}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.attention not in (V1, V2):
            raise ConfigError(f"unknown attention variant {self.attention!r}")
        if self.window_size < 1 or self.embed_dim < 1 or self.mlp_ratio <= 0:
            raise ConfigError("window size, embed dim and mlp ratio must be positive")
        if not 0.0 <= self.drop_path < 1.0:
            raise ConfigError(f"drop-path rate must lie in [0, 1), got {self.drop_path}")
        if self.grid_size % (1 << (N_STAGES - 1)):
            raise ConfigError(f"token grid {self.grid_size} cannot be halved {N_STAGES - 1} times")
        for stage in range(1, N_STAGES + 1):
            g, m = self.stage_grid(stage), self.stage_window(stage)
            if g % m:
                raise ConfigError(f"stage {stage} grid {g} is not divisible by window {m}")
            c, nh = self.stage_channels(stage), self.heads[stage - 1]
            if nh < 1 or c % nh:
                raise ConfigError(f"stage {stage}: {nh} heads do not divide {c} channels")
        return self


# ------------------------------------------------------------------ geometry


def window_partition(x: Tensor, window: int) -> Tensor:
    """(b, h, w, c) -> (b * nW, M*M, c), windows and slots both row-major."""
    b, h, w, c = x.shape
    if h % window or w % window:
        raise DimensionError(f"feature map {h}x{w} not divisible by window {window}")
    y = ops.reshape(x, (b, h // window, window, w // window, window, c))
    y = ops.transpose(y, (0, 1, 3, 2, 4, 5))
    return ops.reshape(y, (-1, window * window, c))


def window_reverse(windows: Tensor, window: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    if h % window or w % window:
        raise DimensionError(f"feature map {h}x{w} not divisible by window {window}")
    c = windows.shape[-1]
    nw = (h // window) * (w // window)
    if windows.shape[0] % nw:
        raise DimensionError(f"{windows.shape[0]} windows is not a multiple of {nw} per image")
    b = windows.shape[0] // nw
    y = ops.reshape(windows, (b, h // window, w // window, window, window, c))
    y = ops.transpose(y, (0, 1, 3, 2, 4, 5))
    return ops.reshape(y, (b, h, w, c))


def cyclic_shift(x: Tensor, shift: int) -> Tensor:
    """Roll the grid by (-shift, -shift); undo with :func:`reverse_shift`."""
    if shift == 0:
        return x
    return ops.roll(x, (-shift, -shift), (1, 2))


def reverse_shift(x: Tensor, shift: int) -> Tensor:
    if shift == 0:
        return x
    return ops.roll(x, (shift, shift), (1, 2))


def shift_region_ids(h: int, w: int, window: int, shift: int) -> np.ndarray:
    """Region label of each position of the shifted grid (3x3 slicing)."""
    ids = np.zeros((h, w), dtype=np.int64)
    if shift == 0:
        return ids
    rows = (slice(0, h - window), slice(h - window, h - shift), slice(h - shift, h))
    cols = (slice(0, w - window), slice(w - window, w - shift), slice(w - shift, w))
    label = 0
    for rs in rows:
        for cs in cols:
            ids[rs, cs] = label
            label += 1
    return ids


@lru_cache(maxsize=64)
def _shift_mask(h: int, w: int, window: int, shift: int) -> np.ndarray:
    nw = (h // window) * (w // window)
    n = window * window
    if shift == 0:
        return np.zeros((nw, n, n))
    ids = shift_region_ids(h, w, window, shift)
    win = ids.reshape(h // window, window, w // window, window).transpose(0, 2, 1, 3).reshape(nw, n)
    same = win[:, :, None] == win[:, None, :]
    mask = np.where(same, 0.0, ops.MASK_VALUE)
    mask.setflags(write=False)
    return mask


def build_shift_mask(h: int, w: int, window: int, shift: int) -> np.ndarray:
    """Additive attention mask (nW, M*M, M*M) with entries in {0, -1e4}."""
    if h % window or w % window:
        raise DimensionError(f"feature map {h}x{w} not divisible by window {window}")
    if not 0 <= shift < window:
        raise ConfigError(f"shift {shift} must satisfy 0 <= shift < window {window}")
    return _shift_mask(h, w, window, shift)


@lru_cache(maxsize=64)
def relative_position_index(window: int) -> np.ndarray:
    """(M*M, M*M) index into a (2M-1)^2 table, a function of the coordinate delta only."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
    index = rel[0] * (2 * window - 1) + rel[1]
    index.setflags(write=False)
    return index


@lru_cache(maxsize=64)
def relative_coords_table(window: int) -> np.ndarray:
    """Log-spaced signed offsets ((2M-1)^2, 2) fed to the continuous bias network."""
    r = np.arange(-(window - 1), window, dtype=np.float64)
    table = np.stack(np.meshgrid(r, r, indexing="ij"), axis=-1).reshape(-1, 2)
    if window > 1:
        table = table / (window - 1)
    table = table * 8.0
    table = np.sign(table) * np.log2(np.abs(table) + 1.0) / np.log2(8.0)
    table.setflags(write=False)
    return table


# ------------------------------------------------------------------ attention


def position_bias(params: Mapping[str, Tensor], prefix: str, window: int, heads: int, variant: str) -> Tensor:
    """Relative position bias (heads, M*M, M*M)."""
    index = relative_position_index(window)
    n = window * window
    if variant == V1:
        table = params[prefix + "rel_bias_table"]
    else:
        coords = ops.as_tensor(relative_coords_table(window), like=params[prefix + "cpb.fc1.weight"])
        hidden = ops.relu(ops.linear(coords, params[prefix + "cpb.fc1.weight"], params[prefix + "cpb.fc1.bias"]))
        table = ops.linear(hidden, params[prefix + "cpb.fc2.weight"])
    bias = ops.take_rows(table, index.reshape(-1))
    bias = ops.transpose(ops.reshape(bias, (n, n, heads)), (2, 0, 1))
    if variant == V2:
        bias = ops.scale(ops.sigmoid(bias), 16.0)
    return bias


def attention_weights(
    windows: Tensor,
    params: Mapping[str, Tensor],
    prefix: str,
    heads: int,
    window: int,
    variant: str,
    mask: Optional[np.ndarray] = None,
):
    """Per-head attention probabilities and value vectors for a batch of windows.

    Returns ``(attn, v)`` with ``attn`` (B_, heads, N, N) and ``v`` (B_, heads, N, d).
    """
    bw, n, c = windows.shape
    if c % heads:
        raise ConfigError(f"{heads} heads do not divide {c} channels")
    d = c // heads
    qkv = ops.linear(windows, params[prefix + "qkv.weight"], params[prefix + "qkv.bias"])
    qkv = ops.transpose(ops.reshape(qkv, (bw, n, 3, heads, d)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    if variant == V1:
        scores = ops.matmul(ops.scale(q, d ** -0.5), ops.transpose(k, (0, 1, 3, 2)))
    else:
        qn, kn = ops.normalize_lastdim(q), ops.normalize_lastdim(k)
        scores = ops.matmul(qn, ops.transpose(kn, (0, 1, 3, 2)))
        logit_scale = ops.exp(ops.clamp_max(params[prefix + "logit_scale"], LOGIT_SCALE_MAX))
        scores = ops.mul(scores, logit_scale)
    scores = ops.add(scores, position_bias(params, prefix, window, heads, variant))
    if mask is not None:
        nw = mask.shape[0]
        if bw % nw:
            raise DimensionError(f"{bw} windows is not a multiple of mask windows {nw}")
        scores = ops.reshape(scores, (bw // nw, nw, heads, n, n))
        scores = ops.add(scores, ops.as_tensor(mask[None, :, None], like=scores))
        scores = ops.reshape(scores, (bw, heads, n, n))
    return ops.softmax_lastdim(scores), v


def window_attention(
    windows: Tensor,
    mask: Optional[np.ndarray],
    params: Mapping[str, Tensor],
    prefix: str,
    heads: int,
    window: int,
    variant: str = V2,
) -> Tensor:
    """Multi-head self-attention inside each window: (B_, N, C) -> (B_, N, C)."""
    bw, n, c = windows.shape
    if n != window * window:
        raise DimensionError(f"{n} tokens per window, expected {window * window}")
    attn, v = attention_weights(windows, params, prefix, heads, window, variant, mask)
    out = ops.reshape(ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3)), (bw, n, c))
    return ops.linear(out, params[prefix + "proj.weight"], params[prefix + "proj.bias"])


def shifted_window_attention(
    x: Tensor,
    params: Mapping[str, Tensor],
    prefix: str,
    heads: int,
    window: int,
    shift: int,
    variant: str = V2,
) -> Tensor:
    """(S)W-MSA on a (b, h, w, c) map: roll, partition, masked attention, reverse, unroll."""
    b, h, w, c = x.shape
    y = cyclic_shift(x, shift)
    mask = build_shift_mask(h, w, window, shift) if shift else None
    y = window_attention(window_partition(y, window), mask, params, prefix, heads, window, variant)
    return reverse_shift(window_reverse(y, window, h, w), shift)


# --------------------------------------------------------------------- blocks


def _norm(x: Tensor, params, prefix: str) -> Tensor:
    return ops.layer_norm(x, params[prefix + "weight"], params[prefix + "bias"])


def drop_path(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Stochastic depth: zero whole samples of a residual branch with probability ``rate``."""
    if rate <= 0.0 or rng is None:
        return x
    keep = 1.0 - rate
    mask = (rng.random((x.shape[0],) + (1,) * (x.ndim - 1)) < keep) / keep
    return ops.constant_mul(x, mask)


def mlp(x: Tensor, params, prefix: str) -> Tensor:
    h = ops.gelu(ops.linear(x, params[prefix + "fc1.weight"], params[prefix + "fc1.bias"]))
    return ops.linear(h, params[prefix + "fc2.weight"], params[prefix + "fc2.bias"])


def swin_block(
    x: Tensor,
    params: Mapping[str, Tensor],
    prefix: str,
    heads: int,
    window: int,
    shift: int,
    variant: str = V2,
    drop_rate: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """(S)W-MSA sub-layer then MLP sub-layer, each with a residual connection.

    v1 normalizes before each sub-layer, v2 after it. ``rng`` enables
    drop-path; pass ``None`` for deterministic evaluation.
    """
    y = x if variant == V2 else _norm(x, params, prefix + "norm1.")
    y = shifted_window_attention(y, params, prefix + "attn.", heads, window, shift, variant)
    if variant == V2:
        y = _norm(y, params, prefix + "norm1.")
    x = ops.add(x, drop_path(y, drop_rate, rng))
    if variant == V2:
        y = _norm(mlp(x, params, prefix + "mlp."), params, prefix + "norm2.")
    else:
        y = mlp(_norm(x, params, prefix + "norm2."), params, prefix + "mlp.")
    return ops.add(x, drop_path(y, drop_rate, rng))


def patch_merging(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    """(b, h, w, c) -> (b, h/2, w/2, 2c).

    Each 2x2 neighborhood is concatenated in the order (0,0), (1,0), (0,1),
    (1,1) as (row, col) offsets, then layer-normed and projected.
    """
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"patch merging needs even dims, got {h}x{w}")
    y = ops.reshape(x, (b, h // 2, 2, w // 2, 2, c))
    y = ops.reshape(ops.transpose(y, (0, 1, 3, 4, 2, 5)), (b, h // 2, w // 2, 4 * c))
    y = _norm(y, params, prefix + "norm.")
    return ops.linear(y, params[prefix + "reduction.weight"])


def patch_embed(image: Tensor, params: Mapping[str, Tensor], config: EncoderConfig) -> Tensor:
    """(b, 3, S, S) image -> (b, S/p, S/p, C) tokens."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise DimensionError(f"expected (b, 3, S, S) image, got {image.shape}")
    b, _, hs, ws = image.shape
    p = config.patch_size
    if hs % p or ws % p:
        raise ConfigError(f"image {hs}x{ws} not divisible by patch size {p}")
    y = ops.reshape(image, (b, 3, hs // p, p, ws // p, p))
    y = ops.reshape(ops.transpose(y, (0, 2, 4, 1, 3, 5)), (b, hs // p, ws // p, 3 * p * p))
    y = ops.linear(y, params["enc.patch_embed.proj.weight"], params["enc.patch_embed.proj.bias"])
    return _norm(y, params, "enc.patch_embed.norm.")


def drop_path_rates(config: EncoderConfig) -> list:
    total = sum(config.depths)
    if total == 1:
        return [config.drop_path]
    return [config.drop_path * i / (total - 1) for i in range(total)]


def encode(
    image: Tensor,
    params: Mapping[str, Tensor],
    config: EncoderConfig,
    rng: Optional[np.random.Generator] = None,
    return_stages: bool = False,
):
    """Patch embedding, four stages of blocks (merging between stages), final norm.

    With ``return_stages`` the per-stage outputs (after merging) are returned too.
    """
    if image.shape[-1] != config.image_size or image.shape[-2] != config.image_size:
        raise ConfigError(f"image {image.shape[-2:]} does not match configured size {config.image_size}")
    x = patch_embed(image, params, config)
    rates = drop_path_rates(config)
    stages = []
    k = 0
    for stage in range(1, N_STAGES + 1):
        window = config.stage_window(stage)
        heads = config.heads[stage - 1]
        for j in range(config.depths[stage - 1]):
            x = swin_block(x, params, f"enc.stage{stage}.block{j}.", heads, window,
                           config.block_shift(stage, j), config.attention, rates[k], rng)
            k += 1
        if stage < N_STAGES:
            x = patch_merging(x, params, f"enc.stage{stage}.merge.")
        stages.append(x)
    x = _norm(x, params, "enc.norm.")
    return (x, stages) if return_stages else x
