"""Per-modality encoders: a length-preserving 1D-CNN followed by a time-reducing MLP.

The MLP is a single dense map over the time axis, ``[T, C] -> [N, C]``, shared
by every feature channel: ``out[n, c] = s * sum_t W[t, n] * h[t, c] + b[n]``
with the fixed scale ``s = N / T``. ``W`` starts as the indicator of ``N``
contiguous time segments plus small noise, so the initial map averages each
segment; the scale keeps Adam's per-weight step small relative to those
averaging weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class BackboneConfig:
    conv_layers: tuple  # ((out_channels, kernel_len), ...)
    feature_dim: int
    token_count: int
    input_time_max: int
    input_channels: int

    def __post_init__(self):
        layers = tuple((int(c), int(k)) for c, k in self.conv_layers)
        object.__setattr__(self, "conv_layers", layers)
        if not layers:
            raise ConfigError("backbone needs at least one conv layer")
        if layers[-1][0] != self.feature_dim:
            raise ConfigError(f"final conv width {layers[-1][0]} must equal feature_dim {self.feature_dim}")
        for c, k in layers:
            if k % 2 == 0 or k < 1 or c < 1:
                raise ConfigError(f"conv layer ({c}, {k}) needs positive width and odd kernel length")
        # input_time_max == 0 means "take it from the corpus scan"
        if self.token_count < 1 or (self.input_time_max and self.token_count >= self.input_time_max):
            raise ConfigError(f"token_count {self.token_count} must be in (0, input_time_max={self.input_time_max})")


def video_config(feature_dim=512, token_count=100, input_time_max=2_800, conv_layers=((128, 5), (512, 5))) -> BackboneConfig:
    return BackboneConfig(conv_layers, feature_dim, token_count, input_time_max, 42)


def physio_config(feature_dim=512, token_count=100, input_time_max=19_900, conv_layers=((64, 7), (256, 7), (512, 7))) -> BackboneConfig:
    return BackboneConfig(conv_layers, feature_dim, token_count, input_time_max, 2)


def init_backbone(cfg: BackboneConfig, prefix: str, rng: np.random.Generator) -> dict[str, Tensor]:
    if cfg.input_time_max < 1:
        raise ConfigError(f"{prefix} backbone needs a concrete input_time_max before initialization")
    params = {}
    c_in = cfg.input_channels
    for i, (c_out, k) in enumerate(cfg.conv_layers):
        # He-uniform for ReLU
        bound = np.sqrt(6.0 / (c_in * k))
        params[f"{prefix}.conv{i}.w"] = rng.uniform(-bound, bound, (c_out, c_in, k))
        params[f"{prefix}.conv{i}.b"] = np.zeros(c_out)
        c_in = c_out
    t, n = cfg.input_time_max, cfg.token_count
    segment = np.minimum(np.arange(t) * n // t, n - 1)
    w = np.zeros((t, n))
    w[np.arange(t), segment] = 1.0
    params[f"{prefix}.time.w"] = w + 0.1 * rng.standard_normal((t, n))
    params[f"{prefix}.time.b"] = np.zeros(n)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}


def conv_features(x: Tensor, params: dict[str, Tensor], prefix: str, cfg: BackboneConfig) -> Tensor:
    """Conv stack with ReLU after each layer; time length is checked after every layer."""
    if x.shape[-1] != cfg.input_channels:
        raise DimensionError(f"{prefix} backbone expects {cfg.input_channels} input channels, got shape {x.shape}")
    T = x.shape[-2]
    h = x
    for i in range(len(cfg.conv_layers)):
        h = ad.relu(ad.conv1d(h, params[f"{prefix}.conv{i}.w"], params[f"{prefix}.conv{i}.b"]))
        if h.shape[-2] != T:
            raise DimensionError(f"{prefix}.conv{i} changed time length {T} -> {h.shape[-2]}")
    return h


def reduce_time(h: Tensor, params: dict[str, Tensor], prefix: str, cfg: BackboneConfig) -> Tensor:
    if h.shape[-2] != cfg.input_time_max:
        raise DimensionError(f"{prefix} backbone expects time length {cfg.input_time_max} (padded), got {h.shape[-2]}")
    scale = cfg.token_count / cfg.input_time_max
    z = ad.dense(ad.scale(ad.swap_last(h), scale), params[f"{prefix}.time.w"], params[f"{prefix}.time.b"])
    return ad.swap_last(z)


def backbone(x: Tensor, params: dict[str, Tensor], prefix: str, cfg: BackboneConfig) -> Tensor:
    """``[..., input_time_max, input_channels] -> [..., token_count, feature_dim]``."""
    return reduce_time(conv_features(x, params, prefix, cfg), params, prefix, cfg)


def video_backbone(sv: Tensor, params: dict[str, Tensor], cfg: BackboneConfig) -> Tensor:
    return backbone(sv, params, "video", cfg)


def physio_backbone(sp: Tensor, params: dict[str, Tensor], cfg: BackboneConfig) -> Tensor:
    return backbone(sp, params, "physio", cfg)
