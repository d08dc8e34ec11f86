"""Cross-attention fusion transformer and the full video + physio model.

Physio tokens form the running query stream; video tokens supply keys and
values at every layer and are never updated. One layer is::

    x = x + CrossAttn(LN_q(x), LN_kv(video))
    x = x + FFN(LN_ffn(x))

The readout is a mean over tokens and one dense map to two
logits ordered (valence, arousal).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbones import BackboneConfig, init_backbone, physio_backbone, physio_config, video_backbone, video_config
from .errors import ConfigError, DimensionError, NumericError

MODES = ("fused", "video_only", "physio_only")


@dataclass(frozen=True)
class ModelConfig:
    n_heads: int = 8
    n_layers: int = 8
    model_dim: int = 512
    ffn_dim: int = 1024
    token_count: int = 100
    use_positional_encoding: bool = True
    dropout: float = 0.1

    def __post_init__(self):
        if self.n_heads < 1 or self.n_layers < 1 or self.model_dim < 1 or self.ffn_dim < 1:
            raise ConfigError("head count, layer count and widths must be positive")
        if self.model_dim % self.n_heads:
            raise ConfigError(f"model_dim {self.model_dim} is not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads


@dataclass(frozen=True)
class MVPConfig:
    fusion: ModelConfig = field(default_factory=ModelConfig)
    video: BackboneConfig = field(default_factory=video_config)
    physio: BackboneConfig = field(default_factory=physio_config)

    def __post_init__(self):
        for name, bb in (("video", self.video), ("physio", self.physio)):
            if bb.feature_dim != self.fusion.model_dim or bb.token_count != self.fusion.token_count:
                raise ConfigError(
                    f"{name} backbone emits [{bb.token_count}, {bb.feature_dim}] but fusion expects "
                    f"[{self.fusion.token_count}, {self.fusion.model_dim}]"
                )


def init_fusion(cfg: ModelConfig, rng: np.random.Generator, prefix: str = "fusion") -> dict[str, Tensor]:
    d, f = cfg.model_dim, cfg.ffn_dim
    p: dict[str, np.ndarray] = {}
    for i in range(cfg.n_layers):
        lp = f"{prefix}.layer{i}"
        for ln in ("ln_q", "ln_kv", "ln_ffn"):
            p[f"{lp}.{ln}.g"] = np.ones(d)
            p[f"{lp}.{ln}.b"] = np.zeros(d)
        for proj in ("q", "k", "v", "o"):
            p[f"{lp}.attn.w{proj}"] = ad.glorot(rng, d, d, (d, d))
            p[f"{lp}.attn.b{proj}"] = np.zeros(d)
        p[f"{lp}.ffn.w1"] = ad.glorot(rng, d, f, (d, f))
        p[f"{lp}.ffn.b1"] = np.zeros(f)
        p[f"{lp}.ffn.w2"] = ad.glorot(rng, f, d, (f, d))
        p[f"{lp}.ffn.b2"] = np.zeros(d)
    p[f"{prefix}.head.w"] = ad.glorot(rng, d, 2, (d, 2))
    p[f"{prefix}.head.b"] = np.zeros(2)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def init_mvp(cfg: MVPConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = {}
    params.update(init_backbone(cfg.video, "video", rng))
    params.update(init_backbone(cfg.physio, "physio", rng))
    params.update(init_fusion(cfg.fusion, rng))
    return params


def count_parameters(params: dict[str, Tensor]) -> int:
    return sum(p.size for p in params.values())


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, L, d = x.shape
    h = ad.reshape(x, (*lead, L, n_heads, d // n_heads))
    nd = h.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return ad.transpose(h, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, H, L, dk = x.shape
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return ad.reshape(ad.transpose(x, axes), (*lead, L, H * dk))


def cross_attention(
    q_tokens: Tensor,
    kv_tokens: Tensor,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    prefix: str,
    *,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    weights_out: Optional[list] = None,
) -> Tensor:
    """Multi-head ``softmax(Q K^T / sqrt(d_k)) V`` with Q from ``q_tokens`` and K, V from ``kv_tokens``.

    Heads are concatenated and passed through the output projection. If
    ``weights_out`` is a list, the attention weight array ``[..., H, Lq, Lkv]``
    is appended to it.
    """
    d = cfg.model_dim
    if q_tokens.shape[-1] != d or kv_tokens.shape[-1] != d:
        raise DimensionError(f"cross_attention: widths {q_tokens.shape} / {kv_tokens.shape}, expected last dim {d}")
    q = ad.dense(q_tokens, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
    k = ad.dense(kv_tokens, params[f"{prefix}.wk"], params[f"{prefix}.bk"])
    v = ad.dense(kv_tokens, params[f"{prefix}.wv"], params[f"{prefix}.bv"])
    qh, kh, vh = (_split_heads(t, cfg.n_heads) for t in (q, k, v))
    scores = ad.scale(ad.matmul(qh, ad.swap_last(kh)), 1.0 / math.sqrt(cfg.head_dim))
    attn = ad.softmax_lastdim(scores)
    if weights_out is not None:
        weights_out.append(attn.data)
    if training and cfg.dropout > 0.0:
        attn = ad.dropout(attn, cfg.dropout, rng)
    out = _merge_heads(ad.matmul(attn, vh))
    return ad.dense(out, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def _ln(x: Tensor, params, name: str) -> Tensor:
    return ad.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def fusion_forward(
    video_tokens: Tensor,
    physio_tokens: Tensor,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    *,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    prefix: str = "fusion",
) -> Tensor:
    """Fuse ``[..., L, D]`` token streams into ``[..., 2]`` logits (valence, arousal)."""
    if training and cfg.dropout > 0.0 and rng is None:
        raise ConfigError("training with dropout needs an rng")
    if cfg.use_positional_encoding:
        video_tokens = ad.add(video_tokens, Tensor(ad.sinusoidal_positions(video_tokens.shape[-2], cfg.model_dim)))
        physio_tokens = ad.add(physio_tokens, Tensor(ad.sinusoidal_positions(physio_tokens.shape[-2], cfg.model_dim)))
    x = physio_tokens
    for i in range(cfg.n_layers):
        lp = f"{prefix}.layer{i}"
        kv = _ln(video_tokens, params, f"{lp}.ln_kv")
        x = ad.add(x, cross_attention(_ln(x, params, f"{lp}.ln_q"), kv, params, cfg, f"{lp}.attn", training=training, rng=rng))
        h = ad.relu(ad.dense(_ln(x, params, f"{lp}.ln_ffn"), params[f"{lp}.ffn.w1"], params[f"{lp}.ffn.b1"]))
        if training and cfg.dropout > 0.0:
            h = ad.dropout(h, cfg.dropout, rng)
        x = ad.add(x, ad.dense(h, params[f"{lp}.ffn.w2"], params[f"{lp}.ffn.b2"]))
        if not np.all(np.isfinite(x.data)):
            raise NumericError(f"non-finite activations after fusion layer {i}")
    pooled = ad.mean(x, axis=-2)
    return ad.dense(pooled, params[f"{prefix}.head.w"], params[f"{prefix}.head.b"])


def mvp_forward(
    video,
    physio,
    params: dict[str, Tensor],
    cfg: MVPConfig,
    *,
    mode: str = "fused",
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Backbones then fusion, for padded ``[B, TV_max, 42]`` video and ``[B, TP_max, 2]`` physio.

    ``video_only`` feeds video tokens as both query and key/value streams and
    never touches ``physio`` (it may be ``None``); ``physio_only`` mirrors it.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    vt = pt = None
    if mode in ("fused", "video_only"):
        vt = video_backbone(video if isinstance(video, Tensor) else Tensor(video), params, cfg.video)
    if mode in ("fused", "physio_only"):
        pt = physio_backbone(physio if isinstance(physio, Tensor) else Tensor(physio), params, cfg.physio)
    if mode == "video_only":
        pt = vt
    elif mode == "physio_only":
        vt = pt
    return fusion_forward(vt, pt, params, cfg.fusion, training=training, rng=rng)


def paper_config() -> MVPConfig:
    return MVPConfig()


def desk_config(tv_max: int = 2_800, tp_max: int = 19_900) -> MVPConfig:
    """Reduced widths/depth that train in minutes on one CPU core."""
    d, n = 16, 8
    fusion = ModelConfig(n_heads=2, n_layers=2, model_dim=d, ffn_dim=32, token_count=n, dropout=0.1)
    return MVPConfig(
        fusion,
        video_config(d, n, tv_max, ((d, 5),)),
        physio_config(d, n, tp_max, ((d, 7),)),
    )


def tiny_config(tv_max: int = 12, tp_max: int = 20) -> MVPConfig:
    """Minimal network for gradient checks: 4 tokens, width 8, 1 layer, 1 head."""
    fusion = ModelConfig(n_heads=1, n_layers=1, model_dim=8, ffn_dim=8, token_count=4, dropout=0.0)
    return MVPConfig(
        fusion,
        video_config(8, 4, tv_max, ((8, 3),)),
        physio_config(8, 4, tp_max, ((3, 3), (8, 3))),
    )
