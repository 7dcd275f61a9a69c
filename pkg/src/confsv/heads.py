"""Everything between the encoder taps and the speaker embedding.

Aggregation concatenates every block's frame-level output channel-wise and
layer-normalizes across the stacked channel axis.  That wide map feeds
attentive statistics pooling (attention-weighted mean and standard deviation
per channel, with a global-context scorer), then batch norm and a linear map
down to the fixed 256-dim speaker embedding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .conformer import ConformerEncoder, EncoderConfig, FeatureMap
from .errors import DimensionError
from .nn import BatchNorm, LayerNorm, Linear, Module, seed_parameters

EMBEDDING_DIM = 256
ASP_BOTTLENECK = 128
VAR_FLOOR = 1e-10


@dataclass
class MfaFeature:
    """Layer-concatenated, channel-normalized frame features (D x T, D = sum of dims)."""

    values: np.ndarray
    source_layer_dims: list[int]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape[0] != sum(self.source_layer_dims):
            raise DimensionError("MFA channel count must equal the sum of source layer dims")

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]


def mfa_concat(maps: Sequence[FeatureMap]) -> MfaFeature:
    """Concatenate block outputs along channels, then normalize per frame."""
    if not maps:
        raise DimensionError("need at least one feature map")
    frames = maps[0].frames
    if any(m.frames != frames for m in maps):
        raise DimensionError("all feature maps must share the frame count")
    stacked = np.concatenate([m.values for m in maps], axis=0)  # (D, T)
    mu = stacked.mean(axis=0, keepdims=True)
    var = stacked.var(axis=0, keepdims=True)
    normalized = (stacked - mu) / np.sqrt(var + 1e-5)
    return MfaFeature(normalized, [m.dim for m in maps])


class AttentiveStatsPooling(Module):
    """Attention-weighted mean and std over frames.

    The scorer sees each frame together with the utterance's global mean and
    std (channel-wise), passes a tanh bottleneck, and emits one score per
    channel per frame; softmax over frames gives per-channel weights.
    """

    def __init__(self, dim: int, bottleneck: int = ASP_BOTTLENECK, global_context: bool = True):
        super().__init__()
        self.dim = dim
        self.global_context = global_context
        in_dim = 3 * dim if global_context else dim
        self.score1 = Linear(in_dim, bottleneck)
        self.score2 = Linear(bottleneck, dim)

    def forward(self, x: Tensor) -> Tensor:
        """(B, T, D) -> (B, 2D): weighted mean then weighted std."""
        if x.ndim != 3 or x.shape[1] < 1:
            raise DimensionError(f"pooling expects (B, T, D) with T >= 1, got {x.shape}")
        if self.global_context:
            mu = ad.mean(x, axis=1, keepdims=True)
            var = ad.mean(x * x, axis=1, keepdims=True) - mu * mu
            sd = ad.sqrt(ad.clip(var, 0.0, np.inf) + ad.tensor(VAR_FLOOR))
            tile = ad.tensor(np.zeros((1, x.shape[1], 1)))
            ctx = ad.concat([x, mu + tile, sd + tile], axis=-1)
        else:
            ctx = x
        scores = self.score2(ad.tanh(self.score1(ctx)))  # (B, T, D)
        alpha = ad.softmax(scores, axis=1)
        mean = ad.sum_(alpha * x, axis=1)
        sq = ad.sum_(alpha * x * x, axis=1)
        std = ad.sqrt(ad.clip(sq - mean * mean, 0.0, np.inf) + ad.tensor(VAR_FLOOR))
        return ad.concat([mean, std], axis=-1)

    def attention(self, x: Tensor) -> np.ndarray:
        """Per-channel frame weights, for inspection."""
        if self.global_context:
            mu = ad.mean(x, axis=1, keepdims=True)
            var = ad.mean(x * x, axis=1, keepdims=True) - mu * mu
            sd = ad.sqrt(ad.clip(var, 0.0, np.inf) + ad.tensor(VAR_FLOOR))
            tile = ad.tensor(np.zeros((1, x.shape[1], 1)))
            ctx = ad.concat([x, mu + tile, sd + tile], axis=-1)
        else:
            ctx = x
        return ad.softmax(self.score2(ad.tanh(self.score1(ctx))), axis=1).data


class EmbeddingHead(Module):
    """Batch norm over the pooled vector, then a linear map to 256."""

    def __init__(self, pooled_dim: int, emb_dim: int = EMBEDDING_DIM):
        super().__init__()
        self.norm = BatchNorm(pooled_dim)
        self.proj = Linear(pooled_dim, emb_dim)

    def forward(self, pooled: Tensor) -> Tensor:
        return self.proj(self.norm(pooled))


class MfaAggregator(Module):
    """Learned layer norm over the concatenated channel axis."""

    def __init__(self, total_dim: int):
        super().__init__()
        self.norm = LayerNorm(total_dim)

    def forward(self, maps: Sequence[Tensor]) -> Tensor:
        """[each (B, T, d_i)] -> (B, T, sum d_i), normalized across channels."""
        frames = maps[0].shape[1]
        if any(m.shape[1] != frames for m in maps):
            raise DimensionError("aggregated maps must share the frame count")
        return self.norm(ad.concat(list(maps), axis=-1))


class SpeakerModel(Module):
    """Encoder + aggregation + pooling + embedding head."""

    def __init__(self, cfg: EncoderConfig, seed: Optional[int] = None):
        super().__init__()
        self.cfg = cfg
        self.encoder = ConformerEncoder(cfg)
        total = cfg.layers * cfg.dim
        self.mfa = MfaAggregator(total)
        self.pooling = AttentiveStatsPooling(total)
        self.head = EmbeddingHead(2 * total)
        if seed is not None:
            seed_parameters(self, seed, scope="speaker_model")

    def forward(self, mel: Tensor, rng=None, return_maps: bool = False):
        maps = self.encoder(mel, rng)
        pooled = self.pooling(self.mfa(maps))
        emb = self.head(pooled)
        return (emb, maps) if return_maps else emb

    def embed_utterance(self, features: np.ndarray) -> np.ndarray:
        """80 x T features -> 256-dim embedding (inference mode)."""
        was_training = self.training
        self.eval_mode()
        out = self.forward(ad.tensor(np.asarray(features, dtype=np.float64).T[None]))
        if was_training:
            self.train_mode()
        return out.data[0]


def attentive_stats_pool(feature: MfaFeature, pooling: Optional[AttentiveStatsPooling] = None,
                         seed: int = 0) -> np.ndarray:
    """Pool a D x T map to a 2D-length vector with a (seeded) scorer."""
    if feature.frames < 1:
        raise DimensionError("cannot pool zero frames")
    if pooling is None:
        pooling = AttentiveStatsPooling(feature.dim)
        seed_parameters(pooling, seed, scope="asp")
    out = pooling(ad.tensor(feature.values.T[None]))
    return out.data[0]


def embed(pooled: np.ndarray, head: Optional[EmbeddingHead] = None, seed: int = 0) -> np.ndarray:
    """Project a pooled vector to the 256-dim embedding (inference mode)."""
    pooled = np.asarray(pooled, dtype=np.float64)
    if head is None:
        head = EmbeddingHead(pooled.shape[-1])
        seed_parameters(head, seed, scope="head")
    if pooled.shape[-1] != head.proj.weight.shape[0]:
        raise DimensionError(
            f"pooled dim {pooled.shape[-1]} != head input {head.proj.weight.shape[0]}"
        )
    head.eval_mode()
    return head(ad.tensor(pooled[None])).data[0]
