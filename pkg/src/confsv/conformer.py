"""Conformer encoder: convolutional subsampling plus a stack of blocks.

Each block applies, in order: a half-step feed-forward, self-attention with
relative sinusoidal positions, a convolution module, a second half-step
feed-forward, and a closing layer norm.  Every block's frame-level output is
exposed so downstream aggregation and adaptation can tap any layer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, InputTooShortError
from .nn import (
    BatchNorm,
    Conv1d,
    Conv2d,
    Dropout,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    Parameter,
    seed_parameters,
)

MEL_FRAME_SHIFT_SEC = 0.01


@dataclass
class EncoderConfig:
    layers: int
    dim: int
    heads: int
    hidden: int
    subsample_rate: float = 0.25
    conv_kernel: int = 31
    dropout: float = 0.1
    n_mels: int = 80

    def __post_init__(self):
        if self.layers < 1 or self.dim < 1 or self.heads < 1 or self.hidden < 1:
            raise ConfigError("layers/dim/heads/hidden must be positive")
        if self.dim % self.heads != 0:
            raise ConfigError(f"heads ({self.heads}) must divide dim ({self.dim})")
        if self.conv_kernel % 2 == 0 or self.conv_kernel < 1:
            raise ConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.subsample_rate not in (0.25, 0.5):
            raise ConfigError(f"subsample_rate must be 1/4 or 1/2, got {self.subsample_rate}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def subsample_stages(self) -> int:
        return 2 if self.subsample_rate == 0.25 else 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


# Encoder sizes used throughout: full-rate stacks and their half-depth,
# half-rate counterparts.
ENCODER_PRESETS: dict[str, EncoderConfig] = {
    "small": EncoderConfig(16, 176, 4, 704, 0.25),
    "medium": EncoderConfig(18, 256, 4, 1024, 0.25),
    "large": EncoderConfig(18, 512, 8, 2048, 0.25),
    "half_small": EncoderConfig(8, 176, 4, 704, 0.5),
    "half_medium": EncoderConfig(9, 256, 4, 1024, 0.5),
    "half_large": EncoderConfig(9, 512, 8, 2048, 0.5),
}


@dataclass
class FeatureMap:
    """A d x T frame-level output with the frame duration after subsampling."""

    values: np.ndarray
    frame_shift_sec: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] < 1:
            raise DimensionError(f"feature map must be d x T with T >= 1, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DimensionError("feature map contains non-finite values")

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]


def subsampled_length(n_frames: int, rate: float) -> int:
    """Output frame count of the subsampling stack (kernel 3, stride 2, pad 1)."""
    stages = 2 if rate == 0.25 else 1
    n = n_frames
    for _ in range(stages):
        n = ad.conv_out_len(n, 3, 2, 1)
    return n


def sinusoid_positions(n_frames: int, dim: int) -> np.ndarray:
    """Sinusoidal embeddings for relative distances T-1 ... -(T-1), shape (2T-1, d)."""
    rel = np.arange(n_frames - 1, -n_frames, -1, dtype=np.float64)
    inv_freq = 1.0 / (10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim))
    ang = rel[:, None] * inv_freq[None, :]
    pe = np.zeros((rel.size, dim))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang[:, : dim // 2])
    return pe


class ConvSubsampling(Module):
    """Stride-2 conv stages (two for 1/4 rate, one for 1/2) plus a projection to d."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        stages = cfg.subsample_stages
        self.convs = ModuleList(
            [Conv2d(1 if i == 0 else cfg.dim, cfg.dim, 3, stride=2, padding=1) for i in range(stages)]
        )
        freq = cfg.n_mels
        for _ in range(stages):
            freq = ad.conv_out_len(freq, 3, 2, 1)
        self.out_freq = freq
        self.proj = Linear(cfg.dim * freq, cfg.dim)

    def min_frames(self) -> int:
        return 8 if self.cfg.subsample_stages == 2 else 4

    def forward(self, mel: Tensor) -> Tensor:
        """(B, T, n_mels) -> (B, T', d)."""
        if mel.shape[-1] != self.cfg.n_mels:
            raise DimensionError(f"expected {self.cfg.n_mels} mel bins, got {mel.shape[-1]}")
        if mel.shape[1] < self.min_frames():
            raise InputTooShortError(
                f"need >= {self.min_frames()} frames for rate {self.cfg.subsample_rate}, "
                f"got {mel.shape[1]}"
            )
        x = ad.reshape(mel, (mel.shape[0], 1, mel.shape[1], mel.shape[2]))
        for conv in self.convs:
            x = ad.relu(conv(x))
        # (B, d, T', F') -> (B, T', d*F')
        x = ad.transpose(x, (0, 2, 1, 3))
        x = ad.reshape(x, (x.shape[0], x.shape[1], x.shape[2] * x.shape[3]))
        return self.proj(x)


class FeedForwardModule(Module):
    """Two linear maps around a Swish, dropout after each linear map."""

    def __init__(self, dim: int, hidden: int, dropout: float):
        super().__init__()
        self.norm = LayerNorm(dim)
        self.linear1 = Linear(dim, hidden)
        self.linear2 = Linear(hidden, dim)
        self.drop1 = Dropout(dropout)
        self.drop2 = Dropout(dropout)

    def forward(self, x: Tensor, rng=None) -> Tensor:
        h = self.norm(x)
        h = self.drop1(ad.swish(self.linear1(h)), rng)
        return self.drop2(self.linear2(h), rng)


class AttentionModule(Module):
    """Multi-head self-attention with relative sinusoidal positions.

    Scores combine a content term (q + u) . k and a position term (q + v) . r,
    where r projects the sinusoid table and u, v are learned biases shared
    across positions.
    """

    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"heads ({heads}) must divide dim ({dim})")
        self.dim, self.heads, self.d_head = dim, heads, dim // heads
        self.norm = LayerNorm(dim)
        self.q_proj = Linear(dim, dim)
        self.k_proj = Linear(dim, dim)
        self.v_proj = Linear(dim, dim)
        self.out_proj = Linear(dim, dim)
        self.pos_proj = Linear(dim, dim, bias=False)
        self.pos_bias_u = Parameter((heads, self.d_head), init="zeros")
        self.pos_bias_v = Parameter((heads, self.d_head), init="zeros")
        self.drop_attn = Dropout(dropout)
        self.drop_out = Dropout(dropout)

    def _split(self, x: Tensor, B: int, T: int) -> Tensor:
        x = ad.reshape(x, (B, T, self.heads, self.d_head))
        return ad.transpose(x, (0, 2, 1, 3))

    def attention_weights(self, x: Tensor) -> np.ndarray:
        """Attention rows (post-softmax) for inspection; no dropout."""
        _, attn = self._attend(self.norm(x), rng=None, want_weights=True)
        return attn

    def _attend(self, h: Tensor, rng, want_weights: bool = False):
        B, T, _ = h.shape
        q = self._split(self.q_proj(h), B, T)
        k = self._split(self.k_proj(h), B, T)
        v = self._split(self.v_proj(h), B, T)
        pos = ad.tensor(sinusoid_positions(T, self.dim))
        r = self.pos_proj(pos)  # (2T-1, d)
        r = ad.transpose(ad.reshape(r, (2 * T - 1, self.heads, self.d_head)), (1, 0, 2))
        u = ad.reshape(self.pos_bias_u, (1, self.heads, 1, self.d_head))
        vb = ad.reshape(self.pos_bias_v, (1, self.heads, 1, self.d_head))
        content = ad.matmul(q + u, ad.swapaxes(k, -1, -2))
        pos_full = ad.matmul(q + vb, ad.swapaxes(r, -1, -2))  # (B, H, T, 2T-1)
        rows = np.repeat(np.arange(T)[:, None], T, axis=1)
        cols = rows - rows.T + T - 1  # i - j + T - 1
        position = ad.take_pairs(pos_full, rows, cols)
        scores = (content + position) * ad.tensor(1.0 / np.sqrt(self.d_head))
        attn = ad.softmax(scores, axis=-1)
        weights = attn.data.copy() if want_weights else None
        attn = self.drop_attn(attn, rng)
        ctx = ad.matmul(attn, v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, T, self.dim))
        return ctx, weights

    def forward(self, x: Tensor, rng=None) -> Tensor:
        ctx, _ = self._attend(self.norm(x), rng)
        return self.drop_out(self.out_proj(ctx), rng)


class ConvolutionModule(Module):
    """Pointwise conv -> GLU -> depthwise conv -> batch norm -> Swish -> pointwise."""

    def __init__(self, dim: int, kernel: int, dropout: float, bn_momentum: float = 0.1):
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigError("conv kernel must be odd for same padding")
        self.norm = LayerNorm(dim)
        self.pointwise1 = Conv1d(dim, 2 * dim, 1)
        self.depthwise = Conv1d(dim, dim, kernel, padding=(kernel - 1) // 2, groups=dim)
        self.batch_norm = BatchNorm(dim, momentum=bn_momentum)
        self.pointwise2 = Conv1d(dim, dim, 1)
        self.drop = Dropout(dropout)
        self.kernel = kernel

    def forward(self, x: Tensor, rng=None) -> Tensor:
        if x.shape[1] < 1:
            raise DimensionError("convolution module needs T >= 1")
        h = self.norm(x)
        h = ad.swapaxes(h, 1, 2)  # (B, d, T)
        h = ad.glu(self.pointwise1(h), axis=1)
        h = self.depthwise(h)
        h = ad.swapaxes(h, 1, 2)
        h = ad.swish(self.batch_norm(h))
        h = ad.swapaxes(h, 1, 2)
        h = self.pointwise2(h)
        return self.drop(ad.swapaxes(h, 1, 2), rng)


class ConformerBlock(Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.ffn1 = FeedForwardModule(cfg.dim, cfg.hidden, cfg.dropout)
        self.attn = AttentionModule(cfg.dim, cfg.heads, cfg.dropout)
        self.conv = ConvolutionModule(cfg.dim, cfg.conv_kernel, cfg.dropout)
        self.ffn2 = FeedForwardModule(cfg.dim, cfg.hidden, cfg.dropout)
        self.norm_out = LayerNorm(cfg.dim)

    def forward(self, x: Tensor, rng=None) -> Tensor:
        half = ad.tensor(0.5)
        h = x + half * self.ffn1(x, rng)
        h = h + self.attn(h, rng)
        h = h + self.conv(h, rng)
        h = h + half * self.ffn2(h, rng)
        return self.norm_out(h)


class ConformerEncoder(Module):
    """Subsampling front-end plus `cfg.layers` Conformer blocks."""

    def __init__(self, cfg: EncoderConfig, seed: Optional[int] = None):
        super().__init__()
        self.cfg = cfg
        self.subsampling = ConvSubsampling(cfg)
        self.blocks = ModuleList([ConformerBlock(cfg) for _ in range(cfg.layers)])
        if seed is not None:
            seed_parameters(self, seed, scope="encoder")

    @property
    def frame_shift_sec(self) -> float:
        return MEL_FRAME_SHIFT_SEC / self.cfg.subsample_rate

    def forward(self, mel: Tensor, rng=None) -> list[Tensor]:
        """(B, T, n_mels) -> [h_1 ... h_L], each (B, T', d)."""
        h = self.subsampling(mel)
        outputs = []
        for block in self.blocks:
            h = block(h, rng)
            outputs.append(h)
        return outputs

    def encode(self, features: np.ndarray) -> list[FeatureMap]:
        """80 x T features for one utterance -> per-block d x T' feature maps."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != self.cfg.n_mels:
            raise DimensionError(f"expected ({self.cfg.n_mels}, T) features, got {features.shape}")
        mel = ad.tensor(features.T[None, :, :])
        maps = self.forward(mel, rng=None)
        return [FeatureMap(m.data[0].T, self.frame_shift_sec) for m in maps]


def conv_subsample(features: np.ndarray, cfg: EncoderConfig, seed: int = 0) -> FeatureMap:
    """Run a seeded subsampling front-end over 80 x T features."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != cfg.n_mels:
        raise DimensionError(f"expected ({cfg.n_mels}, T) features, got {features.shape}")
    sub = ConvSubsampling(cfg)
    seed_parameters(sub, seed, scope="subsampling")
    out = sub(ad.tensor(features.T[None, :, :]))
    return FeatureMap(out.data[0].T, MEL_FRAME_SHIFT_SEC / cfg.subsample_rate)


def encoder_forward(encoder: ConformerEncoder, features: np.ndarray) -> list[FeatureMap]:
    """Deterministic (dropout-off) forward pass returning all block outputs."""
    return encoder.encode(features)
