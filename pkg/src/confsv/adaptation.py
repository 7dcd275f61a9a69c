"""Transfer strategies around a pretrained encoder.

Three ways to reuse a frozen ASR-trained Conformer for speaker embedding:

* V1 taps the first L block outputs directly.
* V2 refines each tapped output with a per-layer adaptor (linear -> layer norm
  -> ReLU -> linear down to 128 channels).
* V3 additionally feeds K lightweight trainable Conformer layers from the
  concatenation of all L taps (V1/V2 feed them from the L-th tap alone).

All variants aggregate the branch outputs channel-wise, pool, and project to
the speaker embedding.  The backbone is never touched: taps are detached, so
no gradient can reach it, and its forward outputs are bit-identical with or
without the adaptation attached.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import Tensor
from .conformer import ConformerBlock, ConformerEncoder, EncoderConfig
from .errors import CheckpointError, ConfigError, DegenerateLabelsError, DimensionError
from .heads import AttentiveStatsPooling, EmbeddingHead, MfaAggregator
from .nn import LayerNorm, Linear, Module, ModuleList, seed_parameters
from .util import rng_for

ADAPTOR_DIM = 128
LIGHT_DIM = 176
LIGHT_HEADS = 4
LIGHT_HIDDEN = 704


@dataclass
class AdaptationConfig:
    variant: str  # "V1" | "V2" | "V3"
    adapted_layers: int  # L: backbone layers tapped
    extra_layers: int = 0  # K: trainable lightweight Conformer layers
    light_dim: int = LIGHT_DIM
    light_heads: int = LIGHT_HEADS
    light_hidden: int = LIGHT_HIDDEN
    light_kernel: int = 31
    dropout: float = 0.1

    def __post_init__(self):
        if self.variant not in ("V1", "V2", "V3"):
            raise ConfigError(f"variant must be V1/V2/V3, got {self.variant!r}")
        # L = 0 is allowed for degenerate accounting (pooling + head only);
        # building a module requires at least one tapped layer.
        if self.adapted_layers < 0:
            raise ConfigError("adapted_layers must be >= 0")
        if self.extra_layers < 0:
            raise ConfigError("extra_layers must be >= 0")
        if self.variant == "V3" and self.extra_layers < 1:
            raise ConfigError("V3 requires at least one lightweight layer")

    def light_encoder_config(self, rate: float) -> EncoderConfig:
        return EncoderConfig(
            layers=1,
            dim=self.light_dim,
            heads=self.light_heads,
            hidden=self.light_hidden,
            subsample_rate=rate,
            conv_kernel=self.light_kernel,
            dropout=self.dropout,
        )

    def mfa_dim(self, backbone_dim: int) -> int:
        per_layer = backbone_dim if self.variant == "V1" else ADAPTOR_DIM
        return per_layer * self.adapted_layers + self.light_dim * self.extra_layers


class LayerAdaptor(Module):
    """Per-layer map to 128 channels: linear -> layer norm -> ReLU -> linear."""

    def __init__(self, backbone_dim: int, out_dim: int = ADAPTOR_DIM):
        super().__init__()
        self.lin1 = Linear(backbone_dim, out_dim)
        self.norm = LayerNorm(out_dim)
        self.lin2 = Linear(out_dim, out_dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.lin2(ad.relu(self.norm(self.lin1(x))))


def apply_layer_adaptor(feature_map, adaptor: LayerAdaptor) -> np.ndarray:
    """Transform a d x T backbone map to 128 x T through one adaptor."""
    values = np.asarray(feature_map.values if hasattr(feature_map, "values") else feature_map,
                        dtype=np.float64)
    if values.shape[0] != adaptor.lin1.weight.shape[0]:
        raise DimensionError(
            f"map dim {values.shape[0]} != adaptor input {adaptor.lin1.weight.shape[0]}"
        )
    out = adaptor(ad.tensor(values.T[None]))
    return out.data[0].T


class SpeakerAdaptation(Module):
    """Trainable add-on reading frozen encoder taps; owns no backbone weights.

    The published size tables instantiate the lightweight-branch input linear
    whenever the backbone width differs from the lightweight width, even at
    K = 0; this module mirrors that so its parameter set matches the
    accounting module exactly.
    """

    def __init__(self, backbone: ConformerEncoder, cfg: AdaptationConfig,
                 seed: Optional[int] = None, _allow_degenerate_v3: bool = False):
        super().__init__()
        bcfg = backbone.cfg
        if not 1 <= cfg.adapted_layers <= bcfg.layers:
            raise ConfigError(
                f"adapted_layers {cfg.adapted_layers} must lie in [1, {bcfg.layers}]"
            )
        if cfg.variant == "V3" and cfg.extra_layers == 0 and not _allow_degenerate_v3:
            raise ConfigError("V3 requires at least one lightweight layer")
        self.cfg = cfg
        self._backbone = backbone  # underscore: excluded from parameter traversal
        self._backbone_dim = bcfg.dim

        if cfg.variant in ("V2", "V3"):
            self.adaptors = ModuleList(
                [LayerAdaptor(bcfg.dim) for _ in range(cfg.adapted_layers)]
            )
        if cfg.variant == "V3":
            if cfg.extra_layers > 0:
                self.light_in = Linear(bcfg.dim * cfg.adapted_layers, cfg.light_dim)
        elif bcfg.dim != cfg.light_dim:
            self.light_in = Linear(bcfg.dim, cfg.light_dim)
        if cfg.extra_layers > 0:
            light_cfg = cfg.light_encoder_config(bcfg.subsample_rate)
            self.light_blocks = ModuleList(
                [ConformerBlock(light_cfg) for _ in range(cfg.extra_layers)]
            )
        total = cfg.mfa_dim(bcfg.dim)
        self.mfa = MfaAggregator(total)
        self.pooling = AttentiveStatsPooling(total)
        self.head = EmbeddingHead(2 * total)
        if seed is not None:
            seed_parameters(self, seed, scope="adaptation")

    @property
    def backbone(self) -> ConformerEncoder:
        return self._backbone

    def backbone_taps(self, mel: Tensor) -> list[Tensor]:
        """Frozen, dropout-free backbone forward; outputs detached."""
        was_training = self._backbone.training
        self._backbone.eval_mode()
        maps = self._backbone(mel, rng=None)
        if was_training:
            self._backbone.train_mode()
        return [m.detach() for m in maps[: self.cfg.adapted_layers]]

    def forward(self, mel: Tensor, rng=None) -> Tensor:
        taps = self.backbone_taps(mel)
        if self.cfg.variant == "V1":
            branch = list(taps)
        else:
            branch = [adaptor(tap) for adaptor, tap in zip(self.adaptors, taps)]
        if self.cfg.extra_layers > 0:
            if self.cfg.variant == "V3":
                h = self.light_in(ad.concat(taps, axis=-1))
            else:
                h = taps[-1]
                if hasattr(self, "light_in"):
                    h = self.light_in(h)
            for block in self.light_blocks:
                h = block(h, rng)
                branch.append(h)
        pooled = self.pooling(self.mfa(branch))
        return self.head(pooled)

    def embed_utterance(self, features: np.ndarray) -> np.ndarray:
        was_training = self.training
        self.eval_mode()
        out = self.forward(ad.tensor(np.asarray(features, dtype=np.float64).T[None]))
        if was_training:
            self.train_mode()
        return out.data[0]


def build_adaptation(backbone: ConformerEncoder, cfg: AdaptationConfig,
                     seed: Optional[int] = 0) -> SpeakerAdaptation:
    return SpeakerAdaptation(backbone, cfg, seed=seed)


def adaptation_forward(features: np.ndarray, module: SpeakerAdaptation) -> np.ndarray:
    """80 x T features -> 256-dim embedding through the frozen backbone."""
    return module.embed_utterance(features)


def truncate_encoder(encoder: ConformerEncoder, n: int) -> ConformerEncoder:
    """Subsampling plus the first n blocks, with weights copied."""
    if not 1 <= n <= encoder.cfg.layers:
        raise ConfigError(f"cannot keep {n} of {encoder.cfg.layers} layers")
    cfg = EncoderConfig(**{**encoder.cfg.to_dict(), "layers": n})
    out = ConformerEncoder(cfg)
    keep = dict(out.named_parameters())
    source = dict(encoder.named_parameters())
    for name, p in keep.items():
        p.data = source[name].data.copy()
    src_buffers = dict(encoder.named_buffers())
    for name, (owner, key) in out._buffer_owners().items():
        owner._buffers[key] = src_buffers[name].copy()
    return out


@dataclass
class TrainingPhase:
    epochs: int
    scope: str  # "head_only" | "all"


def freeze_schedule(total_epochs: int, frozen_epochs: int) -> list[TrainingPhase]:
    """Head-only warm phase, then full fine-tuning for the remaining epochs."""
    if frozen_epochs < 0:
        raise ConfigError("frozen_epochs must be >= 0")
    if frozen_epochs > total_epochs:
        raise ConfigError("frozen_epochs cannot exceed total epochs")
    phases = []
    if frozen_epochs > 0:
        phases.append(TrainingPhase(frozen_epochs, "head_only"))
    if total_epochs - frozen_epochs > 0:
        phases.append(TrainingPhase(total_epochs - frozen_epochs, "all"))
    return phases


def linear_probe(
    layer_maps: Sequence[Sequence[np.ndarray]],
    labels: Sequence[int],
    hidden: tuple[int, int] = (64, 64),
    iters: int = 400,
    lr: float = 0.5,
    seed: int = 0,
) -> list[float]:
    """Training accuracy of a per-layer probe on frozen features.

    Probe: two affine maps, average pooling over frames, and an affine
    classifier, trained by full-batch gradient descent with a fixed budget.
    Affine maps commute with average pooling, so frames are pooled first;
    the function computed is identical.
    """
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if classes.size < 2:
        raise DegenerateLabelsError("probe needs at least two speakers")
    n_classes = int(classes.max()) + 1
    accuracies = []
    for layer_idx, maps in enumerate(layer_maps):
        pooled = np.stack([np.asarray(m, dtype=np.float64).mean(axis=-1) for m in maps])
        mu, sd = pooled.mean(axis=0), pooled.std(axis=0) + 1e-8
        x = ad.tensor((pooled - mu) / sd)
        rng = rng_for(seed, "probe", layer_idx)
        dims = [pooled.shape[1], hidden[0], hidden[1]]
        weights = []
        for i, (a, b) in enumerate(zip(dims, dims[1:] + [n_classes])):
            w = ad.tensor(rng.normal(0.0, 1.0 / np.sqrt(a), size=(a, b)), requires_grad=True)
            bias = ad.tensor(np.zeros(b), requires_grad=True)
            weights.append((w, bias))
        onehot = np.zeros((labels.size, n_classes))
        onehot[np.arange(labels.size), labels] = 1.0
        oh = ad.tensor(onehot)
        for _ in range(iters):
            h = x
            for w, bias in weights:
                h = ad.matmul(h, w) + bias
            loss = -ad.mean(ad.sum_(oh * ad.log_softmax(h, axis=-1), axis=-1))
            for w, bias in weights:
                w.grad = None
                bias.grad = None
            ad.backward(loss)
            for w, bias in weights:
                w.data = w.data - lr * w.grad
                bias.data = bias.data - lr * bias.grad
        h = x.data
        for w, bias in weights:
            h = h @ w.data + bias.data
        accuracies.append(float((h.argmax(axis=-1) == labels).mean()))
    return accuracies


ADAPTATION_CKPT_KIND = "adaptation"


def save_adaptation(path, module: SpeakerAdaptation, backbone_arrays: dict) -> None:
    """Store only trainable arrays plus a hash binding them to the backbone."""
    meta = {
        "kind": ADAPTATION_CKPT_KIND,
        "config": {
            "variant": module.cfg.variant,
            "adapted_layers": module.cfg.adapted_layers,
            "extra_layers": module.cfg.extra_layers,
            "light_dim": module.cfg.light_dim,
            "light_heads": module.cfg.light_heads,
            "light_hidden": module.cfg.light_hidden,
            "light_kernel": module.cfg.light_kernel,
            "dropout": module.cfg.dropout,
        },
        "backbone_hash": ckpt.content_hash(backbone_arrays),
    }
    ckpt.save_checkpoint(path, meta, module.state_arrays())


def load_adaptation(path, backbone: ConformerEncoder,
                    backbone_arrays: dict) -> SpeakerAdaptation:
    meta, arrays = ckpt.load_checkpoint(path)
    if meta.get("kind") != ADAPTATION_CKPT_KIND:
        raise CheckpointError(f"{path}: not an adaptation checkpoint")
    if meta["backbone_hash"] != ckpt.content_hash(backbone_arrays):
        raise CheckpointError(f"{path}: backbone content hash mismatch")
    cfg = AdaptationConfig(**meta["config"])
    module = SpeakerAdaptation(backbone, cfg, seed=None)
    module.load_state_arrays(arrays)
    return module
