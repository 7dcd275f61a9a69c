"""Training loops for the four strategies, plus embedding extraction.

Everything is a deterministic function of (config, seed): corpus order,
crops, augmentation draws, dropout masks, and parameter init all derive from
named seed streams.  Two runs of the same config produce byte-identical loss
logs and checkpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .adaptation import (
    AdaptationConfig,
    SpeakerAdaptation,
    TrainingPhase,
    freeze_schedule,
    save_adaptation,
    truncate_encoder,
)
from .config import RunConfig
from .conformer import ConformerEncoder, EncoderConfig
from .datapipe import (
    SPEED_FACTORS,
    ManifestEntry,
    Utterance,
    augment_onthefly,
    crop,
    load_utterance,
    log_mel,
    read_manifest,
    snr_estimate_db,
    speed_perturb,
)
from .errors import ConfigError, NumericError
from .heads import SpeakerModel
from .losses import (
    AamClassifier,
    CtcDecoder,
    RateMatcher,
    aam_softmax_loss,
    combined_loss,
    ctc_loss_batch,
    distill_kl_loss,
)
from .nn import Module, Parameter, seed_parameters
from .scoring import ScoreRecord
from .util import parallel_map, rng_for


class AdamW:
    """Adam with decoupled weight decay; state is keyed by parameter name."""

    def __init__(self, weight_decay: float = 1e-7, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.wd = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: dict[str, dict] = {}

    def step(self, named_params: Sequence[tuple[str, Parameter]], lr: float) -> None:
        for name, p in named_params:
            if not p.trainable or p.grad is None:
                continue
            st = self.state.setdefault(name, {"m": np.zeros_like(p.data),
                                              "v": np.zeros_like(p.data), "t": 0})
            st["t"] += 1
            g = p.grad
            st["m"] = self.beta1 * st["m"] + (1 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1 - self.beta2) * g * g
            mhat = st["m"] / (1 - self.beta1 ** st["t"])
            vhat = st["v"] / (1 - self.beta2 ** st["t"])
            p.data = p.data - lr * (mhat / (np.sqrt(vhat) + self.eps) + self.wd * p.data)


def cosine_lr(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup then cosine annealing to zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min((step - warmup_steps) / span, 1.0)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


@dataclass
class DatasetItem:
    entry: ManifestEntry
    speed: float  # 1.0 = original; other factors define new speaker labels


def build_items(entries: Sequence[ManifestEntry], use_speed: bool) -> tuple[list[DatasetItem], dict[str, int]]:
    """Expand the manifest with speed-perturbed replicas and map labels to ids.

    Original speakers take the low label indices so a later phase that drops
    the perturbed replicas can keep the same classifier.
    """
    items = [DatasetItem(e, 1.0) for e in entries]
    speakers = sorted({e.speaker_id for e in entries})
    labels = {s: i for i, s in enumerate(speakers)}
    if use_speed:
        for f in SPEED_FACTORS:
            items.extend(DatasetItem(e, f) for e in entries)
            for s in speakers:
                labels[f"{s}@sp{f}"] = len(labels)
    return items, labels


def _item_utterance(manifest_path, item: DatasetItem) -> Utterance:
    utt = load_utterance(manifest_path, item.entry)
    if item.speed != 1.0:
        utt = speed_perturb(utt, item.speed)
    return utt


def _speaker_batch(manifest_path, items, order, labels, cfg: RunConfig, epoch: int,
                   start: int, size: int, crop_seconds: float, augment: bool):
    feats, ys = [], []
    for j in range(start, min(start + size, len(order))):
        idx = int(order[j])
        item = items[idx]
        utt = _item_utterance(manifest_path, item)
        rng = rng_for(cfg.seed, "item", epoch, idx)
        if augment and cfg.augment_prob > 0:
            utt = augment_onthefly(utt, cfg.augment_prob, rng)
        utt = crop(utt, crop_seconds, rng)
        feats.append(log_mel(utt.waveform).T)
        label_key = item.entry.speaker_id if item.speed == 1.0 else (
            f"{item.entry.speaker_id}@sp{item.speed}"
        )
        ys.append(labels[label_key])
    return ad.tensor(np.stack(feats)), np.array(ys, dtype=np.int64)


def _write_loss_csv(path: Path, header: list[str], rows: list[list[float]]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(f"{v:.17g}" if isinstance(v, float) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _check_finite_loss(value: float) -> float:
    if not np.isfinite(value):
        raise NumericError(f"non-finite training loss: {value}")
    return value


class _TrainableSet:
    """Named parameters across the model and its training-only heads."""

    def __init__(self, **modules: Optional[Module]):
        self.modules = {k: m for k, m in modules.items() if m is not None}

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = []
        for prefix, module in self.modules.items():
            out.extend((f"{prefix}.{n}", p) for n, p in module.named_parameters())
        return out

    def set_phase(self, scope: str) -> None:
        """head_only freezes the encoder; all trains everything."""
        for name, p in self.named_parameters():
            p.trainable = not (scope == "head_only" and name.startswith("model.encoder."))

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None


def speaker_checkpoint_arrays(model: SpeakerModel) -> dict[str, np.ndarray]:
    return model.state_arrays()


def save_speaker_checkpoint(path, model: SpeakerModel, run_cfg: RunConfig) -> None:
    meta = {"kind": "speaker", "encoder": model.cfg.to_dict(), "seed": run_cfg.seed}
    ckpt.save_checkpoint(path, meta, model.state_arrays())


def load_speaker_model(path) -> SpeakerModel:
    meta, arrays = ckpt.load_checkpoint(path)
    if meta.get("kind") != "speaker":
        raise ConfigError(f"{path}: not a speaker checkpoint")
    model = SpeakerModel(EncoderConfig.from_dict(meta["encoder"]))
    model.load_state_arrays(arrays)
    return model


def save_asr_checkpoint(path, encoder: ConformerEncoder, decoder: CtcDecoder,
                        run_cfg: RunConfig) -> None:
    arrays = {f"encoder.{n}": a for n, a in encoder.state_arrays().items()}
    arrays.update({f"decoder.{n}": a for n, a in decoder.state_arrays().items()})
    meta = {
        "kind": "asr",
        "encoder": encoder.cfg.to_dict(),
        "vocab": decoder.vocab,
        "seed": run_cfg.seed,
    }
    ckpt.save_checkpoint(path, meta, arrays)


def load_asr_model(path) -> tuple[ConformerEncoder, CtcDecoder, dict]:
    meta, arrays = ckpt.load_checkpoint(path)
    if meta.get("kind") != "asr":
        raise ConfigError(f"{path}: not an ASR checkpoint")
    encoder = ConformerEncoder(EncoderConfig.from_dict(meta["encoder"]))
    decoder = CtcDecoder(encoder.cfg.dim, meta["vocab"])
    encoder.load_state_arrays(
        {n[len("encoder."):]: a for n, a in arrays.items() if n.startswith("encoder.")}
    )
    decoder.load_state_arrays(
        {n[len("decoder."):]: a for n, a in arrays.items() if n.startswith("decoder.")}
    )
    return encoder, decoder, meta


# -- ASR pretraining ----------------------------------------------------------------


def pretrain_asr(cfg: RunConfig, manifest_path, out_dir) -> Path:
    """CTC-train an encoder + linear decoder on the corpus token sequences."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = read_manifest(manifest_path)
    encoder = ConformerEncoder(cfg.encoder)
    decoder = CtcDecoder(cfg.encoder.dim, cfg.vocab)
    seed_parameters(encoder, cfg.seed, scope="asr_encoder")
    seed_parameters(decoder, cfg.seed, scope="asr_decoder")
    trainset = _TrainableSet(encoder=encoder, decoder=decoder)
    opt = AdamW(cfg.weight_decay)

    n = len(entries)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    warmup = round(steps_per_epoch * cfg.warmup_epochs)
    rows = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng_for(cfg.seed, "asr_order", epoch).permutation(n)
        encoder.train_mode()
        decoder.train_mode()
        epoch_losses = []
        for start in range(0, n, cfg.batch_size):
            batch_idx = [int(order[j]) for j in range(start, min(start + cfg.batch_size, n))]
            utts = [load_utterance(manifest_path, entries[i]) for i in batch_idx]
            max_len = max(u.n_samples for u in utts)
            feats = np.stack(
                [log_mel(np.pad(u.waveform, (0, max_len - u.n_samples))).T for u in utts]
            )
            targets = [u.token_id_seq() for u in utts]
            rng = rng_for(cfg.seed, "asr_dropout", step)
            maps = encoder(ad.tensor(feats), rng)
            logits = decoder(maps[-1])
            loss = ctc_loss_batch(logits, targets)
            value = _check_finite_loss(float(loss.data))
            trainset.zero_grad()
            ad.backward(loss)
            opt.step(trainset.named_parameters(), cosine_lr(step, total_steps, warmup, cfg.lr))
            epoch_losses.append(value)
            step += 1
        rows.append([epoch, float(np.mean(epoch_losses))])
    _write_loss_csv(out_dir / "asr_loss.csv", ["epoch", "loss"], rows)
    path = out_dir / "asr.ckpt"
    save_asr_checkpoint(path, encoder, decoder, cfg)
    return path


# -- speaker training -----------------------------------------------------------------


def _teacher_logits(teacher_encoder: ConformerEncoder, teacher_decoder: CtcDecoder,
                    mel: ad.Tensor) -> np.ndarray:
    teacher_encoder.eval_mode()
    teacher_decoder.eval_mode()
    maps = teacher_encoder(mel, rng=None)
    return teacher_decoder(maps[-1]).data


def train_speaker(
    cfg: RunConfig,
    manifest_path,
    out_dir,
    init_ckpt: Optional[str] = None,
    teacher_ckpt: Optional[str] = None,
) -> Path:
    """Speaker-embedding training: scratch, pretrained-init, or distillation."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = read_manifest(manifest_path)
    items, labels = build_items(entries, cfg.speed_perturb)
    n_classes = len(labels)

    model = SpeakerModel(cfg.encoder)
    classifier = AamClassifier(n_classes)
    seed_parameters(model, cfg.seed, scope="speaker_model")
    seed_parameters(classifier, cfg.seed, scope="classifier")

    distilling = cfg.strategy == "distill"
    teacher_encoder = teacher_decoder = None
    student_decoder = rate_match = None
    if distilling:
        if teacher_ckpt is None:
            raise ConfigError("distillation requires a teacher checkpoint")
        teacher_encoder, teacher_decoder, _ = load_asr_model(teacher_ckpt)
        teacher_encoder.set_trainable(False)
        teacher_decoder.set_trainable(False)
        if cfg.alpha > 0:
            student_decoder = CtcDecoder(cfg.encoder.dim, teacher_decoder.vocab)
            seed_parameters(student_decoder, cfg.seed, scope="student_decoder")
            if cfg.encoder.subsample_rate == 0.5 and teacher_encoder.cfg.subsample_rate == 0.25:
                rate_match = RateMatcher(cfg.encoder.dim)
                seed_parameters(rate_match, cfg.seed, scope="rate_match")
            elif cfg.encoder.subsample_rate != teacher_encoder.cfg.subsample_rate:
                raise ConfigError("unsupported student/teacher subsampling combination")

    phases = [TrainingPhase(cfg.epochs, "all")]
    if cfg.strategy == "pretrained-init":
        if init_ckpt is None:
            raise ConfigError("pretrained-init requires an encoder checkpoint")
        encoder, _, _ = load_asr_model(init_ckpt)
        if cfg.truncate_layers is not None:
            encoder = truncate_encoder(encoder, cfg.truncate_layers)
        if encoder.cfg != cfg.encoder:
            raise ConfigError("run encoder config must match the checkpoint encoder")
        model.encoder.load_state_arrays(encoder.state_arrays())
        phases = freeze_schedule(cfg.epochs, cfg.frozen_epochs)

    trainset = _TrainableSet(model=model, classifier=classifier,
                             student_decoder=student_decoder, rate_match=rate_match)
    opt = AdamW(cfg.weight_decay)

    n = len(items)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    warmup = round(steps_per_epoch * cfg.warmup_epochs)

    header = ["epoch", "loss"] + (["loss_spk", "loss_distill"] if distilling else [])
    rows = []
    step = 0
    epoch = 0
    for phase in phases:
        trainset.set_phase(phase.scope)
        for _ in range(phase.epochs):
            order = rng_for(cfg.seed, "order", epoch).permutation(n)
            model.train_mode()
            if student_decoder is not None:
                student_decoder.train_mode()
            if rate_match is not None:
                rate_match.train_mode()
            epoch_losses, epoch_spk, epoch_kl = [], [], []
            for start in range(0, n, cfg.batch_size):
                mel, ys = _speaker_batch(
                    manifest_path, items, order, labels, cfg, epoch, start,
                    cfg.batch_size, cfg.crop_seconds, augment=cfg.augment_prob > 0,
                )
                rng = rng_for(cfg.seed, "dropout", step)
                emb, maps = model(mel, rng, return_maps=True)
                l_spk = aam_softmax_loss(emb, ys, classifier, cfg.aam_scale, cfg.aam_margin)
                if distilling and cfg.alpha > 0:
                    frames = maps[-1]
                    if rate_match is not None:
                        frames = rate_match(frames)
                    s_logits = student_decoder(frames)
                    t_logits = _teacher_logits(teacher_encoder, teacher_decoder, mel)
                    l_kl = distill_kl_loss(s_logits, t_logits)
                    loss = combined_loss(l_spk, l_kl, cfg.alpha)
                    epoch_spk.append(float(l_spk.data))
                    epoch_kl.append(float(l_kl.data))
                else:
                    loss = l_spk
                    if distilling:
                        epoch_spk.append(float(l_spk.data))
                        epoch_kl.append(0.0)
                value = _check_finite_loss(float(loss.data))
                trainset.zero_grad()
                ad.backward(loss)
                opt.step(trainset.named_parameters(), cosine_lr(step, total_steps, warmup, cfg.lr))
                epoch_losses.append(value)
                step += 1
            row = [epoch, float(np.mean(epoch_losses))]
            if distilling:
                row += [float(np.mean(epoch_spk)), float(np.mean(epoch_kl))]
            rows.append(row)
            epoch += 1

    if cfg.lmft:
        lmft_rows = _large_margin_finetune(cfg, manifest_path, model, classifier,
                                           trainset, opt, entries, labels, epoch)
        rows.extend(lmft_rows)

    _write_loss_csv(out_dir / "loss.csv", header, rows)
    path = out_dir / "speaker.ckpt"
    save_speaker_checkpoint(path, model, cfg)
    return path


def _large_margin_finetune(cfg, manifest_path, model, classifier, trainset, opt,
                           entries, labels, epoch_base) -> list[list[float]]:
    """Long-crop, large-margin refinement on the original (unperturbed) items."""
    items = [DatasetItem(e, 1.0) for e in entries]
    n = len(items)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.lmft_epochs
    trainset.set_phase("all")
    rows = []
    step = 0
    for e in range(cfg.lmft_epochs):
        epoch = epoch_base + e
        order = rng_for(cfg.seed, "lmft_order", epoch).permutation(n)
        model.train_mode()
        losses = []
        for start in range(0, n, cfg.batch_size):
            mel, ys = _speaker_batch(
                manifest_path, items, order, labels, cfg, epoch, start,
                cfg.batch_size, cfg.lmft_crop_seconds, augment=cfg.augment_prob > 0,
            )
            rng = rng_for(cfg.seed, "lmft_dropout", step)
            emb = model(mel, rng)
            loss = aam_softmax_loss(emb, ys, classifier, cfg.aam_scale, cfg.lmft_margin)
            value = _check_finite_loss(float(loss.data))
            trainset.zero_grad()
            ad.backward(loss)
            opt.step(trainset.named_parameters(),
                     cosine_lr(step, total, 0, cfg.lr * 0.1))
            losses.append(value)
            step += 1
        rows.append([epoch, float(np.mean(losses))])
    return rows


# -- adaptation training -----------------------------------------------------------


def train_adaptation(cfg: RunConfig, manifest_path, backbone_ckpt, out_dir) -> Path:
    """Train the adaptation add-on with the backbone frozen."""
    if cfg.adaptation is None:
        raise ConfigError("adaptation config required")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = read_manifest(manifest_path)
    items, labels = build_items(entries, cfg.speed_perturb)

    backbone, _, _ = load_asr_model(backbone_ckpt)
    backbone.set_trainable(False)
    module = SpeakerAdaptation(backbone, cfg.adaptation, seed=cfg.seed)
    classifier = AamClassifier(len(labels))
    seed_parameters(classifier, cfg.seed, scope="classifier")
    trainset = _TrainableSet(adaptation=module, classifier=classifier)
    opt = AdamW(cfg.weight_decay)

    n = len(items)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    warmup = round(steps_per_epoch * cfg.warmup_epochs)
    rows = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng_for(cfg.seed, "order", epoch).permutation(n)
        module.train_mode()
        losses = []
        for start in range(0, n, cfg.batch_size):
            mel, ys = _speaker_batch(
                manifest_path, items, order, labels, cfg, epoch, start,
                cfg.batch_size, cfg.crop_seconds, augment=cfg.augment_prob > 0,
            )
            rng = rng_for(cfg.seed, "dropout", step)
            emb = module(mel, rng)
            loss = aam_softmax_loss(emb, ys, classifier, cfg.aam_scale, cfg.aam_margin)
            value = _check_finite_loss(float(loss.data))
            trainset.zero_grad()
            ad.backward(loss)
            opt.step(trainset.named_parameters(), cosine_lr(step, total_steps, warmup, cfg.lr))
            losses.append(value)
            step += 1
        rows.append([epoch, float(np.mean(losses))])
    _write_loss_csv(out_dir / "loss.csv", ["epoch", "loss"], rows)
    path = out_dir / "adaptation.ckpt"
    save_adaptation(path, module, backbone.state_arrays())
    return path


# -- embeddings ---------------------------------------------------------------------


def extract_embeddings(embed_fn, manifest_path,
                       entries: Optional[Sequence[ManifestEntry]] = None) -> dict[str, np.ndarray]:
    """Embed every manifest entry (full utterance, inference mode)."""
    entries = read_manifest(manifest_path) if entries is None else list(entries)

    def one(entry: ManifestEntry) -> np.ndarray:
        utt = load_utterance(manifest_path, entry)
        return embed_fn(log_mel(utt.waveform))

    vectors = parallel_map(one, entries)
    return {e.path: v.astype(np.float32) for e, v in zip(entries, vectors)}


def quality_features(manifest_path, entries: Sequence[ManifestEntry],
                     store: dict[str, np.ndarray]) -> dict[str, tuple[float, float, float]]:
    """Per-utterance (duration, estimated SNR, embedding magnitude)."""

    def one(entry: ManifestEntry):
        utt = load_utterance(manifest_path, entry)
        emb = store[entry.path]
        return (utt.duration_sec, snr_estimate_db(utt.waveform),
                float(np.linalg.norm(emb.astype(np.float64))))

    feats = parallel_map(one, entries)
    return {e.path: f for e, f in zip(entries, feats)}


def make_score_records(trials, raw_scores, quality: dict) -> list[ScoreRecord]:
    records = []
    for t, s in zip(trials, raw_scores):
        de, se, me = quality[t.enroll]
        dt, st, mt = quality[t.test]
        records.append(ScoreRecord(
            raw=float(s), duration_enroll=de, duration_test=dt,
            snr_enroll=se, snr_test=st, magnitude_enroll=me, magnitude_test=mt,
        ))
    return records
