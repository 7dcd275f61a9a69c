"""Batch command-line surface.

Subcommands: gen-data, gen-trials, pretrain-asr, train, distill, adapt, probe,
embed, score, evaluate, count.  Every command is deterministic given its
config and seed; outputs land in the --out directory and inputs are never
mutated.  Exit codes: 0 success, 2 config error, 3 data error, 4 numeric
error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .accounting import count_adaptation_params, count_params, estimate_macs
from .adaptation import AdaptationConfig, load_adaptation, linear_probe
from .config import RunConfig, load_run_config
from .conformer import ENCODER_PRESETS, EncoderConfig
from .datapipe import (
    load_utterance,
    log_mel,
    make_trials,
    read_manifest,
    synth_corpus,
    write_corpus,
)
from .errors import ConfigError, ConfsvError, DataError, NumericError
from .scoring import (
    eer,
    load_embeddings,
    min_dcf,
    parse_trials,
    qmf_apply,
    qmf_fit,
    save_embeddings,
    score_trials,
    snorm_scores,
    write_score_file,
)
from .training import (
    extract_embeddings,
    load_asr_model,
    load_speaker_model,
    make_score_records,
    pretrain_asr,
    quality_features,
    train_adaptation,
    train_speaker,
)
from .util import rng_for

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _load_config(args) -> RunConfig:
    if args.config:
        cfg = load_run_config(args.config)
    elif getattr(args, "seed", None) is not None:
        cfg = RunConfig(seed=args.seed)
    else:
        raise ConfigError("a seed is required: pass --config with a seed or --seed N")
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "lmft", False):
        cfg = replace(cfg, lmft=True)
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    corpus = synth_corpus(cfg.n_speakers, cfg.utts_per_speaker, cfg.seed)
    manifest = write_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} utterances, manifest {manifest}")
    return EXIT_OK


def cmd_gen_trials(args) -> int:
    entries = read_manifest(args.manifest)
    trials = make_trials(entries, args.seed, args.n_target, args.n_nontarget)
    lines = [f"{label} {a} {b}" for label, a, b in trials]
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(trials)} trials to {args.out}")
    return EXIT_OK


def cmd_pretrain_asr(args) -> int:
    cfg = _load_config(args)
    path = pretrain_asr(cfg, args.manifest, args.out)
    print(f"checkpoint {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.init is not None and cfg.strategy == "scratch":
        cfg = replace(cfg, strategy="pretrained-init")
    path = train_speaker(cfg, args.manifest, args.out, init_ckpt=args.init)
    print(f"checkpoint {path}")
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = replace(_load_config(args), strategy="distill")
    if args.alpha is not None:
        cfg = replace(cfg, alpha=args.alpha)
    path = train_speaker(cfg, args.manifest, args.out, teacher_ckpt=args.teacher)
    print(f"checkpoint {path}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = replace(_load_config(args), strategy="adapt")
    if cfg.adaptation is None:
        raise ConfigError("adapt needs an [adaptation] section in the config")
    path = train_adaptation(cfg, args.manifest, args.teacher, args.out)
    print(f"checkpoint {path}")
    return EXIT_OK


def cmd_probe(args) -> int:
    encoder, _, _ = load_asr_model(args.ckpt)
    encoder.eval_mode()
    entries = read_manifest(args.manifest)
    if args.max_utts is not None:
        entries = entries[: args.max_utts]
    speakers = sorted({e.speaker_id for e in entries})
    if len(speakers) < 2:
        raise DataError("probe needs at least two speakers")
    label_of = {s: i for i, s in enumerate(speakers)}
    labels = [label_of[e.speaker_id] for e in entries]
    per_layer: list[list[np.ndarray]] = [[] for _ in range(encoder.cfg.layers)]
    for e in entries:
        utt = load_utterance(args.manifest, e)
        maps = encoder.encode(log_mel(utt.waveform))
        for layer, m in enumerate(maps):
            per_layer[layer].append(m.values)
    accuracies = linear_probe(per_layer, labels, seed=args.seed)
    lines = ["layer,accuracy"]
    lines += [f"{i + 1},{acc:.6f}" for i, acc in enumerate(accuracies)]
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote per-layer accuracies to {args.out}")
    return EXIT_OK


def cmd_embed(args) -> int:
    meta, _ = ckpt.load_checkpoint(args.ckpt)
    kind = meta.get("kind")
    if kind == "speaker":
        model = load_speaker_model(args.ckpt)
        embed_fn = model.embed_utterance
    elif kind == "adaptation":
        if args.teacher is None:
            raise ConfigError("embedding with an adaptation checkpoint needs --teacher")
        backbone, _, _ = load_asr_model(args.teacher)
        module = load_adaptation(args.ckpt, backbone, backbone.state_arrays())
        embed_fn = module.embed_utterance
    else:
        raise ConfigError(f"{args.ckpt}: cannot embed with checkpoint kind {kind!r}")
    store = extract_embeddings(embed_fn, args.manifest)
    save_embeddings(args.out, store)
    print(f"wrote {len(store)} embeddings to {args.out}")
    return EXIT_OK


def _scored(args):
    """Raw cosine scores, then s-norm and QMF calibration as flags request."""
    store = load_embeddings(args.embeddings)
    trials = parse_trials(args.trials)
    if len(trials) == 0:
        raise DataError(f"{args.trials}: no trials")
    raw = score_trials(store, trials)
    cohort = None
    if args.snorm:
        if args.cohort is None:
            raise ConfigError("--snorm needs --cohort embeddings")
        cohort = load_embeddings(args.cohort)
        if args.cohort_size and len(cohort) > args.cohort_size:
            rng = rng_for(args.cohort_seed, "cohort")
            keys = sorted(cohort)
            picked = rng.choice(len(keys), size=args.cohort_size, replace=False)
            cohort = {keys[i]: cohort[keys[i]] for i in sorted(picked)}

    def chain(trial_list):
        if cohort is not None:
            return snorm_scores(store, trial_list, cohort, top_k=args.top_k)
        return score_trials(store, trial_list)

    scores = chain(trials) if args.snorm else raw
    if args.qmf:
        if args.calib_trials is None:
            raise ConfigError("--qmf needs --calib-trials")
        if args.manifest is None:
            raise ConfigError("--qmf needs --manifest for quality features")
        entries = read_manifest(args.manifest)
        quality = quality_features(args.manifest, entries, store)
        calib = parse_trials(args.calib_trials)
        # calibration scores go through the same normalization as the trials
        model = qmf_fit(make_score_records(calib, chain(calib), quality), calib.labels)
        records = make_score_records(trials, scores, quality)
        scores = np.array([qmf_apply(model, r).calibrated for r in records])
    return store, trials, raw, scores


def cmd_score(args) -> int:
    _, trials, _, scores = _scored(args)
    write_score_file(args.out, trials, scores)
    print(f"wrote {len(trials)} scores to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    store, trials, raw, scores = _scored(args)
    labels = trials.labels
    e = eer(scores, labels)
    d = min_dcf(scores, labels)
    print(f"EER[%] {e:.4f}")
    print(f"minDCF {d:.4f}")
    if args.out:
        Path(args.out).write_text(f"eer_percent,min_dcf\n{e:.17g},{d:.17g}\n", encoding="utf-8")
    return EXIT_OK


def _encoder_from_args(args) -> EncoderConfig:
    if args.preset:
        if args.preset not in ENCODER_PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}")
        return ENCODER_PRESETS[args.preset]
    if None in (args.layers, args.dim, args.heads, args.hidden):
        raise ConfigError("count needs --preset or all of --layers/--dim/--heads/--hidden")
    return EncoderConfig(args.layers, args.dim, args.heads, args.hidden, args.rate)


def cmd_count(args) -> int:
    cfg = _encoder_from_args(args)
    if args.variant:
        acfg = AdaptationConfig(args.variant, args.adapted_layers, args.extra_layers)
        report = count_adaptation_params(acfg, cfg)
    elif args.macs:
        report = estimate_macs(cfg, input_seconds=args.seconds, convention=args.convention,
                               scope=args.scope)
    else:
        report = count_params(cfg, scope=args.scope)
    sys.stdout.write(report.to_text())
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="confsv", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, out=True):
        if config:
            sp.add_argument("--config", default=None)
        sp.add_argument("--seed", type=int, default=None)
        if out:
            sp.add_argument("--out", required=True)

    sp = sub.add_parser("gen-data", help="synthesize a corpus and manifest")
    common(sp)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("gen-trials", help="sample trials from a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-target", type=int, default=200)
    sp.add_argument("--n-nontarget", type=int, default=200)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_gen_trials)

    sp = sub.add_parser("pretrain-asr", help="CTC-train an encoder on corpus tokens")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.set_defaults(fn=cmd_pretrain_asr)

    sp = sub.add_parser("train", help="speaker training (scratch or pretrained-init)")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--init", default=None, help="ASR checkpoint for initialization")
    sp.add_argument("--lmft", action="store_true")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("distill", help="speaker training with frame-level distillation")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--alpha", type=float, default=None)
    sp.set_defaults(fn=cmd_distill)

    sp = sub.add_parser("adapt", help="train the frozen-backbone adaptation module")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--teacher", required=True, help="frozen backbone ASR checkpoint")
    sp.set_defaults(fn=cmd_adapt)

    sp = sub.add_parser("probe", help="per-layer linear probe accuracies")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--max-utts", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_probe)

    sp = sub.add_parser("embed", help="extract embeddings into a binary store")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--teacher", default=None, help="backbone for adaptation checkpoints")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_embed)

    for name, fn in (("score", cmd_score), ("evaluate", cmd_evaluate)):
        sp = sub.add_parser(name)
        sp.add_argument("--embeddings", required=True)
        sp.add_argument("--trials", required=True)
        sp.add_argument("--snorm", action="store_true")
        sp.add_argument("--cohort", default=None, help="cohort embedding store for --snorm")
        sp.add_argument("--cohort-size", type=int, default=300,
                        help="seeded random subsample of the cohort store (0 = all)")
        sp.add_argument("--cohort-seed", type=int, default=0)
        sp.add_argument("--top-k", type=int, default=70)
        sp.add_argument("--qmf", action="store_true")
        sp.add_argument("--calib-trials", default=None)
        sp.add_argument("--manifest", default=None)
        sp.add_argument("--out", required=(name == "score"), default=None)
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("count", help="parameter/MACs accounting reports")
    sp.add_argument("--preset", default=None)
    sp.add_argument("--layers", type=int, default=None)
    sp.add_argument("--dim", type=int, default=None)
    sp.add_argument("--heads", type=int, default=None)
    sp.add_argument("--hidden", type=int, default=None)
    sp.add_argument("--rate", type=float, default=0.25)
    sp.add_argument("--scope", default="speaker",
                    choices=["speaker", "encoder", "encoder+decoder"])
    sp.add_argument("--macs", action="store_true")
    sp.add_argument("--seconds", type=float, default=5.0)
    sp.add_argument("--convention", default="conv", choices=["conv", "full"])
    sp.add_argument("--variant", default=None, choices=["V1", "V2", "V3"])
    sp.add_argument("--adapted-layers", type=int, default=None)
    sp.add_argument("--extra-layers", type=int, default=0)
    sp.add_argument("--csv", default=None)
    sp.set_defaults(fn=cmd_count)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ConfsvError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
