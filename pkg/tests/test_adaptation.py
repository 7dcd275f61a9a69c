"""Frozen-backbone adaptation: wiring, counts, freezing, truncation, probes."""

import numpy as np
import pytest

from confsv import autodiff as ad
from confsv.accounting import count_adaptation_params
from confsv.adaptation import (
    AdaptationConfig,
    LayerAdaptor,
    SpeakerAdaptation,
    adaptation_forward,
    apply_layer_adaptor,
    build_adaptation,
    freeze_schedule,
    linear_probe,
    load_adaptation,
    save_adaptation,
    truncate_encoder,
)
from confsv.conformer import ENCODER_PRESETS, ConformerEncoder, EncoderConfig
from confsv.errors import CheckpointError, ConfigError, DegenerateLabelsError
from confsv.heads import SpeakerModel
from confsv.losses import AamClassifier, aam_softmax_loss
from confsv.nn import seed_parameters
from confsv.training import AdamW, _TrainableSet

from conftest import gradcheck


def toy_backbone(layers=3, dim=32, seed=11):
    cfg = EncoderConfig(layers, dim, 4, 48, 0.25, conv_kernel=7, dropout=0.0)
    return ConformerEncoder(cfg, seed=seed)


def toy_adapt_cfg(**kw):
    base = dict(variant="V2", adapted_layers=2, extra_layers=0,
                light_dim=24, light_heads=4, light_hidden=32, light_kernel=7, dropout=0.0)
    base.update(kw)
    return AdaptationConfig(**base)


class TestLayerAdaptor:
    def test_projects_wide_backbone_to_128(self):
        adaptor = LayerAdaptor(512)
        seed_parameters(adaptor, 1)
        out = apply_layer_adaptor(np.random.default_rng(2).normal(size=(512, 9)), adaptor)
        assert out.shape == (128, 9)

    def test_zero_weights_zero_output(self):
        adaptor = LayerAdaptor(16)
        out = apply_layer_adaptor(np.random.default_rng(3).normal(size=(16, 4)), adaptor)
        np.testing.assert_array_equal(out, np.zeros((128, 4)))

    def test_gradients(self):
        adaptor = LayerAdaptor(6, out_dim=5)
        seed_parameters(adaptor, 4)
        x = ad.tensor(np.random.default_rng(5).normal(size=(1, 3, 6)), requires_grad=True)
        params = [p for _, p in adaptor.named_parameters()]
        gradcheck(lambda: ad.sum_(ad.tanh(adaptor(x))), [x] + params,
                  sample=6, rng=np.random.default_rng(0))


class TestBuildAdaptation:
    @pytest.mark.parametrize("variant,k", [("V1", 0), ("V1", 2), ("V2", 0), ("V2", 2), ("V3", 2)])
    def test_trainable_count_matches_accounting_exactly(self, variant, k):
        backbone = toy_backbone()
        cfg = toy_adapt_cfg(variant=variant, extra_layers=k)
        module = build_adaptation(backbone, cfg, seed=None)
        expected = count_adaptation_params(cfg, backbone.cfg).total_params
        assert module.param_count() == expected

    def test_published_cell_small_v2_l12_k0(self):
        # trainable size of the 16-layer/176-dim backbone's V2 L=12 K=0 add-on
        backbone = ConformerEncoder(ENCODER_PRESETS["small"])
        cfg = AdaptationConfig("V2", 12, 0)
        module = build_adaptation(backbone, cfg, seed=None)
        assert module.param_count() == count_adaptation_params(cfg, backbone.cfg).total_params
        assert abs(module.param_count() / 1e6 - 2.06) / 2.06 < 0.10

    def test_v1_k0_has_pooling_and_head_only(self):
        backbone = toy_backbone()
        module = build_adaptation(backbone, toy_adapt_cfg(variant="V1"), seed=0)
        names = {n.split(".")[0] for n, _ in module.named_parameters()}
        assert names == {"light_in", "mfa", "pooling", "head"}  # d != light width quirk
        cfg_match = toy_adapt_cfg(variant="V1", light_dim=32)
        module2 = build_adaptation(toy_backbone(dim=32), cfg_match, seed=0)
        names2 = {n.split(".")[0] for n, _ in module2.named_parameters()}
        assert names2 == {"mfa", "pooling", "head"}

    def test_depth_exceeded(self):
        with pytest.raises(ConfigError):
            build_adaptation(toy_backbone(layers=2), toy_adapt_cfg(adapted_layers=5))

    def test_v3_requires_lightweight_layers(self):
        with pytest.raises(ConfigError):
            AdaptationConfig("V3", 2, 0)

    def test_v2_v3_identical_at_k0(self):
        # with matching widths and K = 0 the two variants build the same set
        backbone = toy_backbone(dim=32)
        v2 = build_adaptation(backbone, toy_adapt_cfg(variant="V2", light_dim=32), seed=None)
        # degenerate V3 (K forced to 0) drops the lightweight branch entirely
        v3_k0 = SpeakerAdaptation(
            backbone, _degenerate_v3(light_dim=32), seed=None, _allow_degenerate_v3=True
        )
        assert {n: p.shape for n, p in v2.named_parameters()} == {
            n: p.shape for n, p in v3_k0.named_parameters()
        }

    def test_v2_v3_k0_differ_only_by_input_linear_when_widths_differ(self):
        backbone = toy_backbone(dim=32)
        v2 = build_adaptation(backbone, toy_adapt_cfg(variant="V2", light_dim=24), seed=None)
        v3_k0 = SpeakerAdaptation(
            backbone, _degenerate_v3(light_dim=24), seed=None, _allow_degenerate_v3=True
        )
        d2 = {n: p.shape for n, p in v2.named_parameters()}
        d3 = {n: p.shape for n, p in v3_k0.named_parameters()}
        extra = set(d2) - set(d3)
        assert all(n.startswith("light_in.") for n in extra)
        assert {n: s for n, s in d2.items() if n not in extra} == d3


def _degenerate_v3(light_dim):
    cfg = toy_adapt_cfg(variant="V3", extra_layers=1, light_dim=light_dim)
    object.__setattr__(cfg, "extra_layers", 0)
    return cfg


class TestAdaptationForward:
    def test_backbone_outputs_bitwise_unchanged_by_attachment(self):
        backbone = toy_backbone()
        feats = np.random.default_rng(7).normal(size=(80, 20))
        backbone.eval_mode()
        before = [m.values.copy() for m in backbone.encode(feats)]
        module = build_adaptation(backbone, toy_adapt_cfg(extra_layers=1), seed=8)
        adaptation_forward(feats, module)
        after = [m.values for m in backbone.encode(feats)]
        for a, b in zip(before, after):
            np.testing.assert_array_equal(a, b)

    def test_mfa_width(self):
        backbone = toy_backbone()
        cfg = toy_adapt_cfg(variant="V3", adapted_layers=2, extra_layers=2)
        module = build_adaptation(backbone, cfg, seed=9)
        assert module.mfa.norm.gamma.shape == (128 * 2 + cfg.light_dim * 2,)

    def test_embedding_length(self):
        backbone = toy_backbone()
        module = build_adaptation(backbone, toy_adapt_cfg(), seed=10)
        emb = adaptation_forward(np.random.default_rng(11).normal(size=(80, 16)), module)
        assert emb.shape == (256,)

    def test_no_gradient_reaches_backbone(self):
        backbone = toy_backbone()
        module = build_adaptation(backbone, toy_adapt_cfg(extra_layers=1), seed=12)
        module.train_mode()
        emb = module(ad.tensor(np.random.default_rng(13).normal(size=(2, 20, 80))))
        ad.backward(ad.sum_(emb * emb))
        assert all(p.grad is None for _, p in backbone.named_parameters())

    def test_frozen_training_never_mutates_backbone(self):
        backbone = toy_backbone()
        state_before = {n: a.copy() for n, a in backbone.state_arrays().items()}
        module = build_adaptation(backbone, toy_adapt_cfg(extra_layers=1), seed=14)
        clf = AamClassifier(3)
        seed_parameters(clf, 15)
        trainset = _TrainableSet(adaptation=module, classifier=clf)
        opt = AdamW()
        rng = np.random.default_rng(16)
        module.train_mode()
        for step in range(3):
            mel = ad.tensor(rng.normal(size=(3, 16, 80)))
            emb = module(mel, np.random.default_rng(step))
            loss = aam_softmax_loss(emb, [0, 1, 2], clf, 8.0, 0.1)
            trainset.zero_grad()
            ad.backward(loss)
            opt.step(trainset.named_parameters(), 1e-3)
        for name, arr in backbone.state_arrays().items():
            np.testing.assert_array_equal(arr, state_before[name])


class TestTruncation:
    def test_full_depth_truncation_is_identity(self):
        enc = toy_backbone(layers=3)
        enc.eval_mode()
        out = truncate_encoder(enc, 3)
        out.eval_mode()
        feats = np.random.default_rng(17).normal(size=(80, 18))
        for a, b in zip(enc.encode(feats), out.encode(feats)):
            np.testing.assert_array_equal(a.values, b.values)

    def test_prefix_matches_original_blocks(self):
        enc = toy_backbone(layers=3)
        enc.eval_mode()
        out = truncate_encoder(enc, 1)
        out.eval_mode()
        feats = np.random.default_rng(18).normal(size=(80, 18))
        np.testing.assert_array_equal(enc.encode(feats)[0].values, out.encode(feats)[0].values)
        assert out.cfg.layers == 1

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            truncate_encoder(toy_backbone(layers=3), 4)


class TestFreezeSchedule:
    def test_phases(self):
        phases = freeze_schedule(5, 2)
        assert [(p.epochs, p.scope) for p in phases] == [(2, "head_only"), (3, "all")]

    def test_zero_frozen_epochs(self):
        phases = freeze_schedule(4, 0)
        assert [(p.epochs, p.scope) for p in phases] == [(4, "all")]

    def test_negative_rejected(self):
        with pytest.raises(ConfigError):
            freeze_schedule(4, -1)

    def test_head_only_phase_keeps_encoder_fixed(self):
        model = SpeakerModel(EncoderConfig(1, 8, 2, 16, conv_kernel=5, dropout=0.0), seed=19)
        clf = AamClassifier(2)
        seed_parameters(clf, 20)
        trainset = _TrainableSet(model=model, classifier=clf)
        trainset.set_phase("head_only")
        enc_before = {n: a.copy() for n, a in model.encoder.state_arrays().items()}
        opt = AdamW()
        model.train_mode()
        for step in range(2):
            mel = ad.tensor(np.random.default_rng(step).normal(size=(2, 16, 80)))
            loss = aam_softmax_loss(model(mel, np.random.default_rng(step)), [0, 1], clf, 8.0, 0.1)
            trainset.zero_grad()
            ad.backward(loss)
            opt.step(trainset.named_parameters(), 1e-3)
        for name, p in model.encoder.named_parameters():
            np.testing.assert_array_equal(p.data, enc_before[name])
        trainset.set_phase("all")
        mel = ad.tensor(np.random.default_rng(9).normal(size=(2, 16, 80)))
        loss = aam_softmax_loss(model(mel, np.random.default_rng(9)), [0, 1], clf, 8.0, 0.1)
        trainset.zero_grad()
        ad.backward(loss)
        opt.step(trainset.named_parameters(), 1e-3)
        changed = any(
            not np.array_equal(p.data, enc_before[n]) for n, p in model.encoder.named_parameters()
        )
        assert changed


class TestLinearProbe:
    def test_separable_features_reach_perfect_accuracy(self):
        labels = [0, 1, 2, 3] * 8
        maps = [np.tile(np.eye(4)[y][:, None], (1, 5)) for y in labels]
        acc = linear_probe([maps], labels, seed=1)
        assert acc == [1.0]

    def test_matches_logistic_regression_oracle(self):
        rng = np.random.default_rng(21)
        n_spk, per, d, frames = 4, 32, 10, 6
        labels = np.repeat(np.arange(n_spk), per)
        means = rng.normal(scale=0.8, size=(n_spk, d))
        maps = [means[y][:, None] + rng.normal(size=(d, frames)) for y in labels]
        acc = linear_probe([maps], labels, seed=2)[0]

        # independent fit: plain multinomial logistic regression on pooled means
        x = np.stack([m.mean(axis=1) for m in maps])
        x = (x - x.mean(axis=0)) / (x.std(axis=0) + 1e-8)
        onehot = np.eye(n_spk)[labels]
        w = np.zeros((d, n_spk))
        b = np.zeros(n_spk)
        for _ in range(2000):
            z = x @ w + b
            z -= z.max(axis=1, keepdims=True)
            p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
            g = (p - onehot) / len(labels)
            w -= 1.0 * (x.T @ g)
            b -= 1.0 * g.sum(axis=0)
        oracle = float(((x @ w + b).argmax(axis=1) == labels).mean())
        assert abs(acc - oracle) <= 0.02

    def test_single_class_rejected(self):
        with pytest.raises(DegenerateLabelsError):
            linear_probe([[np.zeros((3, 4))]], [0])


class TestAdaptationCheckpoint:
    def test_round_trip_and_hash_binding(self, tmp_path):
        backbone = toy_backbone()
        module = build_adaptation(backbone, toy_adapt_cfg(extra_layers=1), seed=22)
        path = tmp_path / "adapt.ckpt"
        save_adaptation(path, module, backbone.state_arrays())
        restored = load_adaptation(path, backbone, backbone.state_arrays())
        for (n1, p1), (n2, p2) in zip(
            sorted(module.named_parameters()), sorted(restored.named_parameters())
        ):
            assert n1 == n2
            np.testing.assert_array_equal(p1.data, p2.data)

    def test_wrong_backbone_rejected(self, tmp_path):
        backbone = toy_backbone(seed=23)
        module = build_adaptation(backbone, toy_adapt_cfg(), seed=24)
        path = tmp_path / "adapt.ckpt"
        save_adaptation(path, module, backbone.state_arrays())
        other = toy_backbone(seed=99)
        with pytest.raises(CheckpointError):
            load_adaptation(path, other, other.state_arrays())
