"""Aggregation, pooling, embedding head, and all training objectives."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from confsv import autodiff as ad
from confsv.conformer import ENCODER_PRESETS, FeatureMap
from confsv.errors import DataError, DimensionError, InfeasibleTargetError, InputTooShortError
from confsv.heads import (
    AttentiveStatsPooling,
    EmbeddingHead,
    MfaFeature,
    attentive_stats_pool,
    embed,
    mfa_concat,
)
from confsv.losses import (
    AamClassifier,
    RateMatcher,
    aam_softmax_loss,
    combined_loss,
    ctc_loss,
    ctc_loss_batch,
    distill_kl_loss,
)
from confsv.nn import seed_parameters

from conftest import gradcheck


def fmaps(dims, frames, seed=0):
    rng = np.random.default_rng(seed)
    return [FeatureMap(rng.normal(size=(d, frames)), 0.04) for d in dims]


class TestMfa:
    def test_small_stack_width(self):
        cfg = ENCODER_PRESETS["small"]
        feature = mfa_concat(fmaps([cfg.dim] * cfg.layers, 3))
        assert feature.dim == 2816  # 16 blocks x 176 channels

    def test_single_map_is_normalized(self):
        (m,) = fmaps([6], 4, seed=1)
        feature = mfa_concat([m])
        col = feature.values[:, 0]
        assert abs(col.mean()) < 1e-9
        assert abs(col.var() - 1.0) < 1e-3

    def test_permuting_inputs_permutes_channels(self):
        maps = fmaps([3, 3], 5, seed=2)
        fwd = mfa_concat(maps).values
        rev = mfa_concat(maps[::-1]).values
        np.testing.assert_allclose(np.concatenate([fwd[3:], fwd[:3]]), rev, atol=1e-12)

    def test_frame_mismatch(self):
        a, = fmaps([3], 5, seed=3)
        b, = fmaps([3], 6, seed=4)
        with pytest.raises(DimensionError):
            mfa_concat([a, b])


class TestAttentiveStatsPooling:
    def test_identical_frames_collapse_std(self):
        frame = np.random.default_rng(5).normal(size=4)
        feature = MfaFeature(np.tile(frame[:, None], (1, 6)), [4])
        out = attentive_stats_pool(feature, seed=6)
        np.testing.assert_allclose(out[:4], frame, atol=1e-9)
        assert np.abs(out[4:]).max() <= np.sqrt(1e-5)

    def test_output_length_is_twice_channels(self):
        out = attentive_stats_pool(MfaFeature(np.random.default_rng(7).normal(size=(4, 3)), [4]))
        assert out.shape == (8,)

    def test_against_weighted_moment_oracle(self):
        pool = AttentiveStatsPooling(2, bottleneck=3)
        seed_parameters(pool, 8)
        x = np.random.default_rng(9).normal(size=(2, 2))  # (D, T)
        out = attentive_stats_pool(MfaFeature(x, [2]), pooling=pool)

        # independent recomputation from the module's weights
        h = x.T  # (T, D)
        mu = h.mean(axis=0)
        sd = np.sqrt(np.maximum(h.var(axis=0), 0.0) + 1e-10)
        ctx = np.concatenate([h, np.tile(mu, (2, 1)), np.tile(sd, (2, 1))], axis=1)
        scores = np.tanh(ctx @ pool.score1.weight.data + pool.score1.bias.data)
        scores = scores @ pool.score2.weight.data + pool.score2.bias.data
        w = np.exp(scores - scores.max(axis=0))
        w = w / w.sum(axis=0)
        mean = (w * h).sum(axis=0)
        std = np.sqrt(np.maximum((w * h * h).sum(axis=0) - mean**2, 0.0) + 1e-10)
        np.testing.assert_allclose(out, np.concatenate([mean, std]), atol=1e-10)

    def test_frame_permutation_invariance(self):
        pool = AttentiveStatsPooling(3)
        seed_parameters(pool, 10)
        x = np.random.default_rng(11).normal(size=(3, 7))
        a = attentive_stats_pool(MfaFeature(x, [3]), pooling=pool)
        b = attentive_stats_pool(MfaFeature(x[:, ::-1], [3]), pooling=pool)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_empty_frames_error(self):
        pool = AttentiveStatsPooling(3)
        with pytest.raises(DimensionError):
            pool(ad.tensor(np.zeros((1, 0, 3))))


class TestEmbeddingHead:
    def test_output_is_256(self):
        head = EmbeddingHead(10)
        seed_parameters(head, 12)
        assert embed(np.random.default_rng(13).normal(size=10), head).shape == (256,)

    def test_zero_weights_zero_embedding(self):
        head = EmbeddingHead(10)  # zero-initialized by default
        out = embed(np.random.default_rng(14).normal(size=10), head)
        np.testing.assert_array_equal(out, np.zeros(256))

    def test_dim_mismatch(self):
        head = EmbeddingHead(10)
        with pytest.raises(DimensionError):
            embed(np.zeros(9), head)

    def test_gradients(self):
        head = EmbeddingHead(6)
        seed_parameters(head, 15)
        head.train_mode()
        x = ad.tensor(np.random.default_rng(16).normal(size=(3, 6)), requires_grad=True)
        params = [p for _, p in head.named_parameters()]
        gradcheck(lambda: ad.sum_(ad.tanh(head(x))), [x] + params,
                  sample=5, rng=np.random.default_rng(3))


class TestAamSoftmax:
    def test_zero_margin_equals_cross_entropy_on_cosines(self):
        rng = np.random.default_rng(17)
        clf = AamClassifier(5, emb_dim=8)
        seed_parameters(clf, 18)
        emb = ad.tensor(rng.normal(size=(4, 8)))
        labels = [0, 2, 4, 1]
        loss = aam_softmax_loss(emb, labels, clf, scale=1.0, margin=0.0)

        w = clf.weight.data / np.linalg.norm(clf.weight.data, axis=1, keepdims=True)
        e = emb.data / np.linalg.norm(emb.data, axis=1, keepdims=True)
        cos = np.clip(e @ w.T, -1 + 1e-7, 1 - 1e-7)
        logp = cos - np.log(np.exp(cos).sum(axis=1, keepdims=True))
        # max-subtraction makes the direct form stable enough at these scales
        shifted = cos - cos.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        expected = -np.mean([logp[i, y] for i, y in enumerate(labels)])
        assert abs(float(loss.data) - expected) < 1e-12

    def test_two_class_aligned_scalar_case(self):
        # embedding colinear with the target weight, orthogonal imposter
        clf = AamClassifier(2, emb_dim=4)
        clf.weight.data = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
        emb = ad.tensor(np.array([2.0, 0.0, 0.0, 0.0]))
        s, m = 4.0, 0.2
        loss = aam_softmax_loss(emb, 0, clf, scale=s, margin=m)

        cos_t = 1.0 - 1e-7  # clamp engages at exact alignment
        sin_t = math.sqrt(1.0 - cos_t * cos_t)
        phi = cos_t * math.cos(m) - sin_t * math.sin(m)
        z = np.array([s * phi, 0.0])
        expected = -(z[0] - np.log(np.exp(z).sum()))
        assert abs(float(loss.data) - expected) < 1e-10

    def test_label_out_of_range(self):
        clf = AamClassifier(3, emb_dim=4)
        seed_parameters(clf, 19)
        with pytest.raises(IndexError):
            aam_softmax_loss(ad.tensor(np.ones(4)), 3, clf)

    def test_margin_domain(self):
        clf = AamClassifier(3, emb_dim=4)
        with pytest.raises(DataError):
            aam_softmax_loss(ad.tensor(np.ones(4)), 0, clf, margin=1.7)

    def test_gradients(self):
        clf = AamClassifier(4, emb_dim=6)
        seed_parameters(clf, 20)
        emb = ad.tensor(np.random.default_rng(21).normal(size=(3, 6)), requires_grad=True)
        gradcheck(lambda: aam_softmax_loss(emb, [0, 1, 3], clf, 8.0, 0.2),
                  [emb, clf.weight], sample=8, rng=np.random.default_rng(4))


def brute_force_ctc(logits: np.ndarray, target: list[int]) -> float:
    """Enumerate every frame labelling, collapse, and sum matching paths."""
    T, V = logits.shape
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    total = -np.inf
    paths = np.indices((V,) * T).reshape(T, -1).T if T > 0 else []
    for path in paths:
        collapsed = []
        prev = None
        for sym in path:
            if sym != prev and sym != 0:
                collapsed.append(int(sym))
            prev = sym
        if collapsed == list(target):
            lp = sum(logp[t, path[t]] for t in range(T))
            total = np.logaddexp(total, lp)
    return -total


class TestCtc:
    def test_single_frame(self):
        logits = np.random.default_rng(22).normal(size=(1, 4))
        loss = ctc_loss(ad.tensor(logits), [2])
        shifted = logits[0] - logits[0].max()
        expected = -(shifted[2] - np.log(np.exp(shifted).sum()))
        assert abs(float(loss.data) - expected) < 1e-12

    def test_against_brute_force(self):
        logits = np.random.default_rng(23).normal(size=(3, 4))
        loss = ctc_loss(ad.tensor(logits), [1, 3])
        assert abs(float(loss.data) - brute_force_ctc(logits, [1, 3])) < 1e-10

    def test_infeasible_target(self):
        with pytest.raises(InfeasibleTargetError):
            ctc_loss(ad.tensor(np.zeros((2, 4))), [1, 2, 3])

    def test_repeat_needs_separator_frame(self):
        with pytest.raises(InfeasibleTargetError):
            ctc_loss(ad.tensor(np.zeros((2, 4))), [1, 1])

    def test_empty_target(self):
        with pytest.raises(DataError):
            ctc_loss(ad.tensor(np.zeros((3, 4))), [])

    def test_symbol_out_of_range(self):
        with pytest.raises(IndexError):
            ctc_loss(ad.tensor(np.zeros((3, 4))), [4])

    def test_gradients(self):
        logits = ad.tensor(np.random.default_rng(24).normal(size=(4, 4)), requires_grad=True)
        gradcheck(lambda: ctc_loss(logits, [2, 1]), [logits])

    def test_batch_mean(self):
        rng = np.random.default_rng(25)
        logits = ad.tensor(rng.normal(size=(2, 4, 4)))
        l0 = float(ctc_loss(logits[0], [1]).data)
        l1 = float(ctc_loss(logits[1], [2, 3]).data)
        lb = float(ctc_loss_batch(logits, [[1], [2, 3]]).data)
        assert abs(lb - 0.5 * (l0 + l1)) < 1e-12


class TestDistillKl:
    def test_identical_logits_zero(self):
        logits = np.random.default_rng(26).normal(size=(5, 7))
        loss = distill_kl_loss(ad.tensor(logits, requires_grad=True), logits)
        assert abs(float(loss.data)) < 1e-12

    def test_constant_frame_shift_cancels(self):
        rng = np.random.default_rng(27)
        t = rng.normal(size=(4, 6))
        shift = rng.normal(size=(4, 1))
        loss = distill_kl_loss(ad.tensor(t + shift), t)
        assert abs(float(loss.data)) < 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        s = ad.tensor(rng.normal(scale=3.0, size=(3, 5)))
        t = rng.normal(scale=3.0, size=(3, 5))
        assert float(distill_kl_loss(s, t).data) >= -1e-12

    def test_hand_computed_two_frame_case(self):
        teacher = np.log(np.array([[0.8, 0.2], [0.5, 0.5]]))
        student = np.zeros((2, 2))  # uniform
        loss = distill_kl_loss(ad.tensor(student), teacher)
        kl1 = 0.8 * math.log(0.8 / 0.5) + 0.2 * math.log(0.2 / 0.5)
        assert abs(float(loss.data) - kl1 / 2.0) < 1e-10

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            distill_kl_loss(ad.tensor(np.zeros((2, 3))), np.zeros((3, 3)))

    def test_teacher_receives_no_gradient(self):
        student = ad.tensor(np.random.default_rng(28).normal(size=(3, 4)), requires_grad=True)
        teacher = ad.tensor(np.random.default_rng(29).normal(size=(3, 4)), requires_grad=True)
        loss = distill_kl_loss(student, teacher)
        ad.backward(loss)
        assert student.grad is not None
        assert teacher.grad is None


class TestRateMatcher:
    def test_halves_frames(self):
        rm = RateMatcher(6)
        seed_parameters(rm, 30)
        out = rm(ad.tensor(np.random.default_rng(31).normal(size=(1, 10, 6))))
        assert out.shape == (1, 5, 6)

    def test_minimal_length(self):
        rm = RateMatcher(6)
        seed_parameters(rm, 32)
        out = rm(ad.tensor(np.random.default_rng(33).normal(size=(1, 3, 6))))
        assert out.shape == (1, 2, 6)

    def test_channels_preserved(self):
        rm = RateMatcher(9)
        seed_parameters(rm, 34)
        out = rm(ad.tensor(np.random.default_rng(35).normal(size=(2, 11, 9))))
        assert out.shape[-1] == 9

    def test_too_short(self):
        rm = RateMatcher(4)
        with pytest.raises(InputTooShortError):
            rm(ad.tensor(np.zeros((1, 2, 4))))


class TestCombinedLoss:
    def test_arithmetic(self):
        assert combined_loss(2.0, 3.0, 1.0) == 5.0

    def test_alpha_zero(self):
        assert combined_loss(2.5, 100.0, 0.0) == 2.5

    def test_affine_in_alpha(self):
        a1, a2 = 0.3, 1.9
        l = lambda a: combined_loss(1.7, 2.3, a)
        assert abs(l(a1) + l(a2) - 2 * l((a1 + a2) / 2)) < 1e-12

    def test_negative_alpha_rejected(self):
        with pytest.raises(DataError):
            combined_loss(1.0, 1.0, -0.1)
