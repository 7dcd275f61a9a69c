"""Training objectives: margin softmax, CTC, and frame-level distillation.

The CTC loss runs the forward algorithm in log space over the blank-extended
label sequence; -1e30 stands in for log(0) so gradients through impossible
states vanish cleanly instead of producing NaNs.
"""

from __future__ import annotations

import math
from typing import Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, DimensionError, InfeasibleTargetError, InputTooShortError
from .nn import Conv1d, Linear, Module, Parameter

NEG = -1e30
COS_CLAMP = 1e-7
BLANK = 0


class AamClassifier(Module):
    """Class weight matrix for the additive-angular-margin softmax."""

    def __init__(self, n_classes: int, emb_dim: int = 256):
        super().__init__()
        self.weight = Parameter((n_classes, emb_dim), fan=emb_dim)
        self.n_classes = n_classes


def _l2_rows(x: Tensor) -> Tensor:
    norm = ad.sqrt(ad.sum_(x * x, axis=-1, keepdims=True) + ad.tensor(1e-24))
    return x / norm


def aam_softmax_loss(
    emb: Tensor,
    labels: Union[int, Sequence[int], np.ndarray],
    classifier: AamClassifier,
    scale: float = 32.0,
    margin: float = 0.2,
) -> Tensor:
    """Cross-entropy over scale * cos(theta_y + margin) vs scale * cos(theta_j).

    Embeddings and class weights are L2-normalized internally.  The margin is
    applied in the arccos-free form cos(t+m) = cos t * cos m - sin t * sin m,
    with cosines clamped away from +-1 before the sine.  margin = 0, scale = 1
    reduces exactly to softmax cross-entropy on cosine logits.
    """
    if not 0.0 <= margin < math.pi / 2:
        raise DataError(f"margin must be in [0, pi/2), got {margin}")
    single = emb.ndim == 1
    if single:
        emb = ad.reshape(emb, (1, emb.shape[0]))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.min() < 0 or labels.max() >= classifier.n_classes:
        raise IndexError(f"label out of range [0, {classifier.n_classes})")
    if emb.shape[0] != labels.shape[0]:
        raise DimensionError("one label per embedding required")

    w = _l2_rows(classifier.weight)
    e = _l2_rows(emb)
    cos = ad.clip(ad.matmul(e, ad.transpose(w)), -1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
    if margin == 0.0:
        logits = cos * ad.tensor(scale)
    else:
        sin = ad.sqrt(ad.tensor(1.0) - cos * cos)
        phi = cos * ad.tensor(math.cos(margin)) - sin * ad.tensor(math.sin(margin))
        onehot = np.zeros((labels.shape[0], classifier.n_classes))
        onehot[np.arange(labels.shape[0]), labels] = 1.0
        oh = ad.tensor(onehot)
        logits = (oh * phi + (ad.tensor(1.0) - oh) * cos) * ad.tensor(scale)
    logp = ad.log_softmax(logits, axis=-1)
    rows = np.arange(labels.shape[0])[:, None]
    picked = ad.take_pairs(logp, rows, labels[:, None])
    return -ad.mean(picked)


def _min_ctc_frames(target: Sequence[int]) -> int:
    repeats = sum(1 for i in range(1, len(target)) if target[i] == target[i - 1])
    return len(target) + repeats


def ctc_loss(logits: Tensor, target: Sequence[int]) -> Tensor:
    """Negative log probability of all alignments of `target` in (T, V+1) logits.

    Index 0 is the blank.  Raises InfeasibleTargetError when the target (with
    mandatory blanks between repeated tokens) cannot fit in T frames.
    """
    if logits.ndim != 2:
        raise DimensionError(f"ctc_loss expects (T, V+1) logits, got {logits.shape}")
    target = list(int(t) for t in target)
    if not target:
        raise DataError("empty CTC target")
    T, n_symbols = logits.shape
    if any(t < 1 or t >= n_symbols for t in target):
        raise IndexError(f"target symbols must lie in [1, {n_symbols - 1}]")
    if T < _min_ctc_frames(target):
        raise InfeasibleTargetError(
            f"target needs >= {_min_ctc_frames(target)} frames, got {T}"
        )

    ext = [BLANK]
    for t in target:
        ext.extend((t, BLANK))
    ext_arr = np.asarray(ext)
    S = len(ext)

    logp = ad.log_softmax(logits, axis=-1)
    # alpha over the extended sequence; only the first two states start live.
    init = np.full(S, NEG)
    init[: min(2, S)] = 0.0
    alpha = ad.take(logp[0], ext_arr) + ad.tensor(init)

    # skip transitions are illegal into blanks and into a repeat of the same label
    skip_mask = np.full(S, NEG)
    for i in range(2, S):
        if ext[i] != BLANK and ext[i] != ext[i - 2]:
            skip_mask[i] = 0.0
    skip_mask_t = ad.tensor(skip_mask)
    neg1 = ad.tensor(np.full(1, NEG))
    neg2 = ad.tensor(np.full(2, NEG))

    for t in range(1, T):
        stay = alpha
        step = ad.concat([neg1, alpha[: S - 1]])
        if S > 2:
            skip = ad.concat([neg2, alpha[: S - 2]]) + skip_mask_t
            merged = ad.logaddexp(ad.logaddexp(stay, step), skip)
        else:
            merged = ad.logaddexp(stay, step)
        alpha = merged + ad.take(logp[t], ext_arr)

    total = ad.logaddexp(alpha[S - 1], alpha[S - 2]) if S >= 2 else alpha[S - 1]
    return -total


def ctc_loss_batch(logits: Tensor, targets: Sequence[Sequence[int]]) -> Tensor:
    """Mean CTC loss over a batch of (B, T, V+1) logits."""
    if logits.ndim != 3 or len(targets) != logits.shape[0]:
        raise DimensionError("need (B, T, V+1) logits and one target per item")
    losses = [ctc_loss(logits[b], targets[b]) for b in range(logits.shape[0])]
    total = losses[0]
    for piece in losses[1:]:
        total = total + piece
    return total * ad.tensor(1.0 / len(losses))


def distill_kl_loss(student_logits: Tensor, teacher_logits: Union[Tensor, np.ndarray]) -> Tensor:
    """Frame-averaged KL(teacher || student) between softmax distributions.

    The teacher side is treated as a constant: no gradient ever flows into it.
    """
    t_data = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(
        teacher_logits, dtype=np.float64
    )
    if t_data.shape != student_logits.shape:
        raise DimensionError(
            f"teacher {t_data.shape} and student {student_logits.shape} logits differ"
        )
    shifted = t_data - t_data.max(axis=-1, keepdims=True)
    t_logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    t_p = np.exp(t_logp)
    s_logp = ad.log_softmax(student_logits, axis=-1)
    per_frame = ad.sum_(ad.tensor(t_p) * (ad.tensor(t_logp) - s_logp), axis=-1)
    return ad.mean(per_frame)


def combined_loss(l_spk: Union[Tensor, float], l_distill: Union[Tensor, float],
                  alpha: float) -> Union[Tensor, float]:
    """Speaker loss plus alpha-weighted distillation loss."""
    if alpha < 0:
        raise DataError(f"alpha must be nonnegative, got {alpha}")
    return l_spk + alpha * l_distill


class RateMatcher(Module):
    """Stride-2 conv (kernel 3, padding 1) that halves the student frame rate."""

    def __init__(self, dim: int):
        super().__init__()
        self.conv = Conv1d(dim, dim, 3, stride=2, padding=1)

    def forward(self, frames: Tensor) -> Tensor:
        """(B, T, d) -> (B, floor((T - 1) / 2) + 1, d); preserves channels."""
        if frames.shape[1] < 3:
            raise InputTooShortError(f"rate matching needs T >= 3, got {frames.shape[1]}")
        out = self.conv(ad.swapaxes(frames, 1, 2))
        return ad.swapaxes(out, 1, 2)


class CtcDecoder(Module):
    """Linear frame classifier over the token inventory plus blank."""

    def __init__(self, dim: int, vocab: int):
        super().__init__()
        self.proj = Linear(dim, vocab + 1)
        self.vocab = vocab

    def forward(self, frames: Tensor) -> Tensor:
        return self.proj(frames)
