"""Verification back end: trials, cosine scores, normalization, calibration, metrics.

Score normalization is the symmetric adaptive form: the raw score is z-normed
against each side's top-k highest imposter-cohort scores and the two z-scores
are averaged.  Calibration is a logistic model over the raw score plus six
quality features.  EER interpolates linearly between the bracketing ROC points;
minDCF sweeps every decision threshold including accept-all and reject-all.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import (
    DegenerateCohortError,
    DegenerateEmbeddingError,
    DegenerateLabelsError,
    MissingEmbeddingError,
    TrialParseError,
)

EMB_STORE_MAGIC = b"CFSVEMB1"
EMB_DIM = 256


@dataclass
class Trial:
    label: int  # 1 = target, 0 = nontarget
    enroll: str
    test: str


@dataclass
class TrialList:
    trials: list[Trial]

    def __len__(self):
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)

    @property
    def labels(self) -> np.ndarray:
        return np.array([t.label for t in self.trials], dtype=np.int64)


@dataclass
class ScoreRecord:
    """One trial's scores plus the quality features calibration can use."""

    raw: float
    snorm: Optional[float] = None
    calibrated: Optional[float] = None
    duration_enroll: float = 0.0
    duration_test: float = 0.0
    snr_enroll: float = 0.0
    snr_test: float = 0.0
    magnitude_enroll: float = 0.0
    magnitude_test: float = 0.0

    def quality_vector(self) -> np.ndarray:
        return np.array(
            [
                self.duration_enroll,
                self.duration_test,
                self.snr_enroll,
                self.snr_test,
                self.magnitude_enroll,
                self.magnitude_test,
            ]
        )


def parse_trials(path: Union[str, Path]) -> TrialList:
    """Lines of "label enroll test" with label in {0, 1}, whitespace-separated."""
    trials = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise TrialParseError(i, f"expected 3 fields, got {len(parts)}")
        if parts[0] not in ("0", "1"):
            raise TrialParseError(i, f"label must be 0 or 1, got {parts[0]!r}")
        trials.append(Trial(int(parts[0]), parts[1], parts[2]))
    return TrialList(trials)


def cosine_score(e1: np.ndarray, e2: np.ndarray) -> float:
    """Inner product of the L2-normalized embeddings, in [-1, 1]."""
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    n1, n2 = np.linalg.norm(e1), np.linalg.norm(e2)
    if n1 == 0.0 or n2 == 0.0:
        raise DegenerateEmbeddingError("cannot cosine-score a zero embedding")
    return float(np.dot(e1, e2) / (n1 * n2))


def adapted_snorm(
    raw: float,
    enroll_cohort_scores: Sequence[float],
    test_cohort_scores: Sequence[float],
    top_k: int = 700,
) -> float:
    """Symmetric adaptive normalization against each side's top-k cohort scores."""
    enroll = np.asarray(enroll_cohort_scores, dtype=np.float64)
    test = np.asarray(test_cohort_scores, dtype=np.float64)
    if top_k < 2 or enroll.size < top_k or test.size < top_k:
        raise DegenerateCohortError(
            f"need cohorts of >= top_k >= 2 scores (top_k={top_k}, "
            f"sizes {enroll.size}/{test.size})"
        )
    parts = []
    for cohort in (enroll, test):
        top = np.sort(cohort)[-top_k:]
        mu, sigma = float(top.mean()), float(top.std())
        if sigma == 0.0:
            raise DegenerateCohortError("zero-variance cohort")
        parts.append((raw - mu) / sigma)
    return 0.5 * (parts[0] + parts[1])


# -- metrics ---------------------------------------------------------------------


def _check_two_classes(labels: np.ndarray) -> None:
    if labels.size == 0 or labels.min() == labels.max():
        raise DegenerateLabelsError("need both target and nontarget trials")


def _roc_points(scores: np.ndarray, labels: np.ndarray):
    """FAR/FRR at every unique threshold, accept iff score >= threshold."""
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    n_tar = int((labels == 1).sum())
    n_non = int((labels == 0).sum())
    uniq = np.unique(s)[::-1]
    # cumulative accepts scanning thresholds from high to low
    far, frr = [], []
    for th in uniq:
        acc = s >= th
        far.append((y == 0)[acc].sum() / n_non)
        frr.append(((y == 1) & ~acc).sum() / n_tar)
    return np.array(far), np.array(frr), uniq


def eer(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Equal error rate in percent, linearly interpolated at the FAR/FRR crossing."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_two_classes(labels)
    n_tar = int((labels == 1).sum())
    n_non = int((labels == 0).sum())
    uniq = np.unique(scores)[::-1]
    tar_counts = np.array([(scores[labels == 1] >= th).sum() for th in uniq])
    non_counts = np.array([(scores[labels == 0] >= th).sum() for th in uniq])
    far = non_counts / n_non
    frr = 1.0 - tar_counts / n_tar
    # prepend the reject-everything operating point
    far = np.concatenate([[0.0], far])
    frr = np.concatenate([[1.0], frr])
    diff = far - frr
    if diff[-1] < 0:  # even accept-almost-everything rejects targets; take endpoint
        return float(100.0 * max(far[-1], frr[-1]))
    idx = int(np.argmax(diff >= 0))
    if diff[idx] == 0:
        return float(100.0 * far[idx])
    f1, r1 = far[idx - 1], frr[idx - 1]
    f2, r2 = far[idx], frr[idx]
    t = (r1 - f1) / ((r1 - f1) - (r2 - f2))
    return float(100.0 * (f1 + t * (f2 - f1)))


def min_dcf(
    scores: Sequence[float],
    labels: Sequence[int],
    p_target: float = 0.01,
    c_miss: float = 1.0,
    c_fa: float = 1.0,
) -> float:
    """Minimum normalized detection cost over all decision thresholds."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_two_classes(labels)
    far, frr, _ = _roc_points(scores, labels)
    # accept-all (threshold below min) and reject-all (above max) endpoints
    far = np.concatenate([far, [1.0], [0.0]])
    frr = np.concatenate([frr, [0.0], [1.0]])
    cost = c_miss * p_target * frr + c_fa * (1.0 - p_target) * far
    return float(cost.min() / min(c_miss * p_target, c_fa * (1.0 - p_target)))


# -- calibration -----------------------------------------------------------------


@dataclass
class QmfModel:
    """Logistic calibration over [raw score, 6 quality features]."""

    weights: np.ndarray  # (7,)
    bias: float
    feat_mean: np.ndarray
    feat_std: np.ndarray

    def transform(self, record: ScoreRecord) -> float:
        x = np.concatenate([[record.raw], record.quality_vector()])
        z = (x - self.feat_mean) / self.feat_std
        return float(z @ self.weights + self.bias)

    @property
    def raw_score_weight(self) -> float:
        return float(self.weights[0] / self.feat_std[0])


def _fit_logistic(x: np.ndarray, y: np.ndarray, tol: float = 1e-8,
                  max_iters: int = 200000, lr: float = 1.0) -> tuple[np.ndarray, float]:
    """Full-batch gradient descent on mean cross-entropy to |delta loss| < tol."""
    n, d = x.shape
    w = np.zeros(d)
    b = 0.0
    prev = np.inf
    for _ in range(max_iters):
        z = x @ w + b
        p = 1.0 / (1.0 + np.exp(-z))
        eps = 1e-12
        loss = -np.mean(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps))
        if abs(prev - loss) < tol:
            break
        prev = loss
        g = p - y
        w -= lr * (x.T @ g) / n
        b -= lr * g.mean()
    return w, b


def qmf_fit(records: Sequence[ScoreRecord], labels: Sequence[int]) -> QmfModel:
    """Fit the calibration model on labelled trials with quality features."""
    labels = np.asarray(labels, dtype=np.float64)
    _check_two_classes(labels.astype(np.int64))
    x = np.stack([np.concatenate([[r.raw], r.quality_vector()]) for r in records])
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0] = 1.0
    w, b = _fit_logistic((x - mean) / std, labels)
    return QmfModel(w, b, mean, std)


def qmf_apply(model: QmfModel, record: ScoreRecord) -> ScoreRecord:
    record.calibrated = model.transform(record)
    return record


# -- embedding store ---------------------------------------------------------------

# Binary layout: magic, u32 version, u32 count, u32 dim, then per entry
# u16 id length + id bytes + dim little-endian float32 values.


def save_embeddings(path: Union[str, Path], embeddings: dict[str, np.ndarray],
                    dim: int = EMB_DIM) -> None:
    with open(path, "wb") as f:
        f.write(EMB_STORE_MAGIC)
        f.write(struct.pack("<III", 1, len(embeddings), dim))
        for key, vec in embeddings.items():
            vec = np.asarray(vec, dtype="<f4")
            if vec.shape != (dim,):
                raise DegenerateEmbeddingError(f"{key}: expected ({dim},), got {vec.shape}")
            kb = key.encode("utf-8")
            f.write(struct.pack("<H", len(kb)))
            f.write(kb)
            f.write(vec.tobytes())


def load_embeddings(path: Union[str, Path]) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != EMB_STORE_MAGIC:
        raise MissingEmbeddingError(f"{path}: bad embedding store magic")
    version, count, dim = struct.unpack_from("<III", data, 8)
    off = 20
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", data, off)
        off += 2
        key = data[off : off + klen].decode("utf-8")
        off += klen
        out[key] = np.frombuffer(data, dtype="<f4", count=dim, offset=off).copy()
        off += 4 * dim
    return out


def resolve_embedding(store: dict[str, np.ndarray], key: str) -> np.ndarray:
    if key not in store:
        raise MissingEmbeddingError(f"no embedding for id {key!r}")
    return store[key].astype(np.float64)


def score_trials(store: dict[str, np.ndarray], trials: TrialList) -> np.ndarray:
    return np.array(
        [cosine_score(resolve_embedding(store, t.enroll), resolve_embedding(store, t.test))
         for t in trials]
    )


def snorm_scores(
    store: dict[str, np.ndarray],
    trials: TrialList,
    cohort: dict[str, np.ndarray],
    top_k: int,
) -> np.ndarray:
    """Adapted s-norm of every trial against a shared imposter cohort."""
    cohort_mat = np.stack([v.astype(np.float64) for v in cohort.values()])
    norms = np.linalg.norm(cohort_mat, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateEmbeddingError("cohort contains a zero embedding")
    cohort_mat /= norms

    def cohort_scores(key: str) -> np.ndarray:
        e = resolve_embedding(store, key)
        e = e / np.linalg.norm(e)
        return cohort_mat @ e

    cache: dict[str, np.ndarray] = {}
    out = []
    for t in trials:
        for k in (t.enroll, t.test):
            if k not in cache:
                cache[k] = cohort_scores(k)
        raw = cosine_score(resolve_embedding(store, t.enroll), resolve_embedding(store, t.test))
        out.append(adapted_snorm(raw, cache[t.enroll], cache[t.test], top_k=top_k))
    return np.array(out)


def write_score_file(path: Union[str, Path], trials: TrialList, scores: np.ndarray) -> None:
    lines = [f"{t.enroll} {t.test} {s:.17g}" for t, s in zip(trials, scores)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
