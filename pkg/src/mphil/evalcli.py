"""Evaluation: accuracy, ROC-AUC, cosine-distance separability and reports."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

MAX_PAIRS = 100_000


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.size == 0 or preds.shape != labels.shape:
        raise ValueError(f"accuracy needs equal-length nonempty inputs, got {preds.shape} and {labels.shape}")
    return float(np.mean(preds == labels))


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    ranks = rankdata(scores)  # average ranks handle ties
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def wasserstein1(a, b, rng: np.random.Generator | None = None) -> float:
    """1-D empirical W1: mean |a_(i) - b_(i)| over order statistics.

    When the sample counts differ the larger set is resampled uniformly with
    replacement down to the smaller count.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("wasserstein1 needs nonempty samples")
    if a.size != b.size:
        rng = rng or np.random.default_rng(0)
        if a.size > b.size:
            a = np.sort(rng.choice(a, size=b.size, replace=True))
        else:
            b = np.sort(rng.choice(b, size=a.size, replace=True))
    return float(np.mean(np.abs(a - b)))


def _pair_indices(groups_a: np.ndarray, groups_b: np.ndarray | None, rng, max_pairs: int):
    """(i, j) index arrays for all i<j pairs within ``groups_a`` or all cross pairs, subsampled."""
    if groups_b is None:
        n = groups_a.size
        total = n * (n - 1) // 2
        if total <= max_pairs:
            iu, ju = np.triu_indices(n, k=1)
        else:
            iu = rng.integers(n, size=max_pairs)
            ju = (iu + rng.integers(1, n, size=max_pairs)) % n
        return groups_a[iu], groups_a[ju]
    total = groups_a.size * groups_b.size
    if total <= max_pairs:
        ii, jj = np.meshgrid(np.arange(groups_a.size), np.arange(groups_b.size), indexing="ij")
        return groups_a[ii.ravel()], groups_b[jj.ravel()]
    return groups_a[rng.integers(groups_a.size, size=max_pairs)], groups_b[rng.integers(groups_b.size, size=max_pairs)]


def pair_distances(Z: np.ndarray, labels, seed: int = 0, max_pairs: int = MAX_PAIRS) -> tuple[np.ndarray, np.ndarray]:
    """Cosine distances ``1 - z_i . z_j`` for same-class and cross-class pairs."""
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    intra_i, intra_j, inter_i, inter_j = [], [], [], []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        if idx.size > 1:
            i, j = _pair_indices(idx, None, rng, max_pairs)
            intra_i.append(i)
            intra_j.append(j)
    for a_pos, c in enumerate(classes):
        for d in classes[a_pos + 1:]:
            i, j = _pair_indices(np.flatnonzero(labels == c), np.flatnonzero(labels == d), rng, max_pairs)
            inter_i.append(i)
            inter_j.append(j)

    def dist(ii, jj):
        if not ii:
            return np.zeros(0)
        i, j = np.concatenate(ii), np.concatenate(jj)
        if i.size > max_pairs:
            keep = np.sort(rng.choice(i.size, size=max_pairs, replace=False))
            i, j = i[keep], j[keep]
        return 1.0 - np.einsum("ij,ij->i", Z[i], Z[j])

    return dist(intra_i, intra_j), dist(inter_i, inter_j)


def separability_report(Z, labels, seed: int = 0, max_pairs: int = MAX_PAIRS) -> dict:
    """Mean intra-/inter-class cosine distance and the W1 between the two distance distributions.

    A class set with no same-class pair reports an intra distance of 0.
    """
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise ValueError("separability_report needs at least two classes")
    intra, inter = pair_distances(Z, labels, seed, max_pairs)
    return {
        "intra_class_W1": float(intra.mean()) if intra.size else 0.0,
        "inter_class_W1": float(inter.mean()),
        "distribution_W1": wasserstein1(intra, inter, np.random.default_rng(seed)) if intra.size else float(inter.mean()),
    }


@dataclass
class EvalReport:
    split: str
    accuracy: float
    roc_auc: float | None
    intra_class_W1: float
    inter_class_W1: float
    per_class_counts: dict[str, int]

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(probs: np.ndarray, Z: np.ndarray, labels: Sequence[int], split: str, seed: int = 0) -> EvalReport:
    labels = np.asarray(labels)
    C = probs.shape[1]
    norms = np.linalg.norm(Z, axis=1, keepdims=True)
    Z = Z / np.where(norms > 0, norms, 1.0)
    auc = None
    if C == 2 and np.unique(labels).size == 2:
        auc = roc_auc(probs[:, 1], labels)
    sep = separability_report(Z, labels, seed) if np.unique(labels).size >= 2 else {"intra_class_W1": 0.0, "inter_class_W1": 0.0}
    counts = {str(c): int((labels == c).sum()) for c in range(C)}
    return EvalReport(split, accuracy(probs.argmax(axis=1), labels), auc, sep["intra_class_W1"], sep["inter_class_W1"], counts)
