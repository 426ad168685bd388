"""Multi-prototype hyperspherical classifier.

Each class owns ``K`` unit prototypes.  Samples are matched to the prototypes
of a class through scaled dot-product attention, the weights are pruned to
the top ``n`` per sample, prototypes are refreshed by a normalized EMA of the
weighted batch embeddings, and class scores take the best weighted
prototype similarity per class.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .ndtensor import Tensor

logger = logging.getLogger(__name__)


class ClassifierError(ValueError):
    pass


@dataclass
class PrototypeBank:
    M: np.ndarray  # [C, K, d_p]

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=np.float64)
        if self.M.ndim != 3:
            raise ValueError(f"prototype bank must be C x K x d, got shape {self.M.shape}")
        if self.num_classes < 2 or self.K < 1:
            raise ValueError(f"need C >= 2 and K >= 1, got C={self.num_classes}, K={self.K}")

    @property
    def num_classes(self) -> int:
        return self.M.shape[0]

    @property
    def K(self) -> int:
        return self.M.shape[1]

    @property
    def dim(self) -> int:
        return self.M.shape[2]

    def matrix(self) -> np.ndarray:
        """All prototypes as a [C*K, d] matrix, class-major."""
        return self.M.reshape(-1, self.dim)

    def class_tensor(self, c: int) -> Tensor:
        return nd.constant(self.M[c])

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(self.M.copy())

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.M, axis=2)


def init_prototypes(C: int, K: int, d_p: int, rng: np.random.Generator) -> PrototypeBank:
    if min(C, K, d_p) <= 0:
        raise ValueError("prototype dimensions must be positive")
    raw = rng.standard_normal((C, K, d_p))
    return PrototypeBank(raw / np.linalg.norm(raw, axis=2, keepdims=True))


class AttentionParams:
    def __init__(self, d_p: int, d_att: int | None, rng: np.random.Generator):
        self.d_att = max(1, d_p // 2) if d_att is None else d_att
        bound = 1.0 / np.sqrt(d_p)
        self.wq = nd.parameter(rng.uniform(-bound, bound, (d_p, self.d_att)), "att.wq")
        self.wk = nd.parameter(rng.uniform(-bound, bound, (d_p, self.d_att)), "att.wk")

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return [("att.wq", self.wq), ("att.wk", self.wk)]


def assignment_weights(att: AttentionParams, Z: Tensor, protos: Tensor) -> Tensor:
    """softmax(Z W_Q (M_c W_K)^T / sqrt(d')) -> [B x K]; ``protos`` is one class's [K x d_p]."""
    if Z.cols != att.wq.rows or protos.cols != att.wk.rows:
        raise nd.ShapeError(f"assignment_weights: Z {Z.shape}, prototypes {protos.shape}, W_Q {att.wq.shape}")
    q = nd.matmul(Z, att.wq)
    k = nd.matmul(protos, att.wk)
    logits = nd.scale(nd.matmul(q, nd.transpose(k)), 1.0 / np.sqrt(att.d_att))
    return nd.softmax_rows(logits)


def topn_mask(W: np.ndarray, n: int) -> np.ndarray:
    """1 for the ``n`` largest entries per row (lower index wins ties)."""
    order = np.argsort(-W, axis=1, kind="stable")[:, :n]
    mask = np.zeros_like(W)
    np.put_along_axis(mask, order, 1.0, axis=1)
    return mask


def prune_weights(W: Tensor, n: int) -> Tensor:
    """Keep the top ``n`` weights of each row and renormalize them to sum to one."""
    if not 1 <= n <= W.cols:
        raise ValueError(f"prune count n={n} outside [1, {W.cols}]")
    if n == W.cols:
        return W
    kept = nd.mul(W, nd.constant(topn_mask(W.data, n)))
    return nd.div_col(kept, nd.reduce("sum", kept, axis=1))


def uniform_weights(B: int, K: int) -> Tensor:
    return nd.constant(np.full((B, K), 1.0 / K))


def ema_update(protos: Tensor, Z: Tensor, labels: np.ndarray, W: Tensor, alpha: float, c: int) -> Tensor:
    """``Norm(alpha * mu_k + (1 - alpha) * sum_{i: y_i = c} W_ik z_i)`` for class ``c``'s prototypes.

    The weighted sum accumulates samples in ascending batch order.  A class
    with no samples in the batch, ``alpha == 1``, or a prototype that
    received zero total weight is left as is.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"EMA rate must lie in [0, 1], got {alpha}")
    members = np.flatnonzero(np.asarray(labels) == c)
    if alpha == 1.0 or members.size == 0:
        return protos
    K = protos.rows
    w_sub = nd.gather_rows(W, members)  # [m, K]
    z_rep = nd.gather_rows(Z, np.repeat(members, K))  # row (i, k) -> z_i
    contrib = nd.mul_col(z_rep, nd.reshape(w_sub, members.size * K, 1))
    seg = np.tile(np.arange(K), members.size)
    pulled = nd.segment_sum(contrib, seg, K)
    mixed = nd.add(nd.scale(protos, alpha), nd.scale(pulled, 1.0 - alpha))
    dead = np.zeros(K, dtype=bool)
    if alpha == 0.0:
        dead = np.linalg.norm(pulled.data, axis=1) < nd.EPS_NORM
    if not dead.any():
        return nd.l2_normalize_rows(mixed)
    # dead rows: swap in the old prototype before normalizing, then pass it through untouched
    live = nd.constant(np.where(dead[:, None], 0.0, 1.0) * np.ones_like(protos.data))
    keep = nd.constant(np.where(dead[:, None], protos.data, 0.0))
    normed = nd.l2_normalize_rows(nd.add(nd.mul(mixed, live), keep))
    return nd.add(nd.mul(normed, live), keep)


def ema_update_bank(bank: PrototypeBank, Z: np.ndarray, labels: np.ndarray, weights: list[np.ndarray], alpha: float) -> PrototypeBank:
    """Non-differentiable convenience wrapper over :func:`ema_update` for a whole bank."""
    Zt = nd.constant(Z)
    new = [ema_update(bank.class_tensor(c), Zt, labels, nd.constant(weights[c]), alpha, c).data for c in range(bank.num_classes)]
    return PrototypeBank(np.stack(new))


def class_scores(protos: Tensor, weights: list[Tensor], Z: Tensor, tau: float, K: int) -> Tensor:
    """Unnormalized ``max_k w_k^(c) exp(mu_k^(c) . z / tau)`` per (sample, class), up to a shared per-row factor."""
    C = len(weights)
    sims = nd.scale(nd.matmul(Z, nd.transpose(protos)), 1.0 / tau)  # [B, C*K]
    shift = nd.constant(-sims.data.max(axis=1, keepdims=True))
    E = nd.exp(nd.add_col(sims, shift))
    cols = []
    for c in range(C):
        w = weights[c]
        if (w.data.sum(axis=1) <= 0).any():
            raise ClassifierError(f"class {c} has an all-zero weight row")
        e_c = nd.gather_cols(E, np.arange(c * K, (c + 1) * K))
        cols.append(nd.reduce("max_over_axis", nd.mul(w, e_c), axis=1))
    return nd.concat(cols, axis=1)


def class_probabilities(protos: Tensor, weights: list[Tensor], Z: Tensor, tau: float) -> Tensor:
    """p(y = c | z) for a batch: [B x C].

    ``protos`` is the class-major [C*K x d_p] prototype matrix and
    ``weights[c]`` the (pruned) [B x K] assignment weights of class ``c``.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    C = len(weights)
    if protos.rows % C:
        raise nd.ShapeError(f"{protos.rows} prototypes do not split into {C} classes")
    Q = class_scores(protos, weights, Z, tau, protos.rows // C)
    return nd.div_col(Q, nd.reduce("sum", Q, axis=1))


def class_probabilities_single(bank: PrototypeBank, weights: np.ndarray, z: np.ndarray, tau: float) -> np.ndarray:
    """Single-sample form: ``weights`` [C x K], ``z`` [d_p] -> p [C]."""
    W = [nd.constant(weights[c].reshape(1, -1)) for c in range(bank.num_classes)]
    p = class_probabilities(nd.constant(bank.matrix()), W, nd.constant(np.asarray(z).reshape(1, -1)), tau)
    return p.data[0]


def nearest_samples(bank: PrototypeBank, Z: np.ndarray, m: int = 5) -> dict[tuple[int, int], list[int]]:
    """For each prototype (c, k), ids of the ``m`` most similar samples, best first."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] == 0:
        raise ValueError("nearest_samples needs a nonempty [N x d] embedding matrix")
    sims = Z @ bank.matrix().T  # [N, C*K]
    order = np.argsort(-sims, axis=0, kind="stable")[:m]
    out = {}
    for c in range(bank.num_classes):
        for k in range(bank.K):
            out[(c, k)] = order[:, c * bank.K + k].tolist()
    return out
