"""Training objective: classification + prototype separation + beta * prototype matching."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .ndtensor import Tensor

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class LossConfig:
    beta: float = 0.1
    tau: float = 0.1

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")


class ClampCounter:
    """Counts probabilities floored at PROB_FLOOR by :func:`loss_cls`."""

    def __init__(self):
        self.count = 0


CLAMPS = ClampCounter()
_WARNED: set[str] = set()


def _warn_once(msg: str) -> None:
    if msg not in _WARNED:
        _WARNED.add(msg)
        logger.warning(msg)


def _class_mask(labels: np.ndarray, C: int, K: int) -> np.ndarray:
    """[B x C*K] indicator of the true class's prototypes."""
    labels = np.asarray(labels, dtype=np.int64)
    owner = np.repeat(np.arange(C), K)
    return (owner[None, :] == labels[:, None]).astype(np.float64)


def _logsumexp_rows(sims: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """log sum_j mask_ij exp(sims_ij) per row, shifted by the (masked) row max."""
    vals = sims.data if mask is None else np.where(mask > 0, sims.data, -np.inf)
    m = vals.max(axis=1, keepdims=True)
    if mask is None:
        E = nd.exp(nd.add_col(sims, nd.constant(-m)))
    else:
        # masked-out entries are shifted to exp(-800) == 0.0 so they cannot overflow
        shift = np.where(mask > 0, -m, -sims.data - 800.0)
        E = nd.mul(nd.exp(nd.add(sims, nd.constant(shift))), nd.constant(mask))
    return nd.add_col(nd.log(nd.reduce("sum", E, axis=1)), nd.constant(m))


def loss_ipm(Z: Tensor, labels, protos: Tensor, tau: float, C: int) -> Tensor:
    """Contrast each sample's similarity to all true-class prototypes against all prototypes."""
    if Z.rows == 0:
        raise ValueError("loss_ipm: empty batch")
    K = protos.rows // C
    sims = nd.scale(nd.matmul(Z, nd.transpose(protos)), 1.0 / tau)
    log_num = _logsumexp_rows(sims, _class_mask(labels, C, K))
    log_den = _logsumexp_rows(sims)
    return nd.scale(nd.reduce("mean", nd.sub(log_num, log_den)), -1.0)


def loss_ps(protos: Tensor, tau: float, C: int) -> Tensor:
    """Pull same-class prototypes together and push other classes' apart."""
    K = protos.rows // C
    owner = np.repeat(np.arange(C), K)
    same = owner[:, None] == owner[None, :]
    E = nd.exp(nd.scale(nd.matmul(protos, nd.transpose(protos)), 1.0 / tau))
    den = nd.reduce("sum", nd.mul(E, nd.constant((~same).astype(np.float64))), axis=1)
    if K == 1:
        _warn_once("loss_ps with K=1: intra-class sum is empty, using exp(1/tau) self-similarity")
        log_num = nd.constant(np.full((C, 1), 1.0 / tau))
    else:
        off_diag = same & ~np.eye(C * K, dtype=bool)
        log_num = nd.log(nd.reduce("sum", nd.mul(E, nd.constant(off_diag.astype(np.float64))), axis=1))
    log_ratio = nd.sub(log_num, nd.log(den))
    return nd.scale(nd.reduce("mean", log_ratio), -1.0)


def loss_cls(p: Tensor, labels, counter: ClampCounter | None = None) -> Tensor:
    """``-(1 / (B C)) sum_i log p_i[y_i]``."""
    B, C = p.shape
    onehot = np.zeros((B, C))
    onehot[np.arange(B), np.asarray(labels, dtype=np.int64)] = 1.0
    p_true = nd.reduce("sum", nd.mul(p, nd.constant(onehot)), axis=1)
    p_true, clamped = nd.clamp_min(p_true, PROB_FLOOR)
    if clamped:
        (counter or CLAMPS).count += clamped
    return nd.scale(nd.reduce("sum", nd.log(p_true)), -1.0 / (B * C))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Conventional mean softmax cross-entropy, used by the ERM reference."""
    B, C = logits.shape
    p = nd.softmax_rows(logits)
    onehot = np.zeros((B, C))
    onehot[np.arange(B), np.asarray(labels, dtype=np.int64)] = 1.0
    p_true, _ = nd.clamp_min(nd.reduce("sum", nd.mul(p, nd.constant(onehot)), axis=1), PROB_FLOOR)
    return nd.scale(nd.reduce("mean", nd.log(p_true)), -1.0)


def total_loss(l_c: Tensor, l_ps: Tensor | None, l_ipm: Tensor | None, beta: float) -> Tensor:
    """``L_C + L_PS + beta * L_IPM``; a ``None`` term is dropped (ablations)."""
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    out = l_c
    if l_ps is not None:
        out = nd.add(out, l_ps)
    if l_ipm is not None:
        out = nd.add(out, nd.scale(l_ipm, beta))
    return out
