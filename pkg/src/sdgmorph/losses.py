"""Class-weighted cross-entropy and supervised contrastive losses."""

from __future__ import annotations

import logging

import numpy as np

from . import tensor as T
from .tensor import ContractError, Var

log = logging.getLogger(__name__)

NUM_CLASSES = 3


def class_weights_inverse_frequency(counts) -> np.ndarray:
    """w_c = total / (C * n_c), rescaled to mean 1."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise ContractError("counts must be a nonempty 1-D sequence")
    if np.any(counts < 1):
        raise ContractError(f"every class needs at least one sample, got {counts.tolist()}")
    raw = counts.sum() / (counts.size * counts)
    return raw / raw.mean()


def _check_labels(labels, n, num_classes=NUM_CLASSES) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ContractError(f"expected {n} labels, got shape {labels.shape}")
    if np.any((labels < 0) | (labels >= num_classes)):
        raise ContractError(f"labels must lie in [0, {num_classes}), got {labels.tolist()}")
    return labels


def weighted_cross_entropy(logits: Var, labels, weights) -> Var:
    """(1/B) sum_i w[y_i] * -log softmax(logits_i)[y_i]."""
    B, K = logits.shape
    if B < 1:
        raise ContractError("empty batch")
    labels = _check_labels(labels, B, K)
    weights = np.asarray(weights, dtype=np.float64)
    coef = np.zeros((B, K))
    coef[np.arange(B), labels] = -weights[labels] / B
    return T.sum(T.mul(T.log_softmax(logits, axis=1), coef))


def supcon_coefficients(labels, weights) -> np.ndarray:
    """Matrix c with c[i, j] = -w[y_i] / |P(i)| for positives j of anchor i."""
    labels = np.asarray(labels)
    n = labels.size
    positives = (labels[:, None] == labels[None, :]) & ~np.eye(n, dtype=bool)
    counts = positives.sum(axis=1)
    lonely = np.flatnonzero(counts == 0)
    if lonely.size:
        log.warning("anchors %s have no positives; they contribute 0", lonely.tolist())
    w = np.asarray(weights, dtype=np.float64)[labels]
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(counts > 0, -w / np.maximum(counts, 1), 0.0)
    return positives * scale[:, None]


def supcon_loss(q: Var, labels, tau: float, weights) -> Var:
    """Weighted supervised contrastive loss over ``2N`` unit-norm rows of ``q``.

    Summed (not averaged) over anchors; the anchor's class weight scales its
    term. Anchors without positives contribute zero.
    """
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    n, _ = q.shape
    if n < 2:
        raise ContractError("supcon_loss needs at least two embeddings")
    labels = _check_labels(labels, n, len(np.atleast_1d(weights)))
    sim = T.scale(T.matmul(q, T.transpose(q)), 1.0 / tau)
    off_diag = ~np.eye(n, dtype=bool)
    lse = T.logsumexp(sim, axis=1, mask=off_diag)
    log_prob = T.sub(sim, T.broadcast_to(T.reshape(lse, (n, 1)), (n, n)))
    return T.sum(T.mul(log_prob, supcon_coefficients(labels, weights)))


def total_loss(l_ce: Var, l_scl, lam: float) -> Var:
    if lam < 0:
        raise ContractError(f"lambda must be >= 0, got {lam}")
    if l_scl is None:
        return l_ce
    return T.add(l_ce, T.scale(l_scl, lam))
