"""Training objectives and their gradients with respect to the batch embeddings.

All similarities are plain dot products of unit embeddings, and every pair
sum runs over ordered pairs ``i != j`` without normalisation.  Memory entries
and prototypes are constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from sgps.membank import ABSENT


@dataclass
class LossConfig:
    margin_lambda: float = 0.5
    tau: float = 0.02
    delta: float = 0.1
    gamma1: float = 1.0
    gamma2: float = 0.1

    def __post_init__(self):
        vals = (self.margin_lambda, self.tau, self.delta, self.gamma1, self.gamma2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("loss parameters must be finite")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.margin_lambda <= 1.0:
            raise ValueError("margin_lambda must lie in [0, 1]")
        if self.delta < 0 or self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("delta, gamma1 and gamma2 must be non-negative")


@dataclass
class LossResult:
    """Scalar loss and its gradient; ``grad`` rows follow the caller's embedding order."""

    value: float
    grad: np.ndarray
    parts: dict = field(default_factory=dict)


def _pair_coefficients(S, same, lam, valid=True):
    hinge = (~same) & valid & (S > lam)
    value = float(np.sum((S - lam)[hinge]) - np.sum(S[same]))
    return value, hinge.astype(np.float64) - same.astype(np.float64)


def contrastive_batch(Z, labels, clean_ids, cfg):
    """Hinged negatives minus positives over ordered pairs of clean batch samples."""
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels)
    clean_ids = np.asarray(clean_ids, dtype=np.int64)
    grad = np.zeros_like(Z)
    if len(clean_ids) < 2:
        return LossResult(0.0, grad)
    Zc = Z[clean_ids]
    yc = labels[clean_ids]
    S = Zc @ Zc.T
    offdiag = ~np.eye(len(clean_ids), dtype=bool)
    same = (yc[:, None] == yc[None, :]) & offdiag
    value, coef = _pair_coefficients(S, same, cfg.margin_lambda, offdiag)
    # each S_ij appears for (i, j) and (j, i)
    grad[clean_ids] = 2.0 * coef @ Zc
    return LossResult(value, grad)


def contrastive_bank(Z, labels, clean_ids, memory, cfg, clean_only=True):
    """Same pair structure as :func:`contrastive_batch` against cross-batch memory entries."""
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels)
    clean_ids = np.asarray(clean_ids, dtype=np.int64)
    grad = np.zeros_like(Z)
    if len(memory) == 0 or len(clean_ids) == 0:
        return LossResult(0.0, grad)
    V, vy, vclean, *_ = memory.arrays()
    if clean_only:
        V, vy = V[vclean], vy[vclean]
    if len(V) == 0:
        return LossResult(0.0, grad)
    S = Z[clean_ids] @ V.T
    same = labels[clean_ids][:, None] == vy[None, :]
    value, coef = _pair_coefficients(S, same, cfg.margin_lambda)
    grad[clean_ids] = coef @ V
    return LossResult(value, grad)


def _sgps(z, r, N, cfg):
    z = np.asarray(z, dtype=np.float64)
    N = np.asarray(N, dtype=np.float64).reshape(-1, len(z))
    if len(N) == 0:
        return 0.0, np.zeros_like(z), np.zeros_like(N)
    logits = np.concatenate([[(z @ r - cfg.delta) / cfg.tau], N @ z / cfg.tau])
    m = logits.max()
    e = np.exp(logits - m)
    rest = e[1:].sum()
    total = e[0] + rest
    # when the prototype logit dominates, log1p and 1 - p0 = rest / total avoid cancellation
    if logits[0] == m:
        value = float(np.log1p(rest))
    else:
        value = float(m - logits[0] + np.log(total))
    p = e / total
    grad_z = (p[1:] @ N - (rest / total) * r) / cfg.tau
    grad_N = p[1:, None] * z[None, :] / cfg.tau
    return value, grad_z, grad_N


def sgps_batch(anchor, prototype, negatives, cfg):
    """Prototype-vs-negatives softmax loss for one noisy anchor.

    ``grad`` row 0 is the anchor gradient and row ``1 + k`` the gradient of
    negative ``k``; the prototype is treated as a constant.
    """
    anchor = np.asarray(anchor, dtype=np.float64)
    value, gz, gN = _sgps(anchor, np.asarray(prototype, dtype=np.float64), negatives, cfg)
    return LossResult(value, np.vstack([gz[None, :], gN]))


def sgps_bank(anchor, prototype, memory_negatives, cfg):
    """As :func:`sgps_batch` with constant memory negatives; ``grad`` has the anchor row only."""
    anchor = np.asarray(anchor, dtype=np.float64)
    value, gz, _ = _sgps(anchor, np.asarray(prototype, dtype=np.float64), memory_negatives, cfg)
    return LossResult(value, gz[None, :])


def negative_mask(label, cB, cT, labels, cBs, cTs, sources="both"):
    """Candidates with a different annotated label and a different subgroup in every active labelling."""
    mask = np.asarray(labels) != label
    if sources in ("both", "B"):
        mask &= (np.asarray(cBs) != cB) | (cB == ABSENT)
    if sources in ("both", "T"):
        mask &= (np.asarray(cTs) != cT) | (cT == ABSENT)
    return mask


def total_loss(Z, labels, partition, memory, prototypes, cfg, cB=None, cT=None, sources="both"):
    """Clean contrastive terms plus weighted prototype losses over noisy anchors.

    ``prototypes`` maps batch position to prototype vector for every noisy
    sample that received a positive set; ``cB``/``cT`` are the batch's
    subgroup labels (-1 where absent).
    """
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(Z)
    cB = np.full(n, ABSENT) if cB is None else np.asarray(cB)
    cT = np.full(n, ABSENT) if cT is None else np.asarray(cT)

    lb = contrastive_batch(Z, labels, partition.clean_ids, cfg)
    lm = contrastive_bank(Z, labels, partition.clean_ids, memory, cfg)
    grad = lb.grad + lm.grad
    clean_value = lb.value + lm.value

    sb_total = 0.0
    sm_total = 0.0
    if prototypes and (cfg.gamma1 > 0 or cfg.gamma2 > 0):
        if len(memory):
            V, vy, _, vB, vT, _ = memory.arrays()
        for i in sorted(prototypes):
            r = np.asarray(prototypes[i], dtype=np.float64)
            if cfg.gamma1 > 0:
                neg = negative_mask(labels[i], cB[i], cT[i], labels, cB, cT, sources)
                neg[i] = False
                pos = np.flatnonzero(neg)
                res = sgps_batch(Z[i], r, Z[pos], cfg)
                sb_total += res.value
                grad[i] += cfg.gamma1 * res.grad[0]
                grad[pos] += cfg.gamma1 * res.grad[1:]
            if cfg.gamma2 > 0 and len(memory):
                neg = negative_mask(labels[i], cB[i], cT[i], vy, vB, vT, sources)
                res = sgps_bank(Z[i], r, V[neg], cfg)
                sm_total += res.value
                grad[i] += cfg.gamma2 * res.grad[0]
    noise_value = cfg.gamma1 * sb_total + cfg.gamma2 * sm_total
    parts = {
        "batch": lb.value,
        "bank": lm.value,
        "clean": clean_value,
        "sgps_batch": sb_total,
        "sgps_bank": sm_total,
        "noise": noise_value,
    }
    return LossResult(clean_value + noise_value, grad, parts)
