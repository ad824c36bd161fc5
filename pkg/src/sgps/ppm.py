"""Positive-set selection from subgroup labels and prototype aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sgps.numkit import l2_normalize, softmax

MODES = ("mean", "max", "softmax")
SOURCES = ("both", "B", "T")


@dataclass
class PositiveSet:
    anchor_id: int
    member_ids: np.ndarray
    member_embeddings: np.ndarray


@dataclass
class Prototype:
    vector: np.ndarray
    mode: str


def _draw(pool, k, rng):
    k = min(k, len(pool))
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    return np.asarray(pool)[rng.choice(len(pool), size=k, replace=False)]


def select_positives(anchor_id, snapshot, bank, K, rng, sources="both"):
    """Draw up to ``K`` same-subgroup ids for ``anchor_id``.

    With ``sources="both"`` half of ``K`` (rounded up) comes from the anchor's
    ``cB`` group and the rest from its ``cT`` cell; a short pool is backfilled
    from the other one.  Returns ``None`` when no candidate exists.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if sources not in SOURCES:
        raise ValueError(f"unknown sources {sources!r}")
    if snapshot is None or snapshot.cB[anchor_id] < 0:
        return None

    def pool(kind):
        label = int((snapshot.cB if kind == "B" else snapshot.cT)[anchor_id])
        p = snapshot.pool(kind, label)
        return p[p != anchor_id]

    pool_b = pool("B") if sources in ("both", "B") else np.zeros(0, dtype=np.int64)
    pool_t = pool("T") if sources in ("both", "T") else np.zeros(0, dtype=np.int64)
    if sources == "both":
        k_b, k_t = (K + 1) // 2, K // 2
    elif sources == "B":
        k_b, k_t = K, 0
    else:
        k_b, k_t = 0, K

    first = _draw(pool_b, k_b, rng)
    rest_t = np.setdiff1d(pool_t, first, assume_unique=True)
    second = _draw(rest_t, k_t + (k_b - len(first)), rng)
    chosen = np.concatenate([first, second])
    if len(chosen) < K:
        rest_b = np.setdiff1d(pool_b, chosen, assume_unique=True)
        chosen = np.concatenate([chosen, _draw(rest_b, K - len(chosen), rng)])
    if len(chosen) == 0:
        return None
    chosen = chosen.astype(np.int64)
    return PositiveSet(int(anchor_id), chosen, bank.features[chosen].copy())


def aggregate(mode, anchor_embedding, members):
    """Collapse a positive set into one unit prototype (mean, most-similar member, or correlation-softmax)."""
    F = np.asarray(members, dtype=np.float64)
    if F.ndim != 2 or len(F) == 0:
        raise ValueError("members must be a nonempty 2-D array")
    if mode == "mean":
        vec = l2_normalize(F.mean(axis=0))
    elif mode == "max":
        vec = F[int(np.argmax(F @ np.asarray(anchor_embedding, dtype=np.float64)))].copy()
    elif mode == "softmax":
        vec = l2_normalize(softmax_weights(F) @ F)
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    return Prototype(vec, mode)


def softmax_weights(F):
    """Weights from each member's summed correlation to the other members, scaled by 1/K."""
    k = len(F)
    corr = F @ F.T - np.eye(k)
    return softmax(corr.sum(axis=1) / k)
