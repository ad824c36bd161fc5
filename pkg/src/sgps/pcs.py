"""Probability-based clean-sample selection with a smoothed top-R threshold."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


def clean_probability(z, y, centroids):
    """Softmax weight of the annotated class among the available class centroids.

    Returns 1.0 when class ``y`` has no centroid yet.
    """
    if y not in centroids:
        return 1.0
    classes = sorted(centroids)
    W = np.stack([centroids[m] for m in classes])
    logits = W @ np.asarray(z, dtype=np.float64)
    e = np.exp(logits - logits.max())
    return float(e[classes.index(y)] / e.sum())


def clean_probabilities(Z, labels, centroids):
    """Vectorised :func:`clean_probability` over the rows of ``Z``."""
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels)
    ps = np.ones(len(labels))
    if not centroids:
        return ps
    classes = np.array(sorted(centroids))
    W = np.stack([centroids[int(m)] for m in classes])
    logits = Z @ W.T
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    pos = np.searchsorted(classes, labels)
    pos = np.minimum(pos, len(classes) - 1)
    have = classes[pos] == labels
    ps[have] = probs[np.flatnonzero(have), pos[have]]
    return ps


def percentile(values, R):
    """R-th percentile with linear interpolation between closest ranks."""
    return float(np.percentile(np.asarray(values, dtype=np.float64), R, method="linear"))


@dataclass
class ThresholdState:
    omega: int = 25
    R: float = 50.0
    window: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.omega < 1:
            raise ValueError("omega must be >= 1")
        if not 0.0 <= self.R <= 100.0:
            raise ValueError("R must lie in [0, 100]")

    @property
    def t(self):
        return float(np.mean(self.window)) if self.window else None


def update_threshold(state, batch_ps):
    """Push this batch's R-th percentile into the window and return the window mean."""
    if len(batch_ps) == 0:
        raise ValueError("batch_ps must be nonempty")
    state.window.append(percentile(batch_ps, state.R))
    while len(state.window) > state.omega:
        state.window.popleft()
    return state.t


@dataclass
class BatchPartition:
    clean_ids: np.ndarray
    noisy_ids: np.ndarray
    p_clean: np.ndarray

    @property
    def clean_mask(self):
        m = np.zeros(len(self.p_clean), dtype=bool)
        m[self.clean_ids] = True
        return m


def partition_batch(ps, t, warmup=False):
    ps = np.asarray(ps, dtype=np.float64)
    if warmup or t is None:
        clean = np.ones(len(ps), dtype=bool)
    else:
        clean = ps >= t
    return BatchPartition(np.flatnonzero(clean), np.flatnonzero(~clean), ps)
