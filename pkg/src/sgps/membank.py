"""Cross-batch FIFO memory and the full-dataset momentum feature bank."""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from sgps.numkit import l2_normalize

ABSENT = -1


@dataclass(frozen=True)
class MemoryEntry:
    sample_id: int
    embedding: np.ndarray
    noisy_label: int
    clean_flag: bool
    cB: Optional[int] = None
    cT: Optional[int] = None


class CrossBatchMemory:
    """Fixed-capacity queue of recent embeddings with their labels and clean flags."""

    def __init__(self, capacity):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.entries = deque()
        self._cache = None

    def __len__(self):
        return len(self.entries)

    def push(self, batch_entries):
        """Enqueue entries in order; return the entries evicted oldest-first."""
        evicted = []
        for e in batch_entries:
            self.entries.append(e)
            if len(self.entries) > self.capacity:
                evicted.append(self.entries.popleft())
        if batch_entries:
            self._cache = None
        return evicted

    def arrays(self):
        """Stacked view ``(embeddings, labels, clean, cB, cT, ids)``; absent subgroup labels are -1."""
        if self._cache is None:
            es = list(self.entries)
            if es:
                emb = np.stack([e.embedding for e in es])
            else:
                emb = np.zeros((0, 0))
            self._cache = (
                emb,
                np.array([e.noisy_label for e in es], dtype=np.int64),
                np.array([e.clean_flag for e in es], dtype=bool),
                np.array([ABSENT if e.cB is None else e.cB for e in es], dtype=np.int64),
                np.array([ABSENT if e.cT is None else e.cT for e in es], dtype=np.int64),
                np.array([e.sample_id for e in es], dtype=np.int64),
            )
        return self._cache

    def centroids(self):
        """Normalised centroid of the clean entries of every class present."""
        emb, labels, clean, *_ = self.arrays()
        out = {}
        if not clean.any():
            return out
        for m in np.unique(labels[clean]):
            out[int(m)] = l2_normalize(emb[clean & (labels == m)].mean(axis=0))
        return out


def memory_push(mem, batch_entries):
    return mem.push(batch_entries)


def class_centroid(mem, m):
    """Normalised mean of the clean entries labelled ``m``, or ``None`` if there are none."""
    emb, labels, clean, *_ = mem.arrays()
    if len(labels) == 0:
        return None
    sel = clean & (labels == m)
    if not sel.any():
        return None
    return l2_normalize(emb[sel].mean(axis=0))


class FeatureBank:
    """One momentum-averaged unit vector per training sample."""

    def __init__(self, n, d):
        self.features = np.zeros((n, d))
        self.initialized = np.zeros(n, dtype=bool)
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.features)

    @property
    def d(self):
        return self.features.shape[1]

    def update(self, sample_id, new_embedding, alpha):
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0 <= sample_id < len(self.features):
            raise IndexError(f"sample_id {sample_id} out of range")
        new = np.asarray(new_embedding, dtype=np.float64)
        with self._lock:
            if not self.initialized[sample_id] or alpha == 1.0:
                self.features[sample_id] = new
                self.initialized[sample_id] = True
            elif alpha == 0.0:
                return
            else:
                self.features[sample_id] = l2_normalize(alpha * new + (1.0 - alpha) * self.features[sample_id])

    def update_many(self, sample_ids, new_embeddings, alpha):
        for sid, z in zip(sample_ids, new_embeddings):
            self.update(int(sid), z, alpha)

    def snapshot(self):
        """Consistent copy ``(features, initialized)`` taken under the writer lock."""
        with self._lock:
            return self.features.copy(), self.initialized.copy()


def bank_update(bank, sample_id, new_embedding, alpha):
    bank.update(sample_id, new_embedding, alpha)
