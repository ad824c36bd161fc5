"""Synthetic labelled vector datasets, label-noise injectors and the dataset file format."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from sgps.numkit import Rng, l2_normalize

MAGIC = "sgps-dataset v1"


class DatasetParseError(ValueError):
    def __init__(self, lineno, msg):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class Sample(NamedTuple):
    id: int
    gt_label: int
    noisy_label: int
    x: np.ndarray
    is_train: bool


@dataclass(eq=False)
class Dataset:
    """Column-oriented sample store; row ``i`` has id ``i``."""

    X: np.ndarray
    gt_labels: np.ndarray
    noisy_labels: np.ndarray
    is_train: np.ndarray
    M: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise ValueError("X must be a 2-D array")
        self.gt_labels = np.asarray(self.gt_labels, dtype=np.int64)
        self.noisy_labels = np.asarray(self.noisy_labels, dtype=np.int64)
        self.is_train = np.asarray(self.is_train, dtype=bool)
        n = len(self.gt_labels)
        if not (len(self.noisy_labels) == len(self.is_train) == self.X.shape[0] == n):
            raise ValueError("column lengths differ")

    @property
    def N(self):
        return len(self.gt_labels)

    @property
    def D(self):
        return self.X.shape[1]

    @property
    def ids(self):
        return np.arange(self.N)

    def __len__(self):
        return self.N

    def __iter__(self):
        for i in range(self.N):
            yield self.sample(i)

    def sample(self, i):
        return Sample(i, int(self.gt_labels[i]), int(self.noisy_labels[i]), self.X[i], bool(self.is_train[i]))

    def copy(self):
        return Dataset(self.X.copy(), self.gt_labels.copy(), self.noisy_labels.copy(), self.is_train.copy(), self.M)

    def train_classes(self):
        return np.unique(self.gt_labels[self.is_train])

    def test_classes(self):
        return np.unique(self.gt_labels[~self.is_train])

    def noise_rate(self):
        """Fraction of train samples whose annotated label differs from the ground truth."""
        tr = self.is_train
        if not tr.any():
            return 0.0
        return float(np.mean(self.noisy_labels[tr] != self.gt_labels[tr]))

    def equals(self, other):
        return (
            self.M == other.M
            and self.X.shape == other.X.shape
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.gt_labels, other.gt_labels)
            and np.array_equal(self.noisy_labels, other.noisy_labels)
            and np.array_equal(self.is_train, other.is_train)
        )


def gen_mixture(m_train, m_test, per_class, d_in, spread, seed):
    """Isotropic Gaussian blobs around unit-norm class centres.

    The first ``m_train`` classes form the train split, the rest the test split.
    """
    if m_train < 1 or m_test < 1 or per_class < 1 or d_in < 1:
        raise ValueError("m_train, m_test, per_class and d_in must be >= 1")
    if not spread > 0:
        raise ValueError("spread must be positive")
    rng = Rng(seed)
    m = m_train + m_test
    centers = l2_normalize(rng.child("centers").normal(size=(m, d_in)))
    labels = np.repeat(np.arange(m), per_class)
    X = centers[labels] + spread * rng.child("points").normal(size=(m * per_class, d_in))
    return Dataset(X, labels, labels.copy(), labels < m_train, m)


def _check_rate(rho):
    if not (0.0 <= rho < 1.0):
        raise ValueError(f"noise rate must lie in [0, 1), got {rho}")


def inject_symmetric(ds, rho, seed):
    """Flip ``floor(rho * n_m)`` labels of every train class uniformly to the other train classes."""
    _check_rate(rho)
    out = ds.copy()
    classes = ds.train_classes()
    rng = Rng(seed).child("symmetric")
    for m in classes:
        members = np.flatnonzero(ds.is_train & (ds.gt_labels == m))
        n_flip = int(math.floor(rho * len(members)))
        if n_flip == 0:
            continue
        others = classes[classes != m]
        if len(others) == 0:
            raise ValueError("symmetric noise needs at least two train classes")
        chosen = rng.choice(members, size=n_flip, replace=False)
        out.noisy_labels[chosen] = others[rng.integers(0, len(others), size=n_flip)]
    return out


def kmeans(X, k, rng, n_iter=20):
    """Lloyd's algorithm with k-means++ seeding; assignment ties go to the lowest centre index."""
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    k = max(1, min(k, n))
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(0, n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = rng.integers(0, n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[c] = X[idx]
        d2 = np.minimum(d2, np.sum((X - centers[c]) ** 2, axis=1))
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(n_iter):
        dist = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        assign = np.argmin(dist, axis=1)  # argmin keeps the first minimum
        for c in range(k):
            pts = X[assign == c]
            if len(pts):
                centers[c] = pts.mean(axis=0)
    return assign


def inject_small_cluster(ds, rho, cluster_size=5, seed=0):
    """Relabel feature-coherent clusters of whole train classes until ``floor(rho * N_train)`` labels moved.

    Each consumed class is split by k-means into ``ceil(n_m / cluster_size)``
    clusters and every cluster takes the label of a random other train class.
    """
    _check_rate(rho)
    if cluster_size < 1:
        raise ValueError("cluster_size must be >= 1")
    out = ds.copy()
    classes = ds.train_classes()
    n_train = int(ds.is_train.sum())
    target = int(math.floor(rho * n_train))
    rng = Rng(seed).child("small_cluster")
    km_rng = Rng(seed).child("small_cluster_kmeans")
    remaining = list(classes)
    relabeled = 0
    while relabeled < target and remaining:
        m = remaining.pop(int(rng.integers(0, len(remaining))))
        others = classes[classes != m]
        if len(others) == 0:
            raise ValueError("small-cluster noise needs at least two train classes")
        members = np.flatnonzero(ds.is_train & (ds.gt_labels == m))
        k = math.ceil(len(members) / cluster_size)
        assign = kmeans(ds.X[members], k, km_rng)
        for c in np.unique(assign):
            out.noisy_labels[members[assign == c]] = others[rng.integers(0, len(others))]
        relabeled += len(members)
    return out


def write_dataset(ds, path):
    lines = [
        f"{MAGIC} N={ds.N} M={ds.M} D={ds.D}",
        ",".join(["id", "split", "gt_label", "noisy_label"] + [f"f{j}" for j in range(ds.D)]),
    ]
    for i in range(ds.N):
        split = "train" if ds.is_train[i] else "test"
        feats = ",".join("%.17g" % v for v in ds.X[i])
        lines.append(f"{i},{split},{ds.gt_labels[i]},{ds.noisy_labels[i]}" + ("," + feats if ds.D else ""))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_header(line):
    if not line.startswith(MAGIC + " "):
        raise DatasetParseError(1, f"expected header starting with {MAGIC!r}")
    fields = {}
    for tok in line[len(MAGIC) + 1 :].split():
        key, sep, val = tok.partition("=")
        if not sep or key not in ("N", "M", "D"):
            raise DatasetParseError(1, f"bad header token {tok!r}")
        try:
            fields[key] = int(val)
        except ValueError:
            raise DatasetParseError(1, f"non-integer header value {tok!r}") from None
    if set(fields) != {"N", "M", "D"}:
        raise DatasetParseError(1, "header must define N, M and D")
    return fields["N"], fields["M"], fields["D"]


def read_dataset(path):
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise DatasetParseError(1, "empty file")
    n, m, d = _parse_header(lines[0])
    expected_cols = ["id", "split", "gt_label", "noisy_label"] + [f"f{j}" for j in range(d)]
    if len(lines) < 2:
        if n != 0:
            raise DatasetParseError(2, "missing column header")
        return Dataset(np.zeros((0, d)), [], [], [], m)
    if lines[1].split(",") != expected_cols:
        raise DatasetParseError(2, "unexpected column names")
    rows = {}
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4 + d:
            raise DatasetParseError(lineno, f"expected {4 + d} fields, got {len(parts)}")
        try:
            sid, gt, noisy = int(parts[0]), int(parts[2]), int(parts[3])
        except ValueError:
            raise DatasetParseError(lineno, "non-integer id or label") from None
        if parts[1] not in ("train", "test"):
            raise DatasetParseError(lineno, f"bad split {parts[1]!r}")
        try:
            x = [float(p) for p in parts[4:]]
        except ValueError:
            raise DatasetParseError(lineno, "non-numeric feature value") from None
        if sid in rows:
            raise DatasetParseError(lineno, f"duplicate id {sid}")
        rows[sid] = (parts[1] == "train", gt, noisy, x, lineno)
    if len(rows) != n:
        raise DatasetParseError(len(lines), f"header declares N={n} but file has {len(rows)} rows")
    for i in range(n):
        if i not in rows:
            raise DatasetParseError(len(lines), f"ids must be dense 0..{n - 1}; missing {i}")
    order = [rows[i] for i in range(n)]
    X = np.array([r[3] for r in order], dtype=np.float64).reshape(n, d)
    return Dataset(
        X,
        [r[1] for r in order],
        [r[2] for r in order],
        [r[0] for r in order],
        m,
    )
