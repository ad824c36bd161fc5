"""Subgroup generation: intra-class splitting, guarded bottom-up merging and top-down cell division."""

from __future__ import annotations

import csv
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from sgps.numkit import Rng, l2_normalize

ABSENT = -1
DEGENERATE_H = 1e-9
MAX_REDRAWS = 8


@dataclass
class Subgroup:
    member_ids: np.ndarray
    centroid: np.ndarray
    source_class: int
    is_meta: bool = False
    feature_sum: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def size(self):
        return len(self.member_ids)

    @classmethod
    def from_members(cls, member_ids, features, source_class, is_meta=False):
        member_ids = np.asarray(member_ids, dtype=np.int64)
        s = np.asarray(features, dtype=np.float64).sum(axis=0)
        return cls(member_ids, l2_normalize(s), source_class, is_meta, s)


def adjacency(S, lambda_min, lambda_max):
    """Undirected intra-class adjacency from a cosine similarity matrix.

    Each row links to its most similar other sample (lowest index on ties) and
    to every sample above ``lambda_max``; links below ``lambda_min`` are dropped.
    """
    S = np.asarray(S, dtype=np.float64)
    n = len(S)
    W = np.zeros((n, n), dtype=bool)
    if n < 2:
        return W
    off = S.copy()
    np.fill_diagonal(off, -np.inf)
    W[np.arange(n), np.argmax(off, axis=1)] = True
    W |= off > lambda_max
    W &= ~(S < lambda_min)
    np.fill_diagonal(W, False)
    return W | W.T


def component_labels(W):
    """Connected-component label per node, numbered by first appearance."""
    n = len(W)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    _, raw = connected_components(csr_matrix(W), directed=False)
    remap = {}
    out = np.empty(n, dtype=np.int64)
    for i, c in enumerate(raw):
        out[i] = remap.setdefault(c, len(remap))
    return out


def intra_class_split(features, lambda_min=0.3, lambda_max=0.9, source_class=0):
    """Split one annotated class into connected components of its similarity graph.

    ``features`` maps sample id to unit vector.  The largest component (lowest
    label on ties) is flagged as the class's meta subgroup.
    """
    if not lambda_min < lambda_max:
        raise ValueError("lambda_min must be below lambda_max")
    if not features:
        raise ValueError("features must be nonempty")
    ids = np.array(sorted(features), dtype=np.int64)
    F = np.stack([np.asarray(features[i], dtype=np.float64) for i in ids])
    labels = component_labels(adjacency(F @ F.T, lambda_min, lambda_max))
    n_comp = labels.max() + 1
    sizes = np.bincount(labels, minlength=n_comp)
    meta = int(np.argmax(sizes))
    return [
        Subgroup.from_members(ids[labels == c], F[labels == c], source_class, c == meta)
        for c in range(n_comp)
    ]


def _labels_from_groups(groups):
    out = {}
    for g, members in enumerate(groups):
        for sid in members:
            out[int(sid)] = g
    return out


def bottom_up_merge(subgroups, tau_k, tau_max, lambda_p_min=0.5, lambda_p_max=0.95, return_groups=False,
                    trace=None):
    """Greedy centroid-linkage agglomeration with meta exclusion and size control.

    Returns a dict ``sample_id -> cB``.  With ``return_groups`` the merged
    :class:`Subgroup` list is returned as well.  A list passed as ``trace``
    receives one ``(i, j)`` live-index pair per merge, in order.
    """
    if tau_k < 1:
        raise ValueError("tau_k must be >= 1")
    live = [
        Subgroup(sg.member_ids.copy(), sg.centroid.copy(), sg.source_class, sg.is_meta,
                 sg.feature_sum.copy() if sg.feature_sum is not None else sg.centroid * sg.size)
        for sg in subgroups
    ]
    n = len(live)
    C = np.array([sg.centroid for sg in live]) if n else np.zeros((0, 0))
    S = C @ C.T if n else np.zeros((0, 0))
    # eligible[i, j] for i < j only
    eligible = np.triu(np.ones((n, n), dtype=bool), k=1)
    sizes = np.array([sg.size for sg in live], dtype=np.int64)
    meta = np.array([sg.is_meta for sg in live], dtype=bool)

    while len(live) >= tau_k and len(live) > 1:
        masked = np.where(eligible, S, -np.inf)
        flat = int(np.argmax(masked))  # row-major: lowest (i, j) among ties
        i, j = divmod(flat, len(live))
        best = masked[i, j]
        if not best >= lambda_p_min:
            break
        if meta[i] and meta[j] and best <= lambda_p_max:
            eligible[i, j] = False
            continue
        if sizes[i] + sizes[j] >= tau_max:
            eligible[i, j] = False
            continue
        if trace is not None:
            trace.append((i, j))
        a, b = live[i], live[j]
        fsum = a.feature_sum + b.feature_sum
        merged = Subgroup(
            np.sort(np.concatenate([a.member_ids, b.member_ids])),
            l2_normalize(fsum),
            a.source_class,
            a.is_meta or b.is_meta,
            fsum,
        )
        live[i] = merged
        del live[j]
        keep = np.ones(len(sizes), dtype=bool)
        keep[j] = False
        sizes[i] += sizes[j]
        meta[i] = merged.is_meta
        sizes, meta = sizes[keep], meta[keep]
        S = S[np.ix_(keep, keep)]
        eligible = eligible[np.ix_(keep, keep)]
        row = np.array([sg.centroid for sg in live]) @ merged.centroid
        S[i, :] = row
        S[:, i] = row
        eligible[i, :] = np.arange(len(live)) > i
        eligible[:, i] = np.arange(len(live)) < i
    labels = _labels_from_groups([sg.member_ids for sg in live])
    return (labels, live) if return_groups else labels


def top_down_division(subgroups, B, rng):
    """Recursive hyperplane division of the subgroup centroids into cells.

    A cell is split while it holds at least ``B`` samples and more than one
    subgroup.  Returns ``(cT, leaves)`` where ``cT`` maps sample id to cell
    label and ``leaves`` lists subgroup indices per cell in label order.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    cents = np.array([l2_normalize(sg.centroid) for sg in subgroups]) if subgroups else np.zeros((0, 0))
    sizes = np.array([sg.size for sg in subgroups], dtype=np.int64)
    meta = np.array([sg.is_meta for sg in subgroups], dtype=bool)
    leaves = []
    stack = [np.arange(len(subgroups))] if subgroups else []
    while stack:
        cell = stack.pop()
        if sizes[cell].sum() < B or len(cell) < 2:
            leaves.append(cell)
            continue
        metas = cell[meta[cell]]
        pool = metas if len(metas) >= 2 else cell
        left = None
        for _ in range(MAX_REDRAWS + 1):
            i, j = pool[rng.choice(len(pool), size=2, replace=False)]
            h = (cents[i] - cents[j]) / 2.0
            if np.linalg.norm(h) >= DEGENERATE_H:
                left = cents[cell] @ h >= 0.0
                break
        if left is None or left.all() or not left.any():
            left = np.arange(len(cell)) % 2 == 0
        stack.append(cell[~left])
        stack.append(cell[left])
    cT = {}
    for label, cell in enumerate(leaves):
        for k in cell:
            for sid in subgroups[k].member_ids:
                cT[int(sid)] = label
    return cT, leaves


@dataclass
class SGMParams:
    lambda_min: float = 0.3
    lambda_max: float = 0.9
    lambda_p_min: float = 0.5
    lambda_p_max: float = 0.95
    tau_k: Optional[int] = None
    tau_max: Optional[int] = None
    B: Optional[int] = None

    def resolve(self, n, m):
        """Fill data-dependent defaults from sample count ``n`` and class count ``m``."""
        per = math.ceil(n / max(m, 1))
        return SGMParams(
            self.lambda_min,
            self.lambda_max,
            self.lambda_p_min,
            self.lambda_p_max,
            self.tau_k if self.tau_k is not None else max(m, 1),
            self.tau_max if self.tau_max is not None else 2 * per,
            self.B if self.B is not None else 4 * per,
        )


@dataclass(frozen=True, eq=False)
class SubgroupSnapshot:
    """Immutable subgroup labelling; ``cB``/``cT`` are indexed by sample id, -1 where absent."""

    version: int
    cB: np.ndarray
    cT: np.ndarray

    def __post_init__(self):
        self.cB.setflags(write=False)
        self.cT.setflags(write=False)
        object.__setattr__(self, "_pools", {})

    def pool(self, kind, label):
        """Sorted ids carrying subgroup ``label`` in the ``"B"`` or ``"T"`` labelling."""
        key = (kind, label)
        pools = self._pools
        if key not in pools:
            arr = self.cB if kind == "B" else self.cT
            if kind + "_index" not in pools:
                order = np.argsort(arr, kind="stable")
                bounds = np.searchsorted(arr[order], np.arange(arr.max() + 2 if len(arr) else 1))
                pools[kind + "_index"] = (order, bounds)
            order, bounds = pools[kind + "_index"]
            if label < 0 or label + 1 >= len(bounds):
                pools[key] = np.zeros(0, dtype=np.int64)
            else:
                pools[key] = order[bounds[label]:bounds[label + 1]]
        return pools[key]


def refresh_snapshot(features, initialized, noisy_labels, params, version, seed=0, train_mask=None):
    """Recompute ``cB`` and ``cT`` from a feature-bank copy.

    ``features``/``initialized`` are the arrays returned by
    :meth:`FeatureBank.snapshot`.
    """
    n = len(features)
    noisy_labels = np.asarray(noisy_labels)
    present = np.asarray(initialized, dtype=bool).copy()
    if train_mask is not None:
        present &= np.asarray(train_mask, dtype=bool)
    ids = np.flatnonzero(present)
    if len(ids) == 0:
        raise ValueError("feature bank has no initialized slots")
    classes = np.unique(noisy_labels[ids])
    p = params.resolve(len(ids), len(classes))
    subgroups = []
    for m in classes:
        cls_ids = ids[noisy_labels[ids] == m]
        subgroups.extend(
            intra_class_split({int(i): features[i] for i in cls_ids}, p.lambda_min, p.lambda_max, int(m))
        )
    cB_map = bottom_up_merge(subgroups, p.tau_k, p.tau_max, p.lambda_p_min, p.lambda_p_max)
    cT_map, _ = top_down_division(subgroups, p.B, Rng(seed).child(f"top_down/{version}"))
    cB = np.full(n, ABSENT, dtype=np.int64)
    cT = np.full(n, ABSENT, dtype=np.int64)
    for sid, lab in cB_map.items():
        cB[sid] = lab
    for sid, lab in cT_map.items():
        cT[sid] = lab
    return SubgroupSnapshot(version, cB, cT)


def write_snapshot_csv(snapshot, path, append=False):
    """Debug dump with columns ``sample_id,cB,cT,version``."""
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if not append or fh.tell() == 0:
            w.writerow(["sample_id", "cB", "cT", "version"])
        for sid in np.flatnonzero(snapshot.cB != ABSENT):
            w.writerow([int(sid), int(snapshot.cB[sid]), int(snapshot.cT[sid]), snapshot.version])


class SubgroupRefresher:
    """Runs :func:`refresh_snapshot` synchronously or on one background thread.

    Submitted refreshes are always collected at the next call to
    :meth:`collect`, so training sees results at deterministic points.
    """

    def __init__(self, params, seed=0, background=False):
        self.params = params
        self.seed = seed
        self.background = background
        self._executor = ThreadPoolExecutor(max_workers=1) if background else None
        self._pending = None
        self._lock = threading.Lock()
        self.current = None
        self.version = 0

    def submit(self, bank, noisy_labels, train_mask=None):
        features, initialized = bank.snapshot()
        self.version += 1
        args = (features, initialized, noisy_labels, self.params, self.version, self.seed, train_mask)
        if self._executor is None:
            self._install(refresh_snapshot(*args))
        else:
            self._pending = self._executor.submit(refresh_snapshot, *args)

    def collect(self):
        """Install a pending background result (blocking until done) and return the current snapshot."""
        if self._pending is not None:
            fut, self._pending = self._pending, None
            self._install(fut.result())
        return self.current

    def _install(self, snap):
        with self._lock:
            if self.current is None or snap.version > self.current.version:
                self.current = snap

    def close(self):
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None
