"""Training loop wiring clean selection, subgroup generation, prototypes and losses; retrieval metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from sgps import losses, pcs, ppm
from sgps.membank import ABSENT, CrossBatchMemory, FeatureBank, MemoryEntry
from sgps.numkit import EmbeddingNet, Rng
from sgps.sgm import SGMParams, SubgroupRefresher, write_snapshot_csv

logger = logging.getLogger(__name__)

UNIT_TOL = 1e-9


class NumericalError(RuntimeError):
    """Training produced non-finite values or broke the unit-norm invariant."""


@dataclass
class TrainConfig:
    """Every tunable of the pipeline; ``None`` means derived from the data or other keys."""

    seed: int = 0
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_epochs: int = 1
    loss_reduction: str = "mean"
    # network
    hidden: int = 64
    d_out: int = 16
    activation: str = "tanh"
    # losses
    margin_lambda: float = 0.5
    tau: float = 0.02
    delta: float = 0.1
    gamma1: float = 1.0
    gamma2: float = 0.1
    # clean selection
    pcs: bool = True
    assumed_noise_rate: float = 0.5
    omega: int = 25
    # memories
    memory_capacity: Optional[int] = None
    alpha: float = 0.5
    # subgroup generation
    sgm_sources: str = "both"
    sgm_every: int = 1
    sgm_worker: str = "sync"
    lambda_min: float = 0.3
    lambda_max: float = 0.9
    lambda_p_min: float = 0.5
    lambda_p_max: float = 0.95
    tau_k: Optional[int] = None
    tau_max: Optional[int] = None
    B: Optional[int] = None
    # prototypes
    K: int = 4
    ppm_mode: str = "softmax"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("epochs and warmup_epochs must be non-negative")
        if not 0.0 <= self.assumed_noise_rate <= 1.0:
            raise ValueError("assumed_noise_rate must lie in [0, 1]")
        if self.ppm_mode not in ppm.MODES:
            raise ValueError(f"ppm_mode must be one of {ppm.MODES}")
        if self.sgm_sources not in ppm.SOURCES:
            raise ValueError(f"sgm_sources must be one of {ppm.SOURCES}")
        if self.sgm_worker not in ("sync", "background"):
            raise ValueError("sgm_worker must be 'sync' or 'background'")
        if self.loss_reduction not in ("sum", "mean"):
            raise ValueError("loss_reduction must be 'sum' or 'mean'")
        if self.K < 1 or self.sgm_every < 1 or self.omega < 1:
            raise ValueError("K, sgm_every and omega must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        self.loss_config()

    def loss_config(self):
        return losses.LossConfig(self.margin_lambda, self.tau, self.delta, self.gamma1, self.gamma2)

    def sgm_params(self):
        return SGMParams(self.lambda_min, self.lambda_max, self.lambda_p_min, self.lambda_p_max,
                         self.tau_k, self.tau_max, self.B)

    @property
    def resolved_memory_capacity(self):
        return self.memory_capacity if self.memory_capacity is not None else 8 * self.batch_size

    def replace(self, **kw):
        d = asdict(self)
        d.update(kw)
        return TrainConfig(**d)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class EpochReport:
    epoch: int
    loss_clean: float
    loss_noise: float
    threshold: Optional[float]
    selection_acc: Optional[float]
    p_at_1: float
    r_precision: float
    map_at_r: float
    sgm_version: int

    def to_dict(self):
        return asdict(self)


@dataclass
class RetrievalMetrics:
    p_at_1: float
    r_precision: float
    map_at_r: float
    n_r_queries: int

    @property
    def r_valid(self):
        """False when no query had a same-class neighbour, so the R-based metrics are placeholders."""
        return self.n_r_queries > 0

    def __iter__(self):
        return iter((self.p_at_1, self.r_precision, self.map_at_r))


def evaluate(embeddings, gt_labels):
    """Precision@1, R-Precision and MAP@R of leave-one-out cosine retrieval.

    Neighbours are ranked by similarity, ties broken by lower index.  Queries
    without any same-class neighbour are left out of the R-based metrics.
    """
    E = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(gt_labels)
    n = len(E)
    if n < 2:
        raise ValueError("evaluate needs at least two samples")
    S = E @ E.T
    np.fill_diagonal(S, -np.inf)
    order = np.argsort(-S, axis=1, kind="stable")[:, : n - 1]
    hits = y[order] == y[:, None]
    p1 = float(hits[:, 0].mean())
    inv = np.unique(y, return_inverse=True)[1]
    R = np.bincount(inv)[inv] - 1
    valid = R > 0
    if not valid.any():
        return RetrievalMetrics(p1, 0.0, 0.0, 0)
    ranks = np.arange(1, n)
    within = ranks[None, :] <= R[:, None]
    h = hits & within
    rprec = h.sum(axis=1)[valid] / R[valid]
    prec_at_k = np.cumsum(h, axis=1) / ranks[None, :]
    ap = (prec_at_k * h).sum(axis=1)[valid] / R[valid]
    return RetrievalMetrics(p1, float(rprec.mean()), float(ap.mean()), int(valid.sum()))


def selection_accuracy(partition, gt_clean_mask):
    """Fraction of samples whose clean/noisy decision matches the ground truth."""
    decided = partition.clean_mask if isinstance(partition, pcs.BatchPartition) else np.asarray(partition, dtype=bool)
    gt = np.asarray(gt_clean_mask, dtype=bool)
    if len(gt) == 0:
        return 0.0
    return float(np.mean(decided == gt))


def pair_f_measure(pred, truth):
    """Pair-counting F-measure between two labelings of the same items."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)

    def pairs(labels):
        _, counts = np.unique(labels, return_counts=True)
        return int(np.sum(counts * (counts - 1) // 2))

    joint = np.unique(np.stack([pred, truth], axis=1), axis=0, return_counts=True)[1]
    tp = int(np.sum(joint * (joint - 1) // 2))
    pp, tt = pairs(pred), pairs(truth)
    if pp == 0 and tt == 0:
        return 1.0
    if tp == 0:
        return 0.0
    precision, recall = tp / pp, tp / tt
    return 2 * precision * recall / (precision + recall)


class SGPSTrainer:
    """Stateful training run over a :class:`~sgps.datagen.Dataset`.

    Exposes the network, memories and latest subgroup snapshot between epochs.
    """

    def __init__(self, ds, cfg, sgm_dump=None):
        cfg.validate()
        self.ds = ds
        self.cfg = cfg
        self.sgm_dump = sgm_dump
        self.train_ids = np.flatnonzero(ds.is_train)
        if len(self.train_ids) == 0:
            raise ValueError("dataset has no train split")
        self.test_ids = np.flatnonzero(~ds.is_train)
        self.rng = Rng(cfg.seed)
        self.net = EmbeddingNet.init(ds.D, cfg.hidden, cfg.d_out, self.rng, cfg.activation)
        self.velocity = {k: np.zeros_like(v) for k, v in self.net.params().items()}
        self.memory = CrossBatchMemory(cfg.resolved_memory_capacity)
        self.bank = FeatureBank(ds.N, cfg.d_out)
        self.threshold = pcs.ThresholdState(cfg.omega, 100.0 * cfg.assumed_noise_rate)
        self.loss_cfg = cfg.loss_config()
        self.refresher = SubgroupRefresher(cfg.sgm_params(), seed=cfg.seed, background=cfg.sgm_worker == "background")
        self.ppm_rng = self.rng.child("ppm")
        self.reports = []
        self.epoch = 0
        self._dumped_version = 0

    @property
    def snapshot(self):
        return self.refresher.current

    def run(self, callback=None):
        try:
            for _ in range(self.cfg.epochs):
                report = self.run_epoch()
                if callback is not None:
                    callback(report)
        finally:
            self.refresher.close()
        return self.reports

    def run_epoch(self):
        cfg = self.cfg
        ds = self.ds
        epoch = self.epoch + 1
        warmup = epoch <= cfg.warmup_epochs or not cfg.pcs
        snapshot = self.refresher.collect()
        self._dump_snapshot()
        order = self.rng.child(f"shuffle/{epoch}").permutation(self.train_ids)
        clean_losses, noise_losses = [], []
        agree = total = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            if len(batch) < 2:
                continue
            lc, ln, part = self._step(batch, snapshot, warmup)
            clean_losses.append(lc)
            noise_losses.append(ln)
            gt_clean = ds.noisy_labels[batch] == ds.gt_labels[batch]
            agree += int(np.sum(part.clean_mask == gt_clean))
            total += len(batch)
        if epoch % cfg.sgm_every == 0:
            self.refresher.submit(self.bank, ds.noisy_labels, ds.is_train)
            self._dump_snapshot()
        metrics = self.evaluate_test()
        self.epoch = epoch
        report = EpochReport(
            epoch=epoch,
            loss_clean=float(np.mean(clean_losses)) if clean_losses else 0.0,
            loss_noise=float(np.mean(noise_losses)) if noise_losses else 0.0,
            threshold=self.threshold.t,
            selection_acc=agree / total if total else None,
            p_at_1=metrics.p_at_1,
            r_precision=metrics.r_precision,
            map_at_r=metrics.map_at_r,
            sgm_version=snapshot.version if snapshot is not None else 0,
        )
        if not all(math.isfinite(v) for v in (report.loss_clean, report.loss_noise)):
            raise NumericalError(f"non-finite loss at epoch {epoch}")
        self.reports.append(report)
        logger.info("epoch %d: %s", epoch, report)
        return report

    def _dump_snapshot(self):
        snap = self.refresher.current
        if self.sgm_dump is not None and snap is not None and snap.version > self._dumped_version:
            write_snapshot_csv(snap, self.sgm_dump, append=self._dumped_version > 0)
            self._dumped_version = snap.version

    def _step(self, batch, snapshot, warmup):
        cfg = self.cfg
        ds = self.ds
        labels = ds.noisy_labels[batch]
        Z, cache = self.net.forward_batch(ds.X[batch])
        norms = np.linalg.norm(Z, axis=1)
        if not np.all(np.abs(norms - 1.0) <= UNIT_TOL):
            raise NumericalError("embedding left the unit sphere")

        centroids = self.memory.centroids()
        ps = pcs.clean_probabilities(Z, labels, centroids)
        # cold-start p = 1 values carry no information about the batch
        estimated = np.isin(labels, list(centroids))
        if estimated.any():
            pcs.update_threshold(self.threshold, ps[estimated])
        t = self.threshold.t
        part = pcs.partition_batch(ps, t, warmup=warmup)

        if snapshot is not None:
            cB = snapshot.cB[batch]
            cT = snapshot.cT[batch]
        else:
            cB = cT = np.full(len(batch), ABSENT)
        prototypes = {}
        if snapshot is not None and (cfg.gamma1 > 0 or cfg.gamma2 > 0):
            for pos in part.noisy_ids:
                pset = ppm.select_positives(int(batch[pos]), snapshot, self.bank, cfg.K, self.ppm_rng, cfg.sgm_sources)
                if pset is not None:
                    prototypes[int(pos)] = ppm.aggregate(cfg.ppm_mode, Z[pos], pset.member_embeddings).vector

        res = losses.total_loss(Z, labels, part, self.memory, prototypes, self.loss_cfg, cB, cT)
        scale = 1.0 / len(batch) if cfg.loss_reduction == "mean" else 1.0
        if not np.isfinite(res.value) or not np.all(np.isfinite(res.grad)):
            raise NumericalError("non-finite loss or gradient")
        grads, _ = self.net.backward_batch(cache, Z, res.grad * scale)
        self._sgd(grads)

        self.memory.push([
            MemoryEntry(int(sid), Z[k].copy(), int(labels[k]), bool(part.clean_mask[k]),
                        None if cB[k] == ABSENT else int(cB[k]), None if cT[k] == ABSENT else int(cT[k]))
            for k, sid in enumerate(batch)
        ])
        self.bank.update_many(batch, Z, cfg.alpha)
        return res.parts["clean"] * scale, res.parts["noise"] * scale, part

    def _sgd(self, grads):
        cfg = self.cfg
        for name, param in self.net.params().items():
            g = grads[name] + cfg.weight_decay * param
            v = self.velocity[name]
            v *= cfg.momentum
            v += g
            param -= cfg.learning_rate * v

    def embed(self, X):
        return self.net.forward(np.asarray(X, dtype=np.float64))

    def evaluate_test(self):
        if len(self.test_ids) < 2:
            return RetrievalMetrics(0.0, 0.0, 0.0, 0)
        E = self.embed(self.ds.X[self.test_ids])
        return evaluate(E, self.ds.gt_labels[self.test_ids])


def train(ds, cfg, callback=None):
    """Train an embedding network; returns ``(reports, net)``."""
    trainer = SGPSTrainer(ds, cfg)
    reports = trainer.run(callback)
    return reports, trainer.net
