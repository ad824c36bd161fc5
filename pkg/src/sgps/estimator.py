"""scikit-learn compatible wrapper around the training loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from sgps.datagen import Dataset
from sgps.trainer import SGPSTrainer, TrainConfig, evaluate


class SGPSEmbedder(TransformerMixin, BaseEstimator):
    """Learn a unit-norm embedding from vectors with possibly noisy class labels.

    ``fit(X, y)`` trains the embedding network; ``transform(X)`` maps rows of
    ``X`` to L2-normalised embeddings of dimension ``d_out``.  Hyperparameters
    mirror :class:`~sgps.trainer.TrainConfig`.

    Parameters
    ----------
    epochs, batch_size, learning_rate, momentum, weight_decay, warmup_epochs :
        Optimisation schedule.
    tau, delta, gamma1, gamma2, margin_lambda :
        Loss hyperparameters.
    pcs, assumed_noise_rate, omega :
        Clean-sample selection; ``pcs=False`` treats every sample as clean.
    K, ppm_mode, sgm_sources :
        Positive-set size, prototype aggregation and subgroup label sources.
    random_state : int
        Master seed.

    Attributes
    ----------
    net_ : EmbeddingNet
    reports_ : list of EpochReport
    snapshot_ : SubgroupSnapshot or None
    classes_ : ndarray
    """

    def __init__(
        self,
        epochs=20,
        batch_size=64,
        learning_rate=0.02,
        momentum=0.9,
        weight_decay=1e-4,
        warmup_epochs=1,
        loss_reduction="mean",
        hidden=64,
        d_out=16,
        activation="tanh",
        margin_lambda=0.5,
        tau=0.02,
        delta=0.1,
        gamma1=1.0,
        gamma2=0.1,
        pcs=True,
        assumed_noise_rate=0.5,
        omega=25,
        memory_capacity=None,
        alpha=0.5,
        sgm_sources="both",
        sgm_every=1,
        sgm_worker="sync",
        lambda_min=0.3,
        lambda_max=0.9,
        lambda_p_min=0.5,
        lambda_p_max=0.95,
        tau_k=None,
        tau_max=None,
        B=None,
        K=4,
        ppm_mode="softmax",
        random_state=0,
    ):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.loss_reduction = loss_reduction
        self.hidden = hidden
        self.d_out = d_out
        self.activation = activation
        self.margin_lambda = margin_lambda
        self.tau = tau
        self.delta = delta
        self.gamma1 = gamma1
        self.gamma2 = gamma2
        self.pcs = pcs
        self.assumed_noise_rate = assumed_noise_rate
        self.omega = omega
        self.memory_capacity = memory_capacity
        self.alpha = alpha
        self.sgm_sources = sgm_sources
        self.sgm_every = sgm_every
        self.sgm_worker = sgm_worker
        self.lambda_min = lambda_min
        self.lambda_max = lambda_max
        self.lambda_p_min = lambda_p_min
        self.lambda_p_max = lambda_p_max
        self.tau_k = tau_k
        self.tau_max = tau_max
        self.B = B
        self.K = K
        self.ppm_mode = ppm_mode
        self.random_state = random_state

    def _train_config(self):
        params = self.get_params()
        params["seed"] = params.pop("random_state")
        return TrainConfig(**params)

    def fit(self, X, y, eval_set=None, y_true=None):
        """Train on ``(X, y)``.

        ``eval_set=(X_eval, y_eval)`` enables per-epoch retrieval metrics and
        ``y_true`` (ground-truth labels for ``X``) enables selection accuracy.
        """
        X, y = check_X_y(X, y, dtype=np.float64)
        cfg = self._train_config()
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        gt = y_enc if y_true is None else np.searchsorted(self.classes_, np.asarray(y_true))
        n_fit = len(X)
        parts_X, parts_gt, parts_noisy = [X], [gt], [y_enc]
        m = len(self.classes_)
        if eval_set is not None:
            Xe, ye = check_X_y(eval_set[0], eval_set[1], dtype=np.float64)
            if Xe.shape[1] != X.shape[1]:
                raise ValueError("eval_set has a different number of features")
            _, ye_enc = np.unique(ye, return_inverse=True)
            parts_X.append(Xe)
            parts_gt.append(ye_enc + m)
            parts_noisy.append(ye_enc + m)
            m += int(ye_enc.max()) + 1 if len(ye_enc) else 0
        is_train = np.zeros(sum(len(p) for p in parts_X), dtype=bool)
        is_train[:n_fit] = True
        ds = Dataset(np.vstack(parts_X), np.concatenate(parts_gt), np.concatenate(parts_noisy), is_train, m)
        trainer = SGPSTrainer(ds, cfg)
        self.reports_ = trainer.run()
        self.net_ = trainer.net
        self.snapshot_ = trainer.snapshot
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self.net_.forward(X)

    def score(self, X, y):
        """Precision@1 of leave-one-out retrieval in the embedding space."""
        return evaluate(self.transform(X), np.asarray(y)).p_at_1
