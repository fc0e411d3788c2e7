"""A scikit-learn facade over the training loop.

``SupervisedEncoder.fit`` trains encoder + projector on labelled images;
``transform`` returns frozen encoder features (the transferable part) and
``predict`` classifies with the training head: normalised class weights for
the softmax objectives, normalised memory prototypes for OCM/OCA.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_is_fitted

from . import numkit
from .augment import eval_transform_batch
from .config import RunConfig
from .data import TRAIN, Dataset
from .objectives import compute_prototypes, log_softmax
from .training import Trainer
from .validation import check_images, check_images_labels


class SupervisedEncoder(TransformerMixin, ClassifierMixin, BaseEstimator):
    def __init__(self, objective="ocm", temperature=0.1, classifier="learned", n_global=1, n_local=8,
                 global_scale=(0.4, 1.0), local_scale=(0.05, 0.4), global_resolution=32, local_resolution=16,
                 pool_grid=8, hidden_widths=(512,), output_dim=128, projector_layers=1, projector_hidden=2048,
                 bottleneck_dim=256, input_l2=True, predictor=False, memory_size=None, ema_momentum=0.999,
                 base_lr=0.1, batch_size=256, epochs=100, warmup_epochs=10, momentum=0.9, weight_decay=1e-4,
                 eval_short_side=None, precision="float32", random_state=0):
        self.objective = objective
        self.temperature = temperature
        self.classifier = classifier
        self.n_global = n_global
        self.n_local = n_local
        self.global_scale = global_scale
        self.local_scale = local_scale
        self.global_resolution = global_resolution
        self.local_resolution = local_resolution
        self.pool_grid = pool_grid
        self.hidden_widths = hidden_widths
        self.output_dim = output_dim
        self.projector_layers = projector_layers
        self.projector_hidden = projector_hidden
        self.bottleneck_dim = bottleneck_dim
        self.input_l2 = input_l2
        self.predictor = predictor
        self.memory_size = memory_size
        self.ema_momentum = ema_momentum
        self.base_lr = base_lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.eval_short_side = eval_short_side
        self.precision = precision
        self.random_state = random_state

    def to_run_config(self) -> RunConfig:
        return RunConfig.model_validate({
            "augment": {
                "n_global": self.n_global, "n_local": self.n_local,
                "global_scale": list(self.global_scale), "local_scale": list(self.local_scale),
                "global_resolution": self.global_resolution, "local_resolution": self.local_resolution,
            },
            "model": {
                "encoder": {"pool_grid": self.pool_grid, "hidden_widths": list(self.hidden_widths),
                            "output_dim": self.output_dim},
                "projector": {"n_layers": self.projector_layers, "hidden_dim": self.projector_hidden,
                              "bottleneck_dim": self.bottleneck_dim, "input_l2": self.input_l2},
                "predictor": {"enabled": self.predictor},
            },
            "objective": {"kind": self.objective, "temperature": self.temperature, "classifier": self.classifier,
                          "memory_size": self.memory_size, "ema_momentum": self.ema_momentum},
            "optimizer": {"base_lr": self.base_lr, "batch_size": self.batch_size, "epochs": self.epochs,
                          "warmup_epochs": self.warmup_epochs, "momentum": self.momentum,
                          "weight_decay": self.weight_decay},
            "io": {"seed": int(self.random_state), "precision": self.precision},
        })

    def fit(self, X, y):
        X, y = check_images_labels(X, y)
        self._le = LabelEncoder().fit(y)
        self.classes_ = self._le.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        labels = self._le.transform(y)
        ds = Dataset(X, labels, np.full(len(labels), TRAIN, np.uint8), len(self.classes_), "fit")
        self.trainer_ = Trainer(self.to_run_config(), ds)
        self.trainer_.run()
        self.image_shape_ = X.shape[1:]
        self.n_steps_ = self.trainer_.step
        self.loss_curve_ = [r.value for r in self.trainer_.records if r.name == "loss"]
        return self

    # -- inference ----------------------------------------------------------

    def _eval_images(self, X) -> np.ndarray:
        X = check_images(X)
        side = self.eval_short_side or self.global_resolution
        aug = self.trainer_.config.augment
        return eval_transform_batch(X, side, aug.mean, aug.std)

    def transform(self, X) -> np.ndarray:
        """Frozen encoder features, shape (n, output_dim)."""
        check_is_fitted(self, "trainer_")
        numkit.set_precision(self.precision)
        return self.trainer_.net.features(self._eval_images(X))

    def _class_vectors(self) -> np.ndarray:
        tr = self.trainer_
        if tr.bank is not None:
            protos = compute_prototypes(tr.bank, len(self.classes_))
            vecs = protos.normalized.astype(np.float64)
            vecs[~protos.present] = 0.0
            return vecs
        return numkit.l2_normalize(tr.net.params["classifier.weight"].astype(np.float64))

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "trainer_")
        numkit.set_precision(self.precision)
        # Query with whatever the loss saw: the predictor output when there is one.
        emb = self.trainer_.net.forward(self._eval_images(X), train=False).embedding.astype(np.float64)
        if self.objective == "vanilla_ce":
            return emb @ self.trainer_.net.params["classifier.weight"].astype(np.float64).T
        return emb @ self._class_vectors().T / self.temperature

    def predict_proba(self, X) -> np.ndarray:
        return np.exp(log_softmax(self.decision_function(X)))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
