"""Bag-level classifier with the scikit-learn estimator interface.

``X`` is a sequence of bags, each a (M_i, C, H, W) patch stack; ``y`` holds
the bag labels.  ``fit`` carves a validation subset out of the given bags
for best-epoch selection and runs the staged pipeline; ``predict`` scores
unseen bags through the same frozen extractor, patch selection, prototype
assignment, and trained parameters.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .backbone import BackboneConfig
from .data import WsiBag, split_dataset
from .training import Components, TrainConfig, fit_pipeline
from .validation import check_binary_labels, check_both_classes, check_fitted, check_patch_stack


class PamtClassifier(ClassifierMixin, BaseEstimator):
    """Frozen-backbone bag classifier with selectable tuning strategy.

    Parameters mirror the pipeline configuration; ``rps``/``pvp``/``amt``
    toggle the selection, prompting, and adapter components (honored by the
    ``pamt`` strategy; other strategies always run without prompts and
    adapters).  ``val_fraction`` of the training bags is held out for
    best-epoch selection.
    """

    def __init__(self, strategy: str = "pamt", epochs: int = 100,
                 adam_lr: float = 1e-4, adam_weight_decay: float = 1e-4,
                 prompt_sgd_lr0: float = 40.0, top_k: int | None = 64,
                 n_clusters: int = 4, pad_size: int = 2,
                 mil_head: str = "gated_attention", attention_dim: int = 128,
                 rps_epochs: int = 25, rps_lr: float = 1e-3,
                 rps: bool = True, pvp: bool = True, amt: bool = True,
                 val_fraction: float = 0.15, seed: int = 0,
                 backbone: BackboneConfig | None = None):
        self.strategy = strategy
        self.epochs = epochs
        self.adam_lr = adam_lr
        self.adam_weight_decay = adam_weight_decay
        self.prompt_sgd_lr0 = prompt_sgd_lr0
        self.top_k = top_k
        self.n_clusters = n_clusters
        self.pad_size = pad_size
        self.mil_head = mil_head
        self.attention_dim = attention_dim
        self.rps_epochs = rps_epochs
        self.rps_lr = rps_lr
        self.rps = rps
        self.pvp = pvp
        self.amt = amt
        self.val_fraction = val_fraction
        self.seed = seed
        self.backbone = backbone

    def _config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, adam_lr=self.adam_lr,
            adam_weight_decay=self.adam_weight_decay,
            prompt_sgd_lr0=self.prompt_sgd_lr0, top_k=self.top_k,
            n_clusters=self.n_clusters, pad_size=self.pad_size,
            seed=self.seed, mil_head=self.mil_head,
            attention_dim=self.attention_dim, rps_epochs=self.rps_epochs,
            rps_lr=self.rps_lr,
            split_ratios=(1.0 - self.val_fraction, self.val_fraction, 0.0),
            backbone=self.backbone if self.backbone is not None else BackboneConfig())

    def fit(self, X, y):
        stacks = [check_patch_stack(p, f"bag {i}") for i, p in enumerate(X)]
        labels = check_binary_labels(y, n=len(stacks))
        check_both_classes(labels, "training bags")
        bags = [WsiBag(i, s, int(l), np.zeros(s.shape[0], dtype=np.int64))
                for i, (s, l) in enumerate(zip(stacks, labels))]
        config = self._config()
        split = split_dataset(bags, config.split_ratios, config.seed,
                              allow_empty_test=True)
        fitted, _, _ = fit_pipeline(
            bags, split.train, split.val, config, self.strategy,
            Components(rps=self.rps, pvp=self.pvp, amt=self.amt))
        self.pipeline_ = fitted
        self.classes_ = np.array([0, 1])
        self.best_epoch_ = fitted.best_epoch
        self.val_auc_ = fitted.val.auc
        self.n_trainable_params_ = fitted.model.n_trainable
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_fitted(self, "pipeline_")
        probs = np.array([self.pipeline_.predict_bag(check_patch_stack(p, f"bag {i}"))
                          for i, p in enumerate(X)])
        return np.column_stack([1.0 - probs, probs])

    def predict(self, X) -> np.ndarray:
        # same inclusive 0.5 threshold as the reported F1/accuracy
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)

    def decision_function(self, X) -> np.ndarray:
        return self.predict_proba(X)[:, 1]
