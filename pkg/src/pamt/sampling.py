"""Representative patch selection: score every patch, keep the top K per bag.

A gated-attention head is pretrained on frozen backbone features with plain
bag-level cross-entropy; its attention weights then rank the patches of each
bag, and selection keeps the K best while preserving original patch order.
Selection is a pure function of the score ranking, so any strictly monotone
rescaling of scores selects the same patches.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .autodiff import ParamRegistry, Tensor
from .autodiff.serialize import array_checksum
from .errors import ConfigError, DataError, EmptyBagError
from .mil import MilHead, attention_scores, bag_forward, bag_loss, init_head
from .optim import Adam
from .rng import derive_rng
from .validation import check_both_classes, check_features_2d, check_fitted, check_scores


@dataclass
class SampledBag:
    """Selection result for one bag, in original patch order."""

    bag_id: int
    selected_indices: np.ndarray
    scores: np.ndarray
    label: int

    def __post_init__(self):
        self.selected_indices = np.asarray(self.selected_indices, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.selected_indices.shape != self.scores.shape:
            raise DataError("one score per selected index required")

    @property
    def n_selected(self) -> int:
        return int(self.selected_indices.size)


def select_topk(bag_scores, k: int) -> np.ndarray:
    """Indices of the K largest scores, ascending; ties keep the lower index.

    Bags with at most K patches are returned whole.
    """
    scores = check_scores(bag_scores, "bag_scores")
    if k < 1:
        raise ConfigError(f"K must be positive, got {k}")
    m = scores.shape[0]
    if m <= k:
        return np.arange(m, dtype=np.int64)
    # lexsort's last key is primary: descending score, then ascending index
    order = np.lexsort((np.arange(m), -scores))
    return np.sort(order[:k]).astype(np.int64)


def score_bag(features, head: MilHead) -> np.ndarray:
    """Attention weights for one bag of frozen features."""
    feats = check_features_2d(features, "features")
    if feats.shape[0] == 0:
        raise EmptyBagError("score_bag: bag has no instances")
    return attention_scores(Tensor(feats), head).data.copy()


def pretrain_scorer(features_per_bag, labels, seed: int, epochs: int = 25,
                    lr: float = 1e-3, weight_decay: float = 1e-4,
                    attention_dim: int = 128) -> tuple[MilHead, ParamRegistry, list[float]]:
    """Train a gated-attention head on frozen features; returns loss trace.

    One Adam step per bag; bags are visited in a fresh deterministic shuffle
    each epoch.  The trace holds the mean bag loss per epoch.
    """
    bags = [check_features_2d(f, "bag features") for f in features_per_bag]
    if len(bags) < 2:
        raise DataError("need at least 2 bags to pretrain the scorer")
    y = check_both_classes(labels, "scorer training set")
    if len(bags) != y.shape[0]:
        raise DataError(f"{len(bags)} bags but {y.shape[0]} labels")
    dims = {b.shape[1] for b in bags}
    if len(dims) != 1:
        raise DataError(f"inconsistent feature dimensions across bags: {sorted(dims)}")

    registry = ParamRegistry()
    head = init_head(registry, dims.pop(), seed=seed, kind="gated_attention",
                     attention_dim=attention_dim)
    optimizer = Adam(registry.trainable(), lr=lr, weight_decay=weight_decay)
    trace: list[float] = []
    for epoch in range(epochs):
        order = derive_rng(seed, "scorer-shuffle", epoch).permutation(len(bags))
        total = 0.0
        for i in order:
            registry.zero_grad()
            logit, _ = bag_forward(Tensor(bags[i]), head)
            loss = bag_loss(logit, int(y[i]))
            loss.backward()
            optimizer.step()
            total += loss.item()
        trace.append(total / len(bags))
    return head, registry, trace


class RepresentativePatchSampler(BaseEstimator):
    """Estimator face of the scorer + top-K stage.

    ``fit`` expects per-bag feature matrices and bag labels; ``transform``
    maps feature matrices to :class:`SampledBag` selections using the fitted
    scorer.  ``top_k=None`` keeps every patch (scores still attached).
    """

    def __init__(self, top_k: int | None = 64, epochs: int = 25, lr: float = 1e-3,
                 weight_decay: float = 1e-4, attention_dim: int = 128, seed: int = 0):
        self.top_k = top_k
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.attention_dim = attention_dim
        self.seed = seed

    def fit(self, X, y):
        head, registry, trace = pretrain_scorer(
            X, y, seed=self.seed, epochs=self.epochs, lr=self.lr,
            weight_decay=self.weight_decay, attention_dim=self.attention_dim)
        self.head_ = head
        self.registry_ = registry
        self.loss_trace_ = trace
        return self

    def transform(self, X, bag_ids=None, labels=None) -> list[SampledBag]:
        check_fitted(self, "head_")
        ids = range(len(X)) if bag_ids is None else bag_ids
        labs = [0] * len(X) if labels is None else labels
        out = []
        for feats, bag_id, label in zip(X, ids, labs):
            alpha = score_bag(feats, self.head_)
            k = alpha.shape[0] if self.top_k is None else self.top_k
            idx = select_topk(alpha, k)
            out.append(SampledBag(int(bag_id), idx, alpha[idx], int(label)))
        return out

    def scorer_checksum(self) -> str:
        check_fitted(self, "head_")
        return array_checksum(np.concatenate(
            [p.data.reshape(-1) for p in self.registry_]))


def save_sampled(directory, sampled: list[SampledBag], top_k: int | None,
                 scorer_checksum: str) -> None:
    """Persist selections as selection.csv + selection_manifest.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "selection.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bag_id", "original_index", "score"])
        for bag in sampled:
            for idx, score in zip(bag.selected_indices, bag.scores):
                writer.writerow([bag.bag_id, int(idx), repr(float(score))])
    manifest = {
        "top_k": top_k,
        "scorer_checksum": scorer_checksum,
        "n_bags": len(sampled),
        "n_selected_total": int(sum(b.n_selected for b in sampled)),
    }
    (directory / "selection_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_sampled(directory, labels_by_bag: dict[int, int] | None = None) -> list[SampledBag]:
    directory = Path(directory)
    rows: dict[int, list[tuple[int, float]]] = {}
    with open(directory / "selection.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(int(row["bag_id"]), []).append(
                (int(row["original_index"]), float(row["score"])))
    out = []
    for bag_id in sorted(rows):
        pairs = sorted(rows[bag_id])
        label = labels_by_bag.get(bag_id, 0) if labels_by_bag else 0
        out.append(SampledBag(bag_id, [i for i, _ in pairs], [s for _, s in pairs], label))
    return out
