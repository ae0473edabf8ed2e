"""Bag-level heads: gated-attention scoring plus mean and max baselines.

The gated-attention head scores each feature row with

    a_j = softmax_j( w . ( tanh(V1 f_j) * sigmoid(V2 f_j) ) )

and aggregates the bag as the attention-weighted sum of rows.  Mean and max
heads aggregate without attention.  Every head ends in one linear unit and a
sigmoid, so an untrained head (zero classifier) outputs probability 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, ParamRegistry, Tensor, functional as F
from .errors import ConfigError, EmptyBagError, ShapeMismatchError
from .rng import derive_rng, he_init

MIL_HEAD_KINDS = ("gated_attention", "mean_pooling", "max_pooling")


@dataclass
class MilHead:
    """Parameters of one bag-level head.

    ``V1``, ``V2``, ``w`` exist only for the gated-attention kind; the
    classifier pair is always present and always trainable.
    """

    kind: str
    classifier_weight: Parameter
    classifier_bias: Parameter
    V1: Parameter | None = None
    V2: Parameter | None = None
    w: Parameter | None = None

    @property
    def feature_dim(self) -> int:
        return self.classifier_weight.shape[0]


def init_head(registry: ParamRegistry, feature_dim: int, seed: int,
              kind: str = "gated_attention", attention_dim: int = 128) -> MilHead:
    """Create head parameters under "mil.*" names.

    Attention weights are He-initialized, the classifier starts at zero, so
    the initial bag probability is exactly 0.5 for every bag.
    """
    if kind not in MIL_HEAD_KINDS:
        raise ConfigError(f"unknown MIL head kind {kind!r}, expected one of {MIL_HEAD_KINDS}")
    if feature_dim < 1 or attention_dim < 1:
        raise ConfigError("feature_dim and attention_dim must be positive")
    clf_w = registry.create("mil.classifier.weight", np.zeros(feature_dim))
    clf_b = registry.create("mil.classifier.bias", np.zeros(()))
    if kind != "gated_attention":
        return MilHead(kind, clf_w, clf_b)
    rng = derive_rng(seed, "mil")
    v1 = registry.create("mil.V1", he_init(rng, (attention_dim, feature_dim), feature_dim))
    v2 = registry.create("mil.V2", he_init(rng, (attention_dim, feature_dim), feature_dim))
    w = registry.create("mil.w", he_init(rng, (attention_dim,), attention_dim))
    return MilHead(kind, clf_w, clf_b, V1=v1, V2=v2, w=w)


def _require_rows(features: Tensor, op: str) -> None:
    if features.ndim != 2:
        raise ShapeMismatchError(op, features.shape, detail="expects (M, D)")
    if features.shape[0] == 0:
        raise EmptyBagError(f"{op}: bag has no instances")


def attention_scores(features: Tensor, head: MilHead) -> Tensor:
    """Attention weights over bag rows; positive, summing to 1."""
    _require_rows(features, "attention_scores")
    if head.V1 is None:
        raise ConfigError(f"head kind {head.kind!r} has no attention parameters")
    m = features.shape[0]
    act = F.mul(F.tanh(F.matmul(features, F.transpose(head.V1))),
                F.sigmoid(F.matmul(features, F.transpose(head.V2))))   # (M, L)
    logits = F.matmul(act, F.reshape(head.w, (head.w.shape[0], 1)))    # (M, 1)
    return F.reshape(F.softmax(F.reshape(logits, (m,)), axis=0), (m,))


def aggregate(features: Tensor, head: MilHead) -> Tensor:
    """Bag embedding (D,): attention-weighted sum, column mean, or column max."""
    _require_rows(features, "aggregate")
    if head.kind == "mean_pooling":
        return F.mean_rows(features)
    if head.kind == "max_pooling":
        return F.max_rows(features)
    alpha = attention_scores(features, head)
    mixed = F.matmul(F.reshape(alpha, (1, features.shape[0])), features)  # (1, D)
    return F.reshape(mixed, (features.shape[1],))


def classify_bag(bag_embedding: Tensor, head: MilHead) -> tuple[Tensor, Tensor]:
    """Scalar (logit, probability) for one bag embedding."""
    if bag_embedding.ndim != 1:
        raise ShapeMismatchError("classify_bag", bag_embedding.shape, detail="expects (D,)")
    d = bag_embedding.shape[0]
    if d != head.feature_dim:
        raise ShapeMismatchError("classify_bag", bag_embedding.shape,
                                 head.classifier_weight.shape)
    dot = F.matmul(F.reshape(bag_embedding, (1, d)),
                   F.reshape(head.classifier_weight, (d, 1)))
    logit = F.add(F.reshape(dot, ()), head.classifier_bias)
    return logit, F.sigmoid(logit)


def bag_loss(logit: Tensor, label: int) -> Tensor:
    """Binary cross-entropy with logits; gradient is sigmoid(logit) - label."""
    return F.bce_with_logits(logit, label)


def bag_forward(features: Tensor, head: MilHead) -> tuple[Tensor, Tensor]:
    """Features (M, D) straight to (logit, probability)."""
    return classify_bag(aggregate(features, head), head)
