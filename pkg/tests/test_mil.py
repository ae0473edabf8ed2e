import numpy as np
import pytest

from pamt.autodiff import Parameter, ParamRegistry, Tensor, functional as F, grad_check
from pamt.errors import ConfigError, EmptyBagError
from pamt.mil import (
    MIL_HEAD_KINDS,
    MilHead,
    aggregate,
    attention_scores,
    bag_forward,
    bag_loss,
    classify_bag,
    init_head,
)

from conftest import finite_difference, rel_err


def make_head(d=3, l=4, seed=0, kind="gated_attention"):
    return init_head(ParamRegistry(), d, seed=seed, kind=kind, attention_dim=l)


def tiny_head(v1, v2, w, clf_w=None, clf_b=0.0, kind="gated_attention"):
    v1, v2 = np.atleast_2d(v1), np.atleast_2d(v2)
    d = v1.shape[1]
    return MilHead(
        kind,
        Parameter("mil.classifier.weight", np.zeros(d) if clf_w is None else clf_w),
        Parameter("mil.classifier.bias", np.asarray(clf_b)),
        V1=Parameter("mil.V1", v1),
        V2=Parameter("mil.V2", v2),
        w=Parameter("mil.w", np.atleast_1d(w)),
    )


def numpy_attention(features, head):
    """Direct evaluation used as the oracle for the gated-attention path."""
    pre = np.tanh(features @ head.V1.data.T) * (1.0 / (1.0 + np.exp(-(features @ head.V2.data.T))))
    logits = pre @ head.w.data
    e = np.exp(logits - logits.max())
    return e / e.sum()


class TestAttention:
    def test_singleton_bag(self):
        head = make_head()
        alpha = attention_scores(Tensor(np.random.default_rng(0).normal(size=(1, 3))), head)
        np.testing.assert_array_equal(alpha.data, [1.0])

    def test_identical_rows_split_evenly(self):
        head = make_head(seed=1)
        row = np.random.default_rng(1).normal(size=3)
        alpha = attention_scores(Tensor(np.stack([row, row])), head)
        np.testing.assert_allclose(alpha.data, [0.5, 0.5], atol=1e-15)

    def test_scalar_chain_example(self):
        # V2 = 0 makes the gate 0.5, so logits are 0.5*tanh(f).
        head = tiny_head(v1=[1.0], v2=[0.0], w=[1.0])
        f = np.array([[0.0], [np.log(3.0)]])
        alpha = attention_scores(Tensor(f), head)
        logits = 0.5 * np.tanh(f[:, 0])
        expect = np.exp(logits) / np.exp(logits).sum()
        np.testing.assert_allclose(alpha.data, expect, atol=1e-12)

    def test_matches_direct_evaluation(self):
        head = make_head(d=5, l=6, seed=2)
        feats = np.random.default_rng(2).normal(size=(7, 5))
        alpha = attention_scores(Tensor(feats), head)
        np.testing.assert_allclose(alpha.data, numpy_attention(feats, head), atol=1e-12)

    def test_sums_to_one(self):
        head = make_head(seed=3)
        for m in (1, 2, 17, 64):
            feats = np.random.default_rng(m).normal(size=(m, 3)) * 3
            alpha = attention_scores(Tensor(feats), head)
            assert abs(alpha.data.sum() - 1.0) < 1e-9

    def test_shift_invariance_of_softmax_stage(self):
        head = make_head(d=4, l=5, seed=4)
        feats = np.random.default_rng(4).normal(size=(6, 4))
        pre = np.tanh(feats @ head.V1.data.T) * (1.0 / (1.0 + np.exp(-(feats @ head.V2.data.T))))
        logits = pre @ head.w.data
        shifted = np.exp(logits + 250.0 - (logits + 250.0).max())
        np.testing.assert_allclose(attention_scores(Tensor(feats), head).data,
                                   shifted / shifted.sum(), atol=1e-12)

    def test_empty_bag(self):
        with pytest.raises(EmptyBagError):
            attention_scores(Tensor(np.zeros((0, 3))), make_head())

    def test_mean_head_has_no_attention(self):
        with pytest.raises(ConfigError):
            attention_scores(Tensor(np.zeros((2, 3))), make_head(kind="mean_pooling"))


class TestAggregate:
    @pytest.mark.parametrize("kind", MIL_HEAD_KINDS)
    def test_constant_bag_returns_the_row(self, kind):
        head = make_head(seed=5, kind=kind)
        v = np.random.default_rng(5).normal(size=3)
        out = aggregate(Tensor(np.tile(v, (4, 1))), head)
        np.testing.assert_allclose(out.data, v, atol=1e-12)

    def test_mean_example(self):
        head = make_head(d=2, kind="mean_pooling")
        out = aggregate(Tensor(np.array([[0.0, 2.0], [2.0, 0.0]])), head)
        np.testing.assert_array_equal(out.data, [1.0, 1.0])

    def test_max_takes_column_maxima(self):
        head = make_head(d=2, kind="max_pooling")
        out = aggregate(Tensor(np.array([[0.0, 5.0], [2.0, 1.0]])), head)
        np.testing.assert_array_equal(out.data, [2.0, 5.0])

    def test_attention_weighted_sum_matches_oracle(self):
        head = make_head(d=4, l=3, seed=6)
        feats = np.random.default_rng(6).normal(size=(5, 4))
        out = aggregate(Tensor(feats), head)
        alpha = numpy_attention(feats, head)
        np.testing.assert_allclose(out.data, alpha @ feats, atol=1e-12)

    def test_attention_aggregate_inside_convex_hull(self):
        head = make_head(d=3, seed=7)
        feats = np.random.default_rng(7).normal(size=(9, 3))
        out = aggregate(Tensor(feats), head).data
        assert np.all(out >= feats.min(axis=0) - 1e-12)
        assert np.all(out <= feats.max(axis=0) + 1e-12)

    @pytest.mark.parametrize("kind", MIL_HEAD_KINDS)
    def test_permutation_invariance(self, kind):
        head = make_head(d=3, seed=8, kind=kind)
        feats = np.random.default_rng(8).normal(size=(6, 3))
        perm = np.array([5, 3, 1, 0, 4, 2])
        a = aggregate(Tensor(feats), head).data
        b = aggregate(Tensor(feats[perm]), head).data
        np.testing.assert_allclose(a, b, atol=1e-12)
        if kind == "gated_attention":
            alpha = attention_scores(Tensor(feats), head).data
            alpha_p = attention_scores(Tensor(feats[perm]), head).data
            np.testing.assert_allclose(alpha_p, alpha[perm], atol=1e-12)


class TestClassify:
    def test_zero_head_gives_half(self):
        head = make_head(seed=9)
        _, prob = classify_bag(Tensor(np.random.default_rng(9).normal(size=3)), head)
        assert prob.item() == 0.5

    def test_orthogonal_embedding_gives_half(self):
        head = tiny_head(v1=[1.0, 0.0], v2=[0.0, 0.0], w=[1.0],
                         clf_w=np.array([1.0, 0.0]))
        _, prob = classify_bag(Tensor(np.array([0.0, 7.0])), head)
        assert prob.item() == 0.5

    def test_scalar_example(self):
        head = tiny_head(v1=[1.0], v2=[1.0], w=[1.0], clf_w=np.array([2.0]), clf_b=-1.0)
        logit, prob = classify_bag(Tensor(np.array([1.0])), head)
        assert logit.item() == pytest.approx(1.0, abs=1e-12)
        assert prob.item() == pytest.approx(0.731059, abs=1e-6)


class TestBagLoss:
    def test_ln2_at_zero(self):
        assert bag_loss(Tensor(0.0), 1).item() == pytest.approx(np.log(2.0), abs=1e-12)

    def test_saturation(self):
        assert bag_loss(Tensor(20.0), 1).item() < 1e-8

    def test_gradient_is_prob_minus_label(self):
        p = Parameter("z", 0.0)
        bag_loss(p, 0).backward()
        assert p.grad.item() == pytest.approx(0.5, abs=1e-12)
        numeric = finite_difference(lambda v: bag_loss(Tensor(v), 0).item(), np.array(0.0))
        assert rel_err(p.grad, numeric) < 1e-9


class TestGradients:
    @pytest.mark.parametrize("kind", MIL_HEAD_KINDS)
    def test_full_head_matches_finite_differences(self, kind):
        rng = np.random.default_rng(10)
        reg = ParamRegistry()
        head = init_head(reg, 6, seed=11, kind=kind, attention_dim=5)
        for p in reg.trainable():
            if p.name.startswith("mil.classifier"):
                p.data[...] = rng.normal(size=p.shape) * 0.5
        feats = reg.create("feats", rng.normal(size=(8, 6)))

        def loss_fn():
            logit, _ = bag_forward(feats, head)
            return bag_loss(logit, 1)

        assert grad_check(loss_fn, reg, epsilon=1e-4) < 1e-5

    def test_empty_bag_aggregate(self):
        with pytest.raises(EmptyBagError):
            aggregate(Tensor(np.zeros((0, 3))), make_head())
