import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from ordtopk import losses as L
from ordtopk import tensor as T
from ordtopk.semantics import EmbeddingTable, TargetSpec


def value(t):
    return float(t.numpy())


def random_similarities(rng, n, d=8):
    v = rng.normal(size=(n, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v @ v.T


def random_spec(rng, n, k):
    labels = rng.permutation(n)
    return TargetSpec(tuple(labels[1 : k + 1].tolist()), int(labels[0]))


# hinge losses -------------------------------------------------------------


@pytest.mark.parametrize("z,t,expected", [([2, 5, 3], 1, 0.0), ([2, 5, 3], 0, 3.0), ([4, 4, 1], 0, 0.0)])
def test_cw_loss_examples(z, t, expected):
    assert value(L.cw_loss(z, t)) == expected


@pytest.mark.parametrize("z,targets,expected", [([9, 8, 7, 1], (0, 1, 2), 0.0), ([1, 9, 8, 7], (0, 1), 8.0)])
def test_cw_topk_examples(z, targets, expected):
    assert value(L.cw_topk_loss(z, targets)) == expected


def test_cw_loss_rejects_bad_target():
    with pytest.raises(IndexError):
        L.cw_loss([1.0, 2.0], 2)


def test_cw_topk_matches_direct_evaluation(rng):
    for _ in range(500):
        n = int(rng.integers(3, 12))
        k = int(rng.integers(1, n))
        z = rng.normal(size=n).astype(np.float32)
        targets = tuple(rng.permutation(n)[:k].tolist())
        assert value(L.cw_topk_loss(z, targets)) == pytest.approx(oracles.cw_topk(z.astype(np.float64), targets),
                                                                    abs=1e-5)


def test_batched_losses_match_rows(rng):
    z = rng.normal(size=(6, 10)).astype(np.float32)
    rows = np.array([rng.permutation(10)[:3] for _ in range(6)])
    batch = L.cw_topk_loss(z, rows).numpy()
    for i in range(6):
        assert batch[i] == value(L.cw_topk_loss(z[i], rows[i]))


@given(hnp.arrays(np.float32, st.integers(2, 30), elements=st.floats(-1e3, 1e3, width=32)), st.data())
def test_topk_with_k1_equals_cw(z, data):
    t = data.draw(st.integers(0, len(z) - 1))
    assert value(L.cw_topk_loss(z, [t])) == value(L.cw_loss(z, t))


@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 3, 5]))
def test_topk_zero_iff_ordered(seed, k):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=12).astype(np.float32)
    top, _ = oracles.topk_by_sorting(z, k)
    for targets in (top, tuple(rng.permutation(12)[:k].tolist()), top[::-1]):
        zero = value(L.cw_topk_loss(z, targets)) == 0.0
        assert zero == (oracles.topk_by_sorting(z, k)[0] == tuple(targets))


def test_hinge_gradients_match_finite_differences(rng):
    for _ in range(50):
        z = rng.uniform(-2, 2, 8)
        targets = tuple(rng.permutation(8)[:3].tolist())
        # a hinge kink sits where two logits tie; resample until every gap is clear of the step
        if np.min(np.abs(np.subtract.outer(z, z))[~np.eye(8, dtype=bool)]) < 0.01:
            continue
        zt = T.Tensor(z, requires_grad=True)
        L.cw_topk_loss(zt, targets).backward()
        fd = oracles.central_diff(lambda v: oracles.cw_topk(v, targets), z)
        assert oracles.rel_err(zt.grad, fd) < 1e-3 or (np.linalg.norm(fd) == 0 and not zt.grad.any())


# adversarial distribution --------------------------------------------------


def test_target_logits_follow_the_decreasing_schedule():
    adv = L.build_adv_distribution(TargetSpec((3, 1, 4, 0, 2), 5), 8, alpha=0.0)
    assert np.allclose(adv.logits[[3, 1, 4, 0, 2]], [10, 9.7, 9.4, 9.1, 8.8])


def test_alpha_zero_makes_non_targets_uniform():
    adv = L.build_adv_distribution(TargetSpec((1, 2), 0), 6, alpha=0.0)
    rest = adv.probs[[0, 3, 4, 5]]
    assert np.allclose(adv.logits[[0, 3, 4, 5]], 1e-5)
    assert np.ptp(rest) == 0


def test_non_target_logits_use_mean_similarity(rng):
    sims = random_similarities(rng, 6)
    adv = L.build_adv_distribution(TargetSpec((1, 2), 0), 6, similarities=sims)
    for j in (0, 3, 4, 5):
        assert adv.logits[j] == pytest.approx((sims[1, j] + sims[2, j]) / 2 + 1e-5)


def test_similarities_from_embedding_table():
    table = EmbeddingTable({"a": [1, 0], "b": [0, 1], "c": [1, 1]})
    adv = L.build_adv_distribution(TargetSpec((1,), 0), 3, table=table, label_names=["a", "b", "c"])
    assert adv.logits[0] == pytest.approx(1e-5)
    assert adv.logits[2] == pytest.approx(math.sqrt(0.5) + 1e-5)


def test_alpha_at_or_above_last_target_logit_is_rejected(rng):
    sims = random_similarities(rng, 8)
    spec = TargetSpec((1, 2, 3, 4, 5), 0)
    with pytest.raises(ValueError, match="alpha"):
        L.build_adv_distribution(spec, 8, similarities=sims, alpha=8.8)
    with pytest.raises(ValueError, match="gamma"):
        L.build_adv_distribution(spec, 8, similarities=sims, gamma=0.0)


def test_missing_embeddings_rejected_when_alpha_positive():
    with pytest.raises(ValueError, match="embedding"):
        L.build_adv_distribution(TargetSpec((1,), 0), 3)
    with pytest.raises(KeyError):
        table = EmbeddingTable({"a": [1.0, 0.0], "b": [0.0, 1.0]})
        L.build_adv_distribution(TargetSpec((1,), 0), 3, table=table, label_names=["a", "b", "c"])


def test_ordering_holds_at_the_alpha_boundary(rng):
    for k in (1, 2, 5):
        for _ in range(50):
            spec = random_spec(rng, 20, k)
            sims = random_similarities(rng, 20, d=50)
            alpha = 10 - (k - 1) * 0.3 - 1e-6
            adv = L.build_adv_distribution(spec, 20, similarities=sims, alpha=alpha)
            top, strict = oracles.topk_by_sorting(adv.probs, k)
            assert top == spec.targets and strict


def test_adv_distribution_is_read_only():
    adv = L.build_adv_distribution(TargetSpec((1,), 0), 3, alpha=0.0)
    with pytest.raises(ValueError):
        adv.probs[0] = 1.0


# KL and cross-entropy -----------------------------------------------------


def _adv_from(q):
    q = np.asarray(q, dtype=np.float64)
    spec = TargetSpec((int(np.argmax(q)),), int(np.argmin(q)))
    return L.AdvDistribution(q, np.log(q), spec, 10.0, 0.3, 0.0, 1e-5)


def test_kl_examples():
    q = _adv_from([0.75, 0.25])
    assert value(L.kl_loss([0.5, 0.5], q)) == pytest.approx(0.1438, abs=1e-4)
    p = _adv_from([0.2, 0.3, 0.5])
    assert abs(value(L.kl_loss([0.2, 0.3, 0.5], p))) < 1e-6


def test_kl_zero_log_zero_convention():
    q = _adv_from([0.5, 0.25, 0.25])
    assert value(L.kl_loss([1.0, 0.0, 0.0], q)) == pytest.approx(math.log(2), rel=1e-6)


@given(st.integers(0, 2**32 - 1))
def test_kl_is_nonnegative(seed):
    rng = np.random.default_rng(seed)
    p, q = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
    assert value(L.kl_loss(p, _adv_from(q))) >= -1e-6


def test_kl_is_minimised_at_the_adversarial_distribution(rng):
    sims = random_similarities(rng, 10)
    adv = L.build_adv_distribution(TargetSpec((2, 7, 4), 0), 10, similarities=sims)
    base = oracles.kl(adv.probs, adv.probs)
    for _ in range(200):
        d = rng.normal(size=10) * 1e-3
        d -= d.mean()
        p = adv.probs + d
        if np.all(p > 0):
            assert oracles.kl(p, adv.probs) >= base


def test_kl_from_logits_matches_probability_form(rng):
    sims = random_similarities(rng, 6)
    adv = L.build_adv_distribution(TargetSpec((1, 3), 0), 6, similarities=sims)
    z = rng.normal(size=6).astype(np.float32)
    assert value(L.kl_loss_from_logits(z, adv)) == pytest.approx(oracles.kl(oracles.softmax(z), adv.probs), abs=1e-5)
    assert value(L.kl_loss(T.softmax(T.Tensor(z)), adv)) == pytest.approx(value(L.kl_loss_from_logits(z, adv)),
                                                                          abs=1e-5)


def test_kl_gradient_matches_finite_differences(rng):
    for _ in range(100):
        sims = random_similarities(rng, 8)
        adv = L.build_adv_distribution(random_spec(rng, 8, 3), 8, similarities=sims)
        z = rng.uniform(-2, 2, 8)
        zt = T.Tensor(z, requires_grad=True)
        L.kl_loss_from_logits(zt, adv).backward()
        fd = oracles.central_diff(lambda v: oracles.kl(oracles.softmax(v), adv.probs), z)
        assert oracles.rel_err(zt.grad, fd) < 1e-3


@pytest.mark.parametrize("p,y,expected", [
    ([0.0, 1.0, 0.0], 1, 0.0),
    ([0.5, 0.5], 0, math.log(2)),
    ([0.25] * 4, 2, math.log(4)),
])
def test_cross_entropy_examples(p, y, expected):
    assert value(L.cross_entropy_loss(p, y)) == pytest.approx(expected, abs=1e-6)


def test_cross_entropy_from_logits_is_stable():
    assert value(L.cross_entropy_from_logits([200.0, 0.0], 1)) == pytest.approx(200.0)
