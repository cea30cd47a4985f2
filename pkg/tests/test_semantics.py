import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ordtopk import semantics as S

TOY = S.EmbeddingTable({
    "gt": [1.0, 0.0, 0.0],
    "far": [-1.0, 0.2, 0.0],
    "near": [0.9, 0.3, 0.0],
    "mid": [0.2, 1.0, 0.0],
})
TOY_NAMES = ["gt", "far", "near", "mid"]


def test_similarity_examples():
    t = S.EmbeddingTable({"x": [1.0, 0.0], "y": [0.0, 1.0], "z": [-1.0, 0.0]})
    assert S.similarity(t, "x", "x") == pytest.approx(1.0)
    assert S.similarity(t, "x", "y") == pytest.approx(0.0)
    assert S.similarity(t, "x", "z") == pytest.approx(-1.0)


def test_most_like_picks_the_closest_label():
    # cosines with "gt": far -0.98, near 0.95, mid 0.196
    spec = S.select_targets("most-like", 2, 0, 4, label_names=TOY_NAMES, table=TOY)
    assert spec.targets == (2, 3)
    least = S.select_targets("least-like", 2, 0, 4, label_names=TOY_NAMES, table=TOY)
    assert least.targets == (1, 3)


def test_exhaustive_top1_enumerates_non_gt_labels():
    specs = S.select_targets("exhaustive-top1", 1, 0, 3)
    assert [s.targets for s in specs] == [(1,), (2,)]
    assert all(s.k == 1 and s.gt == 0 for s in specs)


def test_random_targets_are_reproducible():
    a = S.select_targets("random", 5, 3, 20, seed=[4, 17])
    b = S.select_targets("random", 5, 3, 20, seed=[4, 17])
    assert a == b
    assert a != S.select_targets("random", 5, 3, 20, seed=[4, 18])


def test_random_targets_cover_orders_uniformly():
    counts = np.zeros((3, 3))
    for s in range(3000):
        t = S.select_targets("random", 3, 0, 4, seed=s).targets
        for pos, label in enumerate(t):
            counts[pos, label - 1] += 1
    assert np.all(np.abs(counts / 3000 - 1 / 3) < 0.04)


def test_clean_score_strategies():
    probs = np.array([0.5, 0.1, 0.2, 0.05, 0.15])
    hi = S.select_targets("highest-clean", 2, 0, 5, clean_probs=probs)
    lo = S.select_targets("lowest-clean", 2, 0, 5, clean_probs=probs)
    assert hi.targets == (2, 4) and lo.targets == (3, 1)


def test_ties_break_by_ascending_label_id():
    probs = np.array([0.6, 0.1, 0.1, 0.1, 0.1])
    assert S.select_targets("highest-clean", 3, 0, 5, clean_probs=probs).targets == (1, 2, 3)
    assert S.select_targets("lowest-clean", 3, 0, 5, clean_probs=probs).targets == (1, 2, 3)


def test_select_targets_errors():
    with pytest.raises(ValueError, match="unknown strategy"):
        S.select_targets("nearest", 1, 0, 5)
    with pytest.raises(ValueError, match="k=5"):
        S.select_targets("random", 5, 0, 5, seed=0)
    with pytest.raises(ValueError, match="embedding"):
        S.select_targets("most-like", 1, 0, 5)
    with pytest.raises(ValueError, match="clean prediction"):
        S.select_targets("lowest-clean", 1, 0, 5)


def test_target_spec_invariants():
    with pytest.raises(ValueError, match="distinct"):
        S.TargetSpec((1, 1), 0)
    with pytest.raises(ValueError, match="ground truth"):
        S.TargetSpec((1, 0), 0)
    with pytest.raises(ValueError, match="k=3"):
        S.TargetSpec((1, 2, 3), 0).validate(3)


def test_load_embeddings(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("cat 1 0 0\ndog 0.5 0.5 0\n\nfish 0 0 1\n")
    table = S.load_embeddings(p, labels=["cat", "fish"])
    assert table.dimension == 3 and len(table) == 3
    with pytest.raises(KeyError, match="bird"):
        S.load_embeddings(p, labels=["cat", "bird"])


@pytest.mark.parametrize("text,message", [
    ("a 1 2\nb 1\n", "inconsistent"),
    ("a 1 2\na 3 4\n", "duplicate"),
    ("a 1 x\n", "unparsable"),
    ("a 0 0\n", "zero vector"),
])
def test_load_embeddings_errors(tmp_path, text, message):
    p = tmp_path / "e.txt"
    p.write_text(text)
    with pytest.raises(ValueError, match=message):
        S.load_embeddings(p)


def test_bundled_vocabulary():
    table = S.bundled_embeddings()
    assert len(table) == 20 and table.dimension == 50
    assert len(set(S.bundled_vocabulary())) == 20
    assert S.similarity(table, "cat", "dog") > S.similarity(table, "cat", "truck")


@given(st.integers(0, 19), st.integers(1, 9))
def test_most_and_least_like_are_disjoint(gt, k):
    names = S.bundled_vocabulary()
    table = S.bundled_embeddings()
    most = S.select_targets("most-like", k, gt, 20, label_names=names, table=table)
    least = S.select_targets("least-like", k, gt, 20, label_names=names, table=table)
    assert not set(most.targets) & set(least.targets)
    sims = table.similarity_matrix(names)[gt]
    assert list(sims[list(most.targets)]) == sorted(sims[list(most.targets)], reverse=True)


@given(st.sampled_from([s for s in S.STRATEGIES if s != "exhaustive-top1"]), st.integers(0, 19),
       st.integers(1, 19), st.integers(0, 2**32 - 1))
def test_every_spec_is_valid(strategy, gt, k, seed):
    names = S.bundled_vocabulary()
    probs = np.random.default_rng(seed).dirichlet(np.ones(20))
    spec = S.select_targets(strategy, k, gt, 20, label_names=names, table=S.bundled_embeddings(),
                            clean_probs=probs, seed=seed)
    spec.validate(20)
    assert spec.k == k and gt not in spec.targets and len(set(spec.targets)) == k
