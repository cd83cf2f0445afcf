import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from precip_uq.forest import ForestConfig, QuantileForest, fit_qrf, predict_qrf
from precip_uq.scoring import LevelGrid

from oracles import forest_quantiles, forest_weights

GRID = LevelGrid()


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.integers(5, 30), st.integers(1, 5), st.integers(1, 4),
       st.booleans())
def test_predictions_equal_exhaustive_oracle(seed, n, trees, min_leaf, ties):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, 3))
    y = rng.integers(0, 6, n).astype(float) if ties else rng.gamma(1.5, 4.0, n)
    forest = fit_qrf((X, y), ForestConfig(n_trees=trees, min_leaf=min_leaf, seed=seed))
    Xq = rng.uniform(size=(4, 3))
    got = predict_qrf(forest, Xq, GRID)
    for row, x in zip(got, Xq):
        assert row.tolist() == forest_quantiles(forest, x, GRID.levels)
        w = forest.weights(x)
        assert np.allclose(w, [float(v) for v in forest_weights(forest, x)], rtol=0, atol=1e-15)


def test_uniform_weights_lowest_atom():
    y = np.arange(1.0, 41.0)
    forest = fit_qrf((np.zeros((40, 1)), y), ForestConfig(n_trees=1, bootstrap=False, min_leaf=40))
    q = predict_qrf(forest, [0.0], LevelGrid((0.025, 0.05, 0.5, 0.975)))
    assert q.tolist() == [1.0, 2.0, 20.0, 39.0]


def test_point_mass_and_constant_targets(rng):
    X = rng.uniform(size=(60, 4))
    forest = fit_qrf((X, np.full(60, 3.25)), ForestConfig(n_trees=20))
    assert np.all(predict_qrf(forest, rng.uniform(size=(10, 4)), GRID) == 3.25)
    for tree in forest.trees:
        assert tree.leaves() and np.all(tree.feature == -1)


def test_tree_structure_invariants(rng):
    X = rng.uniform(size=(200, 5))
    y = X[:, 0] * 10 + rng.standard_normal(200)
    forest = fit_qrf((X, y), ForestConfig(n_trees=10, min_leaf=5, seed=3))
    assert forest.mtry == 2
    for tree in forest.trees:
        leaves = tree.leaves()
        members = np.concatenate(list(leaves.values()))
        assert members.size == np.unique(members).size
        assert all(v.size >= 1 for v in leaves.values())
        internal = np.flatnonzero(tree.feature >= 0)
        assert set(tree.left[internal]) | set(tree.right[internal]) == set(range(1, tree.feature.size))


def test_weights_and_quantile_properties(rng):
    X = rng.uniform(size=(300, 17))
    y = 10 + 5 * X[:, 0] + rng.standard_normal(300)
    forest = fit_qrf((X, y), ForestConfig(n_trees=50))
    Xq = rng.uniform(size=(40, 17))
    q = predict_qrf(forest, Xq, GRID)
    assert np.all(np.diff(q, axis=1) >= 0)
    assert np.all(np.isin(q, y))
    for x in Xq[:10]:
        w = forest.weights(x)
        assert np.all(w >= 0) and abs(w.sum() - 1) <= 1e-9


def test_root_split_on_separating_feature(rng):
    n = 40
    group = np.arange(n) % 2
    X = np.column_stack([group, rng.uniform(size=n)]).astype(float)
    y = np.where(group == 1, 10.0, 0.0) + rng.uniform(-0.1, 0.1, n)
    forest = fit_qrf((X, y), ForestConfig(n_trees=30, mtry=2, min_leaf=1, seed=9))
    for tree in forest.trees:
        bag = np.concatenate(list(tree.leaves().values()))
        if np.unique(group[bag]).size == 2:
            assert tree.feature[0] == 0 and 0 < tree.threshold[0] < 1


def test_deterministic_and_thread_invariant(rng):
    X = rng.uniform(size=(8, 3))
    y = rng.standard_normal(8)
    cfg = ForestConfig(n_trees=2, min_leaf=1, seed=11)
    a, b = fit_qrf((X, y), cfg), fit_qrf((X, y), cfg, n_jobs=2)
    for ta, tb in zip(a.trees, b.trees):
        la, lb = ta.leaves(), tb.leaves()
        assert la.keys() == lb.keys() and all(np.array_equal(la[k], lb[k]) for k in la)
    Xq = rng.uniform(size=(5, 3))
    assert np.array_equal(predict_qrf(a, Xq), predict_qrf(b, Xq, n_jobs=3))


def test_save_load_roundtrip(tmp_path, rng):
    X = rng.uniform(size=(100, 17))
    forest = fit_qrf((X, X[:, 1] + rng.standard_normal(100)), ForestConfig(n_trees=7))
    forest.save(tmp_path / "f.npz")
    back = QuantileForest.load(tmp_path / "f.npz")
    Xq = rng.uniform(size=(20, 17))
    assert np.array_equal(predict_qrf(back, Xq), predict_qrf(forest, Xq))
    assert back.config == forest.config


def test_errors():
    with pytest.raises(ValueError):
        fit_qrf((np.zeros((0, 2)), np.zeros(0)))
    with pytest.raises(ValueError):
        ForestConfig(n_trees=0)
    forest = fit_qrf((np.zeros((5, 2)), np.arange(5.0)), ForestConfig(n_trees=1))
    with pytest.raises(ValueError):
        predict_qrf(forest, [[1.0, 2.0, 3.0]])
