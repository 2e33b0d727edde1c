import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from strata.boosting import (GBDTModel, GBDTParams, TrainingError, Tree, find_best_split,
                             log_loss, sigmoid, train, tree_leaf_values)

S = 999_999.0


def soft(G, alpha):
    return math.copysign(max(abs(G) - alpha, 0.0), G)


def exact(**kw):
    """Parameters with all sampling switched off."""
    base = dict(subsample=1.0, colsample_bytree=1.0, learning_rate=1.0, gamma=0.0)
    base.update(kw)
    return GBDTParams(**base)


def leaf_ids(tree, X):
    """Leaf reached by each row, walking the flattened arrays in Python."""
    out = []
    for row in X:
        node = 0
        while tree.feature[node] >= 0:
            x = row[tree.feature[node]]
            go_left = tree.default_left[node] if x == S else x < tree.threshold[node]
            node = tree.left[node] if go_left else tree.right[node]
        out.append(node)
    return np.array(out)


def test_four_row_stump_by_hand():
    X = np.array([[1.0], [2.0], [3.0], [4.0]])
    y = np.array([0, 0, 1, 1])
    model = train(X, y, exact(n_estimators=1, max_depth=1, reg_lambda=1.0, min_child_weight=0))
    tree = model.trees[0]
    assert tree.feature[0] == 0 and tree.threshold[0] == 2.5
    g = 0.5 - y
    h = np.full(4, 0.25)
    left = -g[:2].sum() / (h[:2].sum() + 1)
    right = -g[2:].sum() / (h[2:].sum() + 1)
    assert tree.value[tree.left[0]] == pytest.approx(left, abs=1e-12)
    assert tree.value[tree.right[0]] == pytest.approx(right, abs=1e-12)


@pytest.mark.parametrize("alpha", [0.0, 0.5])
@pytest.mark.parametrize("lam", [0.0, 1.0])
def test_leaf_weights_match_closed_form(alpha, lam):
    rng = np.random.default_rng(int(10 * alpha + lam))
    for _ in range(20):
        n = int(rng.integers(2, 9))
        X = rng.integers(0, 5, size=(n, 2)).astype(float)
        X[rng.random((n, 2)) < 0.3] = S
        y = rng.integers(0, 2, n)
        if y.min() == y.max():
            y[0] = 1 - y[0]
        model = train(X, y, exact(n_estimators=1, max_depth=2, reg_alpha=alpha, reg_lambda=lam,
                                  min_child_weight=0, base_score=0.5))
        tree = model.trees[0]
        g = 0.5 - y
        h = np.full(n, 0.25)
        ids = leaf_ids(tree, X)
        for leaf in np.unique(ids):
            G, H = g[ids == leaf].sum(), h[ids == leaf].sum()
            want = 0.0 if H + lam == 0 else -soft(G, alpha) / (H + lam)
            assert abs(tree.value[leaf] - want) <= 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_training_loss_never_increases(seed):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 100, size=(300, 6)).astype(float)
    X[rng.random(X.shape) < 0.4] = S
    y = (rng.random(300) < sigmoid((X[:, 0] < 50) * 1.5 - 0.7)).astype(int)
    params = GBDTParams(n_estimators=50, max_depth=3, learning_rate=0.3, subsample=1.0,
                        colsample_bytree=1.0, gamma=0.0, seed=seed)
    model = train(X, y, params)
    losses = [log_loss(y, np.full(len(y), model.base_margin))]
    losses += [log_loss(y, m) for m in model.staged_margins(X)]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def _node_gain(g, h, left, lam, alpha, mcw):
    gl, hl, gr, hr = g[left].sum(), h[left].sum(), g[~left].sum(), h[~left].sum()
    if left.sum() < 1 or (~left).sum() < 1 or hl < mcw or hr < mcw:
        return -np.inf

    def score(G, H):
        return soft(G, alpha) ** 2 / (H + lam) if H + lam > 0 else 0.0

    return 0.5 * (score(gl, hl) + score(gr, hr) - score(gl + gr, hl + hr))


def _brute_force(X, g, h, lam, alpha, mcw):
    """Best (gain, feature, threshold, default_left) over every threshold and both routings."""
    best = (-np.inf, -1, 0.0, False)
    for f in range(X.shape[1]):
        x = X[:, f]
        miss = x == S
        vals = np.unique(x[~miss])
        cands = [(0.5 * (a + b), d) for a, b in zip(vals, vals[1:]) for d in (False, True)]
        cands.append((S, False))
        for thr, dleft in cands:
            left = np.where(miss, dleft, x < thr)
            gain = _node_gain(g, h, left, lam, alpha, mcw)
            if gain > best[0] + 1e-12:
                best = (gain, f, thr, dleft)
    return best


def test_default_direction_matches_enumeration():
    rng = np.random.default_rng(4)
    n = 160
    X = rng.integers(0, 30, size=(n, 3)).astype(float)
    X[rng.random(X.shape) < 0.5] = S
    # absence carries signal so the sentinel routing matters
    y = ((X[:, 0] == S) ^ (X[:, 1] < 12) ^ (rng.random(n) < 0.15)).astype(int)
    params = exact(n_estimators=1, max_depth=3, reg_lambda=1.0, min_child_weight=1.0)
    tree = train(X, y, params).trees[0]
    assert tree.depth() == 3
    g, h = 0.5 - y, np.full(n, 0.25)

    def walk(node, rows):
        if tree.feature[node] < 0:
            return
        gain, f, thr, _ = _brute_force(X[rows], g[rows], h[rows], 1.0, 0.0, 1.0)
        assert tree.gain[node] == pytest.approx(gain, abs=1e-9)
        f0, t0 = tree.feature[node], tree.threshold[node]
        x = X[rows, f0]
        gains = {d: _node_gain(g[rows], h[rows], np.where(x == S, d, x < t0), 1.0, 0.0, 1.0)
                 for d in (False, True)}
        if t0 != S:
            preferred = gains[True] > gains[False]
            assert bool(tree.default_left[node]) == preferred
        xs = X[:, f0]
        go_left = np.where(xs == S, tree.default_left[node], xs < t0)
        walk(tree.left[node], rows & go_left)
        walk(tree.right[node], rows & ~go_left)

    walk(0, np.ones(n, dtype=bool))


def test_single_feature_split_examples():
    assert find_best_split([S, S, S, S], [1, -1, 1, -1], [1, 1, 1, 1]) is None
    # absent rows behave like the large values, so they should follow them right
    values = [1.0, 5.0, S, S]
    g = [-1.0, 1.0, 1.0, 1.0]
    h = [1.0, 1.0, 1.0, 1.0]
    p = GBDTParams(min_child_weight=0.0)
    best = find_best_split(values, g, h, p)
    assert best.threshold == 3.0 and best.default_left is False
    right = _node_gain(np.array(g), np.array(h), np.array([True, False, False, False]), 1, 0, 0)
    left = _node_gain(np.array(g), np.array(h), np.array([True, False, True, True]), 1, 0, 0)
    assert right > left and best.gain == pytest.approx(right)


def test_zero_tree_model_returns_base_score():
    model = GBDTModel([], GBDTParams(base_score=0.3), 2)
    assert np.allclose(model.predict_proba(np.zeros((4, 2))), 0.3)
    bias, contrib = model.path_contributions(np.zeros((4, 2)))
    assert bias == pytest.approx(math.log(0.3 / 0.7)) and not contrib.any()


def _stump(feature=0, threshold=5.0, leaves=(-0.4, 0.4), covers=(1.0, 1.0)):
    return Tree(np.array([feature, -1, -1]), np.array([threshold, 0.0, 0.0]),
                np.array([False, False, False]), np.array([1, -1, -1]), np.array([2, -1, -1]),
                np.array([0.0, *leaves]), np.array([sum(covers), *covers]),
                np.array([2.0, 0.0, 0.0]))


def test_hand_built_stump_predictions_and_attribution():
    model = GBDTModel([_stump()], GBDTParams(learning_rate=1.0, base_score=0.5), 2)
    X = np.array([[1.0, 7.0], [9.0, 7.0], [S, 0.0]])
    assert np.allclose(model.predict_proba(X), sigmoid(np.array([-0.4, 0.4, 0.4])))
    bias, contrib = model.path_contributions(X)
    assert bias == pytest.approx(0.0)
    assert contrib[0, 0] == pytest.approx(-0.4)
    assert not contrib[:, 1].any()
    assert np.allclose(bias + contrib.sum(1), model.predict_margin(X))
    imp = model.gain_importance()
    assert imp[0] == 2.0 and imp[1] == 0.0


def test_local_accuracy_and_serialization(tmp_path, rng):
    X = rng.integers(0, 200, size=(500, 8)).astype(float)
    X[rng.random(X.shape) < 0.6] = S
    y = (rng.random(500) < sigmoid((X[:, 1] == S) * 1.0 - (X[:, 2] < 80))).astype(int)
    model = train(X, y, GBDTParams(n_estimators=40, max_depth=5, reg_alpha=0.1))
    bias, contrib = model.path_contributions(X)
    assert np.max(np.abs(bias + contrib.sum(1) - model.predict_margin(X))) < 1e-9
    model.save(tmp_path / "m.json")
    again = GBDTModel.load(tmp_path / "m.json")
    assert np.array_equal(again.predict_margin(X), model.predict_margin(X))
    assert again.to_json() == model.to_json()


def test_row_order_does_not_matter(rng):
    X = rng.integers(0, 50, size=(200, 5)).astype(float)
    X[rng.random(X.shape) < 0.5] = S
    y = rng.integers(0, 2, 200)
    ids = np.arange(1000, 1200)
    params = GBDTParams(n_estimators=10, max_depth=4)
    a = train(X, y, params, row_ids=ids)
    perm = rng.permutation(200)
    b = train(X[perm], y[perm], params, row_ids=ids[perm])
    assert a.to_json() == b.to_json()


def test_gamma_blocks_weak_splits(rng):
    X = rng.random((100, 3))
    y = rng.integers(0, 2, 100)
    model = train(X, y, exact(n_estimators=3, gamma=1e6))
    assert all(t.n_nodes == 1 for t in model.trees)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_leaf_values_agree_with_python_walk(seed):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 10, size=(40, 3)).astype(float)
    X[rng.random(X.shape) < 0.3] = S
    y = rng.integers(0, 2, 40)
    if y.min() == y.max():
        y[0] = 1 - y[0]
    model = train(X, y, GBDTParams(n_estimators=3, max_depth=3, min_child_weight=0, seed=seed))
    for tree in model.trees:
        assert np.array_equal(tree_leaf_values(tree, X), tree.value[leaf_ids(tree, X)])


@pytest.mark.parametrize("bad", [dict(n_estimators=0), dict(max_depth=0), dict(learning_rate=0),
                                 dict(subsample=1.5), dict(reg_lambda=-1), dict(base_score=1.0)])
def test_parameter_validation(bad):
    with pytest.raises(TrainingError):
        GBDTParams(**bad).validate()


def test_training_input_errors():
    X = np.ones((4, 1))
    with pytest.raises(TrainingError, match="single class"):
        train(X, [1, 1, 1, 1])
    with pytest.raises(TrainingError, match="empty"):
        train(np.zeros((0, 1)), [])
    with pytest.raises(TrainingError, match="non-finite"):
        train(np.array([[np.nan], [1.0]]), [0, 1])
    with pytest.raises(TrainingError, match="unknown"):
        GBDTParams().replace(depth=3)


def _interventional_brute_force(model, x, Z):
    """Shapley values of f(x_S, z_rest) averaged over background rows z."""
    p = len(x)

    def f(z, subset):
        row = np.where([j in subset for j in range(p)], x, z)
        return model.predict_margin(row[None])[0]

    phi = np.zeros(p)
    for z in Z:
        for i in range(p):
            others = [j for j in range(p) if j != i]
            for k in range(p):
                w = math.factorial(k) * math.factorial(p - k - 1) / math.factorial(p)
                for subset in itertools.combinations(others, k):
                    s = set(subset)
                    phi[i] += w * (f(z, s | {i}) - f(z, s)) / len(Z)
    return phi


def test_interventional_attribution_matches_enumeration():
    rng = np.random.default_rng(0)
    X = rng.integers(0, 10, size=(300, 4)).astype(float)
    X[rng.random(X.shape) < 0.4] = S
    eta = (X[:, 0] < 5) * 1.0 - (X[:, 1] == S) + (X[:, 2] > 3) * (X[:, 3] < 4)
    y = (rng.random(300) < sigmoid(eta)).astype(int)
    model = train(X, y, GBDTParams(n_estimators=5, max_depth=4))
    x, Z = X[:3], X[10:14]
    bias, contrib = model.interventional_contributions(x, Z)
    assert bias == pytest.approx(model.predict_margin(Z).mean(), abs=1e-12)
    assert np.abs(bias + contrib.sum(1) - model.predict_margin(x)).max() <= 1e-10
    for r in range(len(x)):
        np.testing.assert_allclose(contrib[r], _interventional_brute_force(model, x[r], Z),
                                   atol=1e-10)
