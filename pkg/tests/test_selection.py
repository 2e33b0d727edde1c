import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings, strategies as st

from strata.boosting import GBDTModel, GBDTParams, Tree, train
from strata.selection import (QuotaConfig, compare_prevalence, count_significant,
                              heterogeneity_tests, kruskal_wallis, prevalence_ranking,
                              rank_by_gain, read_selected, shap_coverage, stage1_prevalence,
                              stage2_gain, two_proportion_z, write_selected)

from conftest import matrix_from_dense

S = 999_999


def _presence_matrix(p_target, p_control, n=100, domains=None):
    """Columns present in exactly round(p * n) targets and controls."""
    cols = []
    for pt, pc in zip(p_target, p_control):
        col = np.full(2 * n, S)
        col[:int(round(pt * n))] = 5
        col[n:n + int(round(pc * n))] = 5
        cols.append(col)
    return matrix_from_dense(np.column_stack(cols), [1] * n + [0] * n, domains=domains)


def test_prevalence_score_and_order():
    m = _presence_matrix([0.6, 0.3, 0.1], [0.2, 0.3, 0.4])
    r = prevalence_ranking(m)
    assert r.score[0] == pytest.approx(0.40)
    assert r.score[1] == 0.0
    assert list(r.order()) == [0, 2, 1]


def test_stage1_quotas_per_domain():
    doms = ["condition", "condition", "procedure", "procedure", "medication"]
    m = _presence_matrix([0.9, 0.5, 0.8, 0.2, 0.4], [0.1] * 5, domains=doms)
    sel = stage1_prevalence(m, QuotaConfig(conditions=1, procedures=2, medications=1))
    assert sel.codes == ["C000", "C002", "C004", "C003"]
    with pytest.warns(RuntimeWarning, match="quota"):
        sel = stage1_prevalence(m, QuotaConfig(conditions=5, procedures=0, medications=0))
    assert sel.codes == ["C000", "C001"]


def _stump_model(n_features, feature, gain=3.0, names=None):
    tree = Tree(np.array([feature, -1, -1]), np.array([5.0, 0, 0]), np.array([False] * 3),
                np.array([1, -1, -1]), np.array([2, -1, -1]), np.array([0.0, -0.3, 0.3]),
                np.array([2.0, 1.0, 1.0]), np.array([gain, 0, 0]))
    return GBDTModel([tree, tree], GBDTParams(learning_rate=1.0), n_features, names)


def test_rank_by_gain_single_feature():
    model = _stump_model(3, 1)
    sel = rank_by_gain(model, ["a", "b", "c"], ["condition"] * 3, k=2)
    assert sel.codes[0] == "b"
    gains = [f.score for f in sel.features]
    assert gains[0] / sum(model.gain_importance()) == 1.0
    assert gains[1] == 0.0 and len(sel) == 2


def test_coverage_cases():
    names = ["A", "B"]
    model = _stump_model(2, 0, names=names)
    X = np.array([[1, 9], [9, 1], [S, 3]])
    m = matrix_from_dense(X, [1, 0, 1], codes=names)
    assert shap_coverage(model, m, ["A", "B"]) == 1.0
    assert shap_coverage(model, m, []) == 0.0
    assert shap_coverage(model, m, ["A"]) == pytest.approx(1.0)
    assert shap_coverage(model, m, ["B"]) == 0.0
    flat = GBDTModel([], GBDTParams(), 2, names)
    with pytest.warns(RuntimeWarning):
        assert shap_coverage(flat, m, ["B"]) == 1.0


def test_stage2_keeps_the_informative_columns(rng):
    n = 400
    X = np.full((n, 6), S)
    y = rng.integers(0, 2, n)
    X[:, 0] = np.where(y == 1, rng.integers(0, 100, n), S)
    X[:, 1] = np.where(rng.random(n) < 0.5, rng.integers(0, 700, n), S)
    m = matrix_from_dense(X, y)
    sel = stage2_gain(m, GBDTParams(n_estimators=20, max_depth=2), k=2)
    assert sel.codes[0] == "C000"
    assert shap_coverage(sel.model, m, sel) > 0.9
    assert shap_coverage(sel.model, m, sel, method="treeshap", n_rows=100, n_background=20,
                         seed=3) > 0.9


def test_kruskal_wallis_fixtures():
    h, p = kruskal_wallis([[1, 2, 3], [4, 5, 6]])
    assert abs(h - 27 / 7) <= 1e-12
    assert p == pytest.approx(scipy.stats.kruskal([1, 2, 3], [4, 5, 6]).pvalue, abs=1e-12)
    assert kruskal_wallis([[1, 2], [1, 2]])[0] == 0.0
    assert kruskal_wallis([[3, 3], [3, 3, 3]]) == (0.0, 1.0)
    with pytest.raises(ValueError):
        kruskal_wallis([[1, 2]])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.integers(0, 6), min_size=1, max_size=12), min_size=2, max_size=5))
def test_kruskal_wallis_matches_scipy(groups):
    pooled = [v for g in groups for v in g]
    if len(set(pooled)) < 2:
        assert kruskal_wallis(groups) == (0.0, 1.0)
        return
    h, p = kruskal_wallis(groups)
    ref = scipy.stats.kruskal(*groups)
    assert h == pytest.approx(ref.statistic, rel=1e-9, abs=1e-9)
    assert p == pytest.approx(ref.pvalue, rel=1e-9, abs=1e-12)


def test_heterogeneity_counts(rng):
    n = 600
    strata = np.array(["a", "b", "c"] * (n // 3))
    X = np.full((n, 5), S)
    X[:, 1] = rng.integers(0, 700, n)                                   # same in every stratum
    X[:, 2] = np.where(strata == "a", rng.integers(0, 50, n), rng.integers(300, 700, n))
    X[:, 3] = np.where((strata == "b") & (rng.random(n) < 0.8), 10, S)  # present mostly in b
    m = matrix_from_dense(X, rng.integers(0, 2, n))
    rows = heterogeneity_tests(m, strata)
    assert rows[0][1:] == (0.0, 1.0)
    assert count_significant(m, strata) >= 2
    assert rows[2][2] < 1e-6 and rows[3][2] < 1e-6
    const = matrix_from_dense(np.full((n, 3), S), rng.integers(0, 2, n))
    assert count_significant(const, strata) == 0


def test_two_proportion_examples():
    z = two_proportion_z(30, 100, 10, 100)
    assert z == pytest.approx(3.5355, abs=1e-3)
    diff, p = compare_prevalence(30, 100, 10, 100)
    assert diff == pytest.approx(0.2) and p == pytest.approx(4.07e-4, rel=0.01)
    assert compare_prevalence(5, 50, 10, 100) == (0.0, 1.0)
    k1, k2 = round(0.0473 * 1184), round(0.0220 * 16376)
    diff, p = compare_prevalence(k1, 1184, k2, 16376)
    assert diff > 0 and p < 0.001
    ref = scipy.stats.chi2_contingency([[k1, 1184 - k1], [k2, 16376 - k2]], correction=False)
    assert p == pytest.approx(ref.pvalue, rel=1e-6)


def test_selected_round_trip(tmp_path, rng):
    m = _presence_matrix([0.6, 0.5, 0.4], [0.1, 0.2, 0.3])
    s1 = stage1_prevalence(m, QuotaConfig(3, 0, 0))
    model = train(m, params=GBDTParams(n_estimators=3, max_depth=1))
    s2 = rank_by_gain(model, list(m.codes), list(m.domains), k=2)
    write_selected(tmp_path / "sel.csv", s1, s2)
    a, b = read_selected(tmp_path / "sel.csv")
    assert a.features == s1.features and b.features == s2.features
