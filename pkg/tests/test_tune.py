import math

import numpy as np
import pytest
import scipy.stats

from strata.tune import (COMPLETE, FAILED, AllTrialsFailed, Dimension, SearchSpace,
                         SearchSpaceError, TPEConfig, Trial, optimize, random_search,
                         split_history, tpe_suggest, write_trials)

LR = SearchSpace({"learning_rate": Dimension("log_uniform", 0.005, 0.1)})


def test_startup_points_are_uniform():
    space = SearchSpace({"x": Dimension("uniform", 2.0, 5.0), "k": Dimension("int_uniform", 1, 4)})
    xs, ks = [], []
    for seed in range(400):
        p = tpe_suggest([], space, TPEConfig(n_trials=10, n_startup=5, seed=seed))
        assert space.contains(p)
        xs.append(p["x"])
        ks.append(p["k"])
    assert scipy.stats.kstest((np.array(xs) - 2) / 3, "uniform").pvalue > 0.01
    assert scipy.stats.chisquare(np.bincount(ks, minlength=5)[1:]).pvalue > 0.01


def test_suggestions_follow_the_good_cluster():
    rng = np.random.default_rng(0)
    history = []
    for i in range(40):
        good = i % 4 == 0
        lr = float(np.exp(rng.normal(math.log(0.01 if good else 0.09), 0.05)))
        lr = min(max(lr, 0.005), 0.1)
        history.append(Trial(i, {"learning_rate": lr}, 1.0 if good else 0.0))
    hits = 0
    for seed in range(100):
        lr = tpe_suggest(history, LR, TPEConfig(n_trials=100, n_startup=10, seed=seed))["learning_rate"]
        hits += 0.005 <= lr <= 0.03
    assert hits >= 90


def test_flat_objective_stays_in_bounds():
    space = SearchSpace({"x": Dimension("uniform", 0.0, 1.0)})
    best, history = optimize(lambda p: 0.5, space, TPEConfig(n_trials=40, n_startup=5, seed=3))
    assert best.objective == 0.5
    assert all(0.0 <= t.params["x"] <= 1.0 for t in history)


def test_default_space_points_are_valid():
    space = SearchSpace()
    _, history = optimize(lambda p: -p["max_depth"] + p["learning_rate"], space,
                          TPEConfig(n_trials=30, n_startup=5, seed=1))
    for t in history:
        assert space.contains(t.params)
        assert isinstance(t.params["n_estimators"], int)


def test_same_seed_same_sequence():
    f = lambda p: -(p["learning_rate"] - 0.02) ** 2  # noqa: E731
    cfg = TPEConfig(n_trials=25, n_startup=5, seed=9)
    _, a = optimize(f, LR, cfg)
    _, b = optimize(f, LR, cfg)
    assert [t.params for t in a] == [t.params for t in b]


def test_tpe_beats_random_on_a_parabola():
    space = SearchSpace({"x": Dimension("uniform", 0.0, 1.0)})
    f = lambda p: -(p["x"] - 0.3) ** 2  # noqa: E731
    tpe, rnd = [], []
    for seed in range(20):
        tpe.append(-optimize(f, space, TPEConfig(n_trials=100, seed=seed))[0].objective)
        rnd.append(-random_search(f, space, 100, seed=seed)[0].objective)
    assert np.median(tpe) <= np.median(rnd)


def test_failed_trials():
    calls = []

    def f(p):
        calls.append(p)
        if len(calls) % 2:
            raise RuntimeError("boom")
        return p["x"]

    space = SearchSpace({"x": Dimension("uniform", 0.0, 1.0)})
    best, history = optimize(f, space, TPEConfig(n_trials=10, n_startup=3))
    assert sum(t.status == FAILED for t in history) == 5
    assert best.status == COMPLETE
    good, bad = split_history(history, 0.25)
    assert all(t.status == COMPLETE for t in good)
    with pytest.raises(AllTrialsFailed):
        optimize(lambda p: float("nan"), space, TPEConfig(n_trials=3, n_startup=1))


@pytest.mark.parametrize("kw", [dict(kind="cubic", low=0, high=1), dict(kind="uniform", low=1, high=1),
                                dict(kind="log_uniform", low=0, high=1),
                                dict(kind="int_uniform", low=0.5, high=3)])
def test_dimension_validation(kw):
    with pytest.raises(SearchSpaceError):
        Dimension(**kw)


def test_config_validation():
    with pytest.raises(SearchSpaceError):
        TPEConfig(n_trials=5, n_startup=5)
    with pytest.raises(SearchSpaceError):
        TPEConfig(gamma_fraction=1.0)
    with pytest.raises(SearchSpaceError):
        SearchSpace({})


def test_trials_file(tmp_path):
    space = SearchSpace({"x": Dimension("uniform", 0.0, 1.0), "n": Dimension("int_uniform", 1, 3)})
    _, history = optimize(lambda p: p["x"], space, TPEConfig(n_trials=4, n_startup=2))
    write_trials(tmp_path / "t.csv", history)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "trial_index,n,x,objective,status"
    assert len(lines) == 5
