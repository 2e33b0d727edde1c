import numpy as np
import pytest

from strata.cohort import PhenotypeConfig, phenotype
from strata.demographics import STRATUM_LABELS
from strata.synth import (PlantedSignal, SynthConfig, SynthConfigError, concept_dictionary,
                          default_planted_signals, generate, generate_store,
                          heterogeneous_signals, homogeneous_signals, read_ground_truth)

SMALL = dict(n_participants=600, n_concepts_per_domain=(60, 80, 60))


def _small(**kw):
    base = dict(SMALL)
    base.update(kw)
    if "planted_signals" not in base:
        base["planted_signals"] = default_planted_signals(base["n_concepts_per_domain"], 6, 1)
    return SynthConfig(**base)


def test_same_seed_same_bytes(tmp_path):
    cfg = _small(seed=7)
    generate(cfg, tmp_path / "a")
    generate(cfg, tmp_path / "b")
    for name in ("participants.csv", "events.csv", "ground_truth.csv", "planted_concepts.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_different_seed_differs(tmp_path):
    generate(_small(seed=1), tmp_path / "a")
    generate(_small(seed=2), tmp_path / "b")
    assert (tmp_path / "a" / "events.csv").read_bytes() != (tmp_path / "b" / "events.csv").read_bytes()


def test_ground_truth_round_trip(tmp_path):
    _, _, truth = generate(_small(), tmp_path)
    again = read_ground_truth(tmp_path)
    assert again.true_label == truth.true_label
    assert again.planted_codes() == truth.planted_codes()


def test_zero_target_fraction_has_no_phenotype_hits():
    cfg = _small(target_fraction=0.0, lone_crs_rate=0.3)
    store, truth = generate_store(cfg)
    assert not any(truth.true_label.values())
    assert phenotype(store, PhenotypeConfig(cfg.crs_code_set)) == []


def test_targets_are_phenotyped():
    cfg = _small(seed=11)
    store, truth = generate_store(cfg)
    found = {t.person_id for t in phenotype(store, PhenotypeConfig(cfg.crs_code_set))}
    assert found == {p for p, y in truth.true_label.items() if y}


def test_strata_proportions_leave_a_remainder():
    props = (0.1,) * 6
    store, _ = generate_store(_small(n_participants=3000, strata_proportions=props))
    share = np.mean(store.sex == "other_unknown")
    assert abs(share - 0.4) < 0.05


@pytest.mark.slow
def test_planted_prevalence_gap():
    cfg = SynthConfig(n_participants=20_000, n_concepts_per_domain=(100, 100, 100),
                      planted_signals=[PlantedSignal("all", "C0010", 0.30, 0.10)], seed=3)
    store, truth = generate_store(cfg)
    j = store.concept_index("C0010")
    has = np.zeros(store.n_participants, dtype=bool)
    has[store.ev_person[store.ev_concept == j]] = True
    y = np.array([truth.true_label[int(p)] for p in store.person_ids])
    diff = has[y == 1].mean() - has[y == 0].mean()
    assert abs(diff - 0.20) <= 0.02


def test_dictionary_and_signal_helpers():
    d = concept_dictionary((3, 4, 5))
    assert len(d) == 12 and set(d.values()) == {"condition", "procedure", "medication"}
    het = heterogeneous_signals((100, 100, 100), n_flip=4, n_shared=2)
    flips = [s for s in het if s.stratum != "all"]
    assert len(flips) == 4 * len(STRATUM_LABELS)
    for code in {s.concept_code for s in flips}:
        ups = [s for s in flips if s.concept_code == code
               and s.target_prevalence > s.control_prevalence]
        assert len(ups) == 3
    homo = homogeneous_signals((100, 100, 100), n_signals=5)
    assert len(homo) == 5 and all(s.stratum == "all" for s in homo)


@pytest.mark.parametrize("bad", [
    dict(n_participants=0),
    dict(strata_proportions=(0.5,) * 6),
    dict(target_fraction=1.5),
    dict(planted_signals=[PlantedSignal("Nobody", "C0001", 0.3, 0.1)]),
    dict(planted_signals=[PlantedSignal("all", "ZZZ", 0.3, 0.1)]),
    dict(planted_signals=[PlantedSignal("all", "C0001", 0.3, 0.3)]),
])
def test_invalid_configs(bad):
    with pytest.raises(SynthConfigError):
        _small(**bad).validate()
