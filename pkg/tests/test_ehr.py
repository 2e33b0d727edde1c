import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from strata.ehr import StoreError, events_in_window, load_store, to_day, write_store

from conftest import day, make_store

PEOPLE = [(1, "female", "1980-05-01", "White", "Not Hispanic or Latino"),
          (2, "male", "1975-01-15", "Black", "Hispanic or Latino")]


def _write(tmp_path, people_rows, event_rows):
    p = tmp_path / "participants.csv"
    e = tmp_path / "events.csv"
    p.write_text("person_id,sex_at_birth,birth_date,race,ethnicity\n"
                 + "".join(",".join(map(str, r)) + "\n" for r in people_rows))
    e.write_text("person_id,concept_code,domain,event_date\n"
                 + "".join(",".join(map(str, r)) + "\n" for r in event_rows))
    return p, e


def test_load_small_pair(tmp_path):
    p, e = _write(tmp_path, PEOPLE, [(1, "C1", "condition", "2020-01-01"),
                                     (1, "P1", "procedure", "2020-02-01"),
                                     (2, "M1", "medication", "2021-03-01")])
    store = load_store(p, e)
    assert store.n_participants == 2
    assert store.n_events == 3
    assert store.participant(2).sex_at_birth == "male"
    assert store.participant(1).birth_date == dt.date(1980, 5, 1)


def test_unknown_person_names_the_id(tmp_path):
    p, e = _write(tmp_path, PEOPLE, [(77, "C1", "condition", "2020-01-01")])
    with pytest.raises(StoreError, match="77"):
        load_store(p, e)


def test_bad_rows_are_reported(tmp_path):
    p, e = _write(tmp_path, PEOPLE, [(1, "C1", "diagnosis", "2020-01-01")])
    with pytest.raises(StoreError, match="domain"):
        load_store(p, e)
    p, e = _write(tmp_path, PEOPLE, [(1, "C1", "condition", "2020-13-01")])
    with pytest.raises(StoreError):
        load_store(p, e)
    p, e = _write(tmp_path, [(1, "robot", "1980-01-01", "White", "x")], [])
    with pytest.raises(StoreError, match="sex_at_birth"):
        load_store(p, e)


def test_event_before_birth_rejected():
    with pytest.raises(StoreError, match="before birth"):
        make_store(PEOPLE, [(1, "C1", "condition", "1970-01-01")])


def test_concept_in_two_domains_rejected():
    with pytest.raises(StoreError, match="domain"):
        make_store(PEOPLE, [(1, "C1", "condition", "2020-01-01"),
                            (2, "C1", "procedure", "2020-01-01")])


def test_events_come_back_date_sorted(rng):
    dates = [day("2020-01-01", int(d)) for d in rng.permutation(40)]
    events = [(1, f"C{i}", "condition", d) for i, d in enumerate(dates)]
    store = make_store(PEOPLE, events)
    got = [e.event_date for e in store.events(1)]
    assert got == sorted(got)
    assert len(got) == 40


def test_window_boundaries():
    end = "2020-06-30"
    store = make_store(PEOPLE, [(1, "A", "condition", end),
                                (1, "B", "condition", day(end, -730)),
                                (1, "C", "condition", day(end, -729)),
                                (1, "D", "condition", day(end, 1))])
    got = {e.concept_code: e for e in events_in_window(store, 1, dt.date(2020, 6, 30), 730)}
    assert set(got) == {"A", "C"}
    assert got["A"].event_date == dt.date(2020, 6, 30)


def test_window_brute_force():
    end = dt.date(2021, 1, 1)
    offsets = [0, 100, 729, 730, 1000]
    store = make_store(PEOPLE, [(1, f"X{o}", "condition", day("2021-01-01", -o)) for o in offsets])
    got = events_in_window(store, 1, end, 730)
    assert sorted(e.concept_code for e in got) == ["X0", "X100", "X729"]
    assert len(events_in_window(store, 1, end, math.inf)) == 5
    with pytest.raises(ValueError):
        events_in_window(store, 1, end, 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-900, 900), min_size=0, max_size=30), st.integers(1, 800))
def test_window_matches_filter(offsets, window):
    end = to_day("2022-01-01")
    events = [(1, f"K{i}", "condition", day("2022-01-01", o)) for i, o in enumerate(offsets)]
    store = make_store(PEOPLE, events)
    got = sorted(to_day(e.event_date) for e in events_in_window(store, 1, end, window))
    want = sorted(end + o for o in offsets if end - window < end + o <= end)
    assert got == want


def test_round_trip(tmp_path):
    store = make_store(PEOPLE, [(2, "M1", "medication", "2021-03-01"),
                                (1, "C1", "condition", "2020-01-01")])
    write_store(store, tmp_path / "p.csv", tmp_path / "e.csv")
    again = load_store(tmp_path / "p.csv", tmp_path / "e.csv")
    assert np.array_equal(again.person_ids, store.person_ids)
    assert np.array_equal(again.ev_day, store.ev_day)
    write_store(again, tmp_path / "p2.csv", tmp_path / "e2.csv")
    assert (tmp_path / "e.csv").read_bytes() == (tmp_path / "e2.csv").read_bytes()
