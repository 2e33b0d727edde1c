import datetime as dt

import numpy as np
import pytest

from strata.ehr import EventStore, to_day


def make_store(people, events):
    """``people``: (id, sex, birth iso, race, ethnicity); ``events``: (id, code, domain, iso date)."""
    pids = [p[0] for p in people]
    ev = list(zip(*events)) if events else ([], [], [], [])
    return EventStore(pids, [p[1] for p in people], [to_day(p[2]) for p in people],
                      [p[3] for p in people], [p[4] for p in people],
                      list(ev[0]), list(ev[1]), list(ev[2]), [to_day(d) for d in ev[3]])


def day(iso: str, offset: int = 0) -> str:
    return (dt.date.fromisoformat(iso) + dt.timedelta(days=offset)).isoformat()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def matrix_from_dense(X, labels, codes=None, domains=None, person_ids=None, sentinel=999_999):
    """Build a recency matrix from a dense array holding the sentinel for absent cells."""
    from strata.featurize import RecencyFeatureMatrix

    X = np.asarray(X)
    n, p = X.shape
    codes = codes or [f"C{j:03d}" for j in range(p)]
    domains = domains or ["condition"] * p
    indptr, indices, values = [0], [], []
    for j in range(p):
        rows = np.flatnonzero(X[:, j] != sentinel)
        indices.extend(rows.tolist())
        values.extend(X[rows, j].astype(int).tolist())
        indptr.append(len(indices))
    return RecencyFeatureMatrix(
        np.arange(1, n + 1) if person_ids is None else np.asarray(person_ids),
        np.array(codes, dtype=object), np.array(domains, dtype=object),
        np.asarray(labels, dtype=np.int8), np.array(indptr, dtype=np.int64),
        np.array(indices, dtype=np.int32), np.array(values, dtype=np.int32), 730, sentinel)


# acceptance criteria register their outcome here; the summary hook prints one line each
CRITERIA: dict[int, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    CRITERIA[number] = f"{'PASS' if ok else 'FAIL'}  [{number:2d}] {title}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[number])
