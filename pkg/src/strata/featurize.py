"""Recency encoding over the pre-index window, stored column-sparse.

Only non-sentinel cells are materialized; every other cell is implicitly
``SENTINEL`` (no occurrence in the window).
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .cohort import TARGET, CohortLabel
from .ehr import EventStore, to_day

logger = logging.getLogger(__name__)

SENTINEL = 999_999
FEATURES_HEADER = ["person_id", "concept_code", "recency_days"]


@dataclass(frozen=True)
class RecencyFeatureMatrix:
    """Persons x concepts recency matrix in compressed-column form.

    Column ``j`` holds its materialized cells at
    ``indices[indptr[j]:indptr[j + 1]]`` (row positions, ascending) with the
    matching ``values``.
    """

    person_ids: np.ndarray
    codes: np.ndarray
    domains: np.ndarray
    labels: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    window_days: int = 730
    sentinel: int = SENTINEL

    def __post_init__(self):
        if len(self.labels) != len(self.person_ids):
            raise ValueError("labels and rows differ in length")
        if len(set(self.codes.tolist())) != len(self.codes):
            raise ValueError("duplicate column ids")
        if len(self.values) and (self.values.min() < 0 or self.values.max() > self.window_days):
            raise ValueError("recency values must lie in [0, window_days]")

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.person_ids), len(self.codes)

    @property
    def n_rows(self) -> int:
        return len(self.person_ids)

    @property
    def n_cols(self) -> int:
        return len(self.codes)

    def column_index(self, code: str) -> int:
        hits = np.flatnonzero(self.codes == code)
        if not len(hits):
            raise KeyError(code)
        return int(hits[0])

    def column(self, j: int) -> np.ndarray:
        out = np.full(self.n_rows, self.sentinel, dtype=np.int64)
        lo, hi = self.indptr[j], self.indptr[j + 1]
        out[self.indices[lo:hi]] = self.values[lo:hi]
        return out

    def value(self, person_id, code: str) -> int:
        row = int(np.flatnonzero(self.person_ids == person_id)[0])
        return int(self.column(self.column_index(code))[row])

    def to_dense(self, columns=None, dtype=np.float64) -> np.ndarray:
        """Dense (rows x columns) array with the sentinel filled in."""
        cols = range(self.n_cols) if columns is None else columns
        cols = list(cols)
        out = np.full((self.n_rows, len(cols)), self.sentinel, dtype=dtype, order="F")
        for k, j in enumerate(cols):
            lo, hi = self.indptr[j], self.indptr[j + 1]
            out[self.indices[lo:hi], k] = self.values[lo:hi]
        return out

    def presence_counts(self, row_mask=None) -> np.ndarray:
        """Number of non-sentinel cells per column, optionally over a row subset."""
        if row_mask is None:
            return np.diff(self.indptr)
        hit = np.asarray(row_mask, dtype=bool)[self.indices]
        col_of = np.repeat(np.arange(self.n_cols), np.diff(self.indptr))
        return np.bincount(col_of[hit], minlength=self.n_cols)

    def select_columns(self, columns) -> "RecencyFeatureMatrix":
        cols = np.asarray(list(columns), dtype=np.int64)
        lengths = np.diff(self.indptr)[cols]
        indptr = np.r_[0, np.cumsum(lengths)].astype(np.int64)
        take = np.concatenate([np.arange(self.indptr[j], self.indptr[j + 1]) for j in cols]) \
            if len(cols) else np.zeros(0, dtype=np.int64)
        return RecencyFeatureMatrix(self.person_ids, self.codes[cols], self.domains[cols],
                                    self.labels, indptr, self.indices[take], self.values[take],
                                    self.window_days, self.sentinel)

    def select_codes(self, codes) -> "RecencyFeatureMatrix":
        pos = {c: j for j, c in enumerate(self.codes.tolist())}
        return self.select_columns([pos[c] for c in codes])

    def select_rows(self, rows) -> "RecencyFeatureMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        remap = np.full(self.n_rows, -1, dtype=np.int64)
        remap[rows] = np.arange(len(rows))
        new_row = remap[self.indices]
        keep = new_row >= 0
        col_of = np.repeat(np.arange(self.n_cols), np.diff(self.indptr))[keep]
        new_row = new_row[keep]
        vals = self.values[keep]
        order = np.lexsort((new_row, col_of))
        counts = np.bincount(col_of, minlength=self.n_cols)
        indptr = np.r_[0, np.cumsum(counts)].astype(np.int64)
        return RecencyFeatureMatrix(self.person_ids[rows], self.codes, self.domains,
                                    self.labels[rows], indptr, new_row[order], vals[order],
                                    self.window_days, self.sentinel)


def encode_recency(store: EventStore, cohort: list[CohortLabel], window_days: int = 730,
                   sentinel: int = SENTINEL) -> RecencyFeatureMatrix:
    """Days from each concept's most recent in-window occurrence to the index date."""
    try:
        pidx = store.indices_of([c.person_id for c in cohort])
    except KeyError as exc:
        raise KeyError(f"cohort person missing from store: {exc}") from None
    index_day = np.array([to_day(c.index_date) for c in cohort], dtype=np.int64)
    row_parts, concept_parts, rec_parts = [], [], []
    for r, (p, end) in enumerate(zip(pidx, index_day)):
        sl = store.window_slice(int(p), int(end), window_days)
        if sl.stop > sl.start:
            row_parts.append(np.full(sl.stop - sl.start, r, dtype=np.int64))
            concept_parts.append(store.ev_concept[sl])
            rec_parts.append(end - store.ev_day[sl])
    if row_parts:
        rows = np.concatenate(row_parts)
        concepts = np.concatenate(concept_parts)
        rec = np.concatenate(rec_parts)
    else:
        rows = concepts = rec = np.zeros(0, dtype=np.int64)
    # keep the smallest recency per (concept, row)
    order = np.lexsort((rec, rows, concepts))
    rows, concepts, rec = rows[order], concepts[order], rec[order]
    first = np.ones(len(rows), dtype=bool)
    first[1:] = (rows[1:] != rows[:-1]) | (concepts[1:] != concepts[:-1])
    rows, concepts, rec = rows[first], concepts[first], rec[first]
    cols, col_of = np.unique(concepts, return_inverse=True)
    indptr = np.r_[0, np.cumsum(np.bincount(col_of, minlength=len(cols)))].astype(np.int64)
    labels = np.array([1 if c.label == TARGET else 0 for c in cohort], dtype=np.int8)
    m = RecencyFeatureMatrix(
        np.array([c.person_id for c in cohort], dtype=np.int64),
        store.concepts[cols], store.concept_domain[cols], labels,
        indptr, rows.astype(np.int32), rec.astype(np.int32), window_days, sentinel)
    logger.info("encoded %d x %d recency matrix (%d cells)", m.n_rows, m.n_cols, len(m.values))
    return m


def strip_leakage(matrix: RecencyFeatureMatrix, crs_code_set) -> RecencyFeatureMatrix:
    """Drop every column whose code is in ``crs_code_set``."""
    crs = set(crs_code_set)
    keep = [j for j, c in enumerate(matrix.codes.tolist()) if c not in crs]
    if len(keep) == matrix.n_cols:
        return matrix
    if not keep:
        warnings.warn("leakage stripping removed every column", RuntimeWarning, stacklevel=2)
    return matrix.select_columns(keep)


def write_features(matrix: RecencyFeatureMatrix, path) -> None:
    """Sparse triplet dump; sentinel cells are omitted."""
    col_of = np.repeat(np.arange(matrix.n_cols), np.diff(matrix.indptr))
    order = np.lexsort((matrix.codes[col_of].astype(str), matrix.indices))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FEATURES_HEADER)
        w.writerows(zip(matrix.person_ids[matrix.indices[order]].tolist(),
                        matrix.codes[col_of[order]].tolist(),
                        matrix.values[order].tolist()))


def read_features(path, cohort: list[CohortLabel], domains,
                  window_days: int = 730, sentinel: int = SENTINEL) -> RecencyFeatureMatrix:
    """Rebuild a matrix from a triplet dump; rows follow ``cohort`` order.

    ``domains`` maps concept code to domain, or is the :class:`EventStore`
    the dump was encoded from.
    """
    if isinstance(domains, EventStore):
        store = domains
        domains = {c: store.concept_domain[store.concept_index(c)] for c in store.concepts}
    row_of = {c.person_id: r for r, c in enumerate(cohort)}
    rows, codes, vals = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != FEATURES_HEADER:
            raise ValueError(f"{path}: bad header")
        for line, rec in enumerate(reader, start=2):
            if len(rec) != 3:
                raise ValueError(f"{path}:{line}: malformed row")
            rows.append(row_of[int(rec[0])])
            codes.append(rec[1])
            vals.append(int(rec[2]))
    codes = np.array(codes, dtype=object)
    uniq, col_of = np.unique(codes.astype(str), return_inverse=True)
    rows = np.array(rows, dtype=np.int64)
    order = np.lexsort((rows, col_of))
    indptr = np.r_[0, np.cumsum(np.bincount(col_of, minlength=len(uniq)))].astype(np.int64)
    col_domains = np.array([domains[c] for c in uniq.tolist()], dtype=object)
    labels = np.array([1 if c.label == TARGET else 0 for c in cohort], dtype=np.int8)
    return RecencyFeatureMatrix(np.array([c.person_id for c in cohort], dtype=np.int64),
                                uniq.astype(object), col_domains, labels, indptr,
                                rows[order].astype(np.int32),
                                np.array(vals, dtype=np.int32)[order], window_days, sentinel)
