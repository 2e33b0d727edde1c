"""Phenotyping, visit-frequency categories, propensity scores and 1:1 matching."""

from __future__ import annotations

import bisect
import csv
import datetime as dt
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .demographics import age_bin, age_years
from .ehr import EventStore, from_day, to_day

logger = logging.getLogger(__name__)

MATCH_COVARIATES = ("age_category", "sex_at_birth", "race", "ethnicity", "visit_frequency")
TARGET, CONTROL = "target", "control"


class CohortError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhenotypeConfig:
    crs_code_set: frozenset
    min_code_count: int = 2
    qualifying_span_days: int = 730

    def __post_init__(self):
        object.__setattr__(self, "crs_code_set", frozenset(self.crs_code_set))
        if self.min_code_count < 1:
            raise CohortError("min_code_count must be >= 1")
        if self.qualifying_span_days <= 0:
            raise CohortError("qualifying_span_days must be positive")


@dataclass(frozen=True)
class CohortLabel:
    person_id: int
    label: str
    index_date: dt.date
    matched_to: int | None = None


def phenotype(store: EventStore, config: PhenotypeConfig) -> list[CohortLabel]:
    """Targets: persons with ``min_code_count`` CRS codes inside one rolling span.

    The index date is the first code of the earliest qualifying run.
    """
    if not config.crs_code_set:
        raise CohortError("crs_code_set is empty")
    idx = [store.concept_index(c) for c in sorted(config.crs_code_set) if store.has_concept(c)]
    if not idx:
        logger.warning("none of the CRS codes occur in the store")
        return []
    is_crs = np.isin(store.ev_concept, idx)
    persons = store.ev_person[is_crs]
    days = store.ev_day[is_crs]
    bounds = np.flatnonzero(np.diff(persons)) + 1
    m, span = config.min_code_count, config.qualifying_span_days
    out = []
    for p_days, start in zip(np.split(days, bounds), np.r_[0, bounds]):
        if len(p_days) < m:
            continue
        gaps = p_days[m - 1:] - p_days[:len(p_days) - m + 1]
        hit = np.flatnonzero(gaps <= span)
        if len(hit):
            pid = int(store.person_ids[persons[start]])
            out.append(CohortLabel(pid, TARGET, from_day(p_days[hit[0]])))
    logger.info("phenotyping found %d targets", len(out))
    return out


def visit_count(store: EventStore, person_index: int, end_day: int, window_days: int) -> int:
    sl = store.window_slice(person_index, end_day, window_days)
    days = store.ev_day[sl]
    return int(np.count_nonzero(np.diff(days))) + 1 if len(days) else 0


def category_of_count(count: int) -> str:
    if count < 12:
        return "low"
    if count <= 24:
        return "mid"
    return "high"


def visit_frequency_category(store: EventStore, person_id, end_date, window_days: int = 730) -> str:
    """``low`` (<12), ``mid`` (12-24) or ``high`` (>24) distinct event dates in the window."""
    end = end_date if isinstance(end_date, (int, np.integer)) else to_day(end_date)
    return category_of_count(visit_count(store, store.index_of(person_id), end, window_days))


def matching_covariates(store: EventStore, person_id, end_day: int, window_days: int = 730) -> dict:
    i = store.index_of(person_id)
    age = age_years(from_day(store.birth_day[i]), from_day(end_day))
    return {
        "age_category": age_bin(age),
        "sex_at_birth": store.sex[i],
        "race": store.race[i],
        "ethnicity": store.ethnicity[i],
        "visit_frequency": category_of_count(visit_count(store, i, end_day, window_days)),
    }


@dataclass
class PropensityModel:
    intercept: float
    coefficients: dict[str, dict[str, float]]
    schema: list[tuple[str, tuple[str, ...]]]
    iterations: int = 0

    def design(self, rows) -> np.ndarray:
        n = len(rows)
        width = sum(len(levels) for _, levels in self.schema)
        X = np.zeros((n, width))
        col = 0
        for name, levels in self.schema:
            pos = {lv: col + j for j, lv in enumerate(levels)}
            for r, row in enumerate(rows):
                value = row[name]
                if value not in pos:
                    raise CohortError(f"level {value!r} of {name} not in propensity schema")
                X[r, pos[value]] = 1.0
            col += len(levels)
        return X

    def _beta(self) -> np.ndarray:
        return np.array([self.coefficients[name][lv] for name, levels in self.schema
                         for lv in levels])

    def score(self, rows) -> np.ndarray:
        z = self.intercept + self.design(rows) @ self._beta()
        return _sigmoid(z)


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def fit_propensity(rows, labels, ridge: float = 1e-6, tol: float = 1e-8,
                   max_iter: int = 100, covariates=MATCH_COVARIATES) -> PropensityModel:
    """Ridge-stabilized logistic regression on one-hot covariates by Newton's method.

    Every level of every covariate gets a coefficient; the ridge term (not
    applied to the intercept) makes the otherwise collinear full one-hot
    design identifiable.
    """
    y = np.asarray(labels, dtype=float)
    if len(rows) != len(y):
        raise CohortError("rows and labels differ in length")
    if y.min(initial=1) == y.max(initial=0):
        raise CohortError("propensity fit needs both classes")
    schema = [(name, tuple(sorted({row[name] for row in rows}))) for name in covariates]
    stub = PropensityModel(0.0, {}, schema)
    X = np.hstack([np.ones((len(rows), 1)), stub.design(rows)])
    pen = np.full(X.shape[1], ridge)
    pen[0] = 0.0
    beta = np.zeros(X.shape[1])
    for it in range(1, max_iter + 1):
        p = _sigmoid(X @ beta)
        grad = X.T @ (y - p) - pen * beta
        hess = (X * (p * (1 - p))[:, None]).T @ X + np.diag(pen)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        beta += step
        # the near-null one-hot directions leave rounding noise in the step,
        # so a vanishing gradient also counts as converged
        if np.max(np.abs(step)) < tol or np.max(np.abs(grad)) < tol:
            break
    else:
        p = _sigmoid(X @ beta)
        gnorm = float(np.linalg.norm(X.T @ (y - p) - pen * beta))
        raise ConvergenceError(
            f"propensity fit did not converge in {max_iter} iterations (gradient norm {gnorm:.3g})")
    coefs, k = {}, 1
    for name, levels in schema:
        coefs[name] = {lv: float(beta[k + j]) for j, lv in enumerate(levels)}
        k += len(levels)
    return PropensityModel(float(beta[0]), coefs, schema, iterations=it)


@dataclass(frozen=True)
class MatchedPair:
    target_id: int
    control_id: int
    target_score: float
    control_score: float
    index_date: dt.date


@dataclass
class MatchResult:
    pairs: list[MatchedPair]
    unmatched: list[int] = field(default_factory=list)

    def labels(self) -> list[CohortLabel]:
        out = []
        for pr in self.pairs:
            out.append(CohortLabel(pr.target_id, TARGET, pr.index_date))
            out.append(CohortLabel(pr.control_id, CONTROL, pr.index_date, pr.target_id))
        return sorted(out, key=lambda c: c.person_id)


def greedy_match(target_ids, target_scores, control_ids, control_scores):
    """Greedy 1:1 nearest-neighbour matching without replacement.

    Targets are visited in descending score (ties: smaller id first); each
    takes the unused control with the smallest absolute score difference,
    ties going to the smaller control id.  Returns a list of
    ``(target_index, control_index)`` pairs into the input sequences.
    """
    controls = sorted(zip(control_scores, control_ids, range(len(control_ids))))
    c_scores = [c[0] for c in controls]
    c_ids = [c[1] for c in controls]
    c_pos = [c[2] for c in controls]
    order = sorted(range(len(target_ids)), key=lambda i: (-target_scores[i], target_ids[i]))
    out = []
    for t in order:
        if not c_scores:
            break
        s = target_scores[t]
        i = bisect.bisect_left(c_scores, s)
        best = None
        if i < len(c_scores):
            best = i
        if i > 0:
            j = bisect.bisect_left(c_scores, c_scores[i - 1])
            if best is None:
                best = j
            else:
                dj, di = s - c_scores[j], c_scores[best] - s
                if dj < di or (dj == di and c_ids[j] < c_ids[best]):
                    best = j
        out.append((t, c_pos[best]))
        del c_scores[best], c_ids[best], c_pos[best]
    return out


def match_controls(targets: list[CohortLabel], controls, model: PropensityModel,
                   store: EventStore, window_days: int = 730) -> MatchResult:
    """Match each target to one control; controls inherit the target's index date.

    ``controls`` are candidate person ids.  Control covariates are measured
    over their most recent ``window_days`` of recorded history.
    """
    control_ids = [int(c) for c in controls]
    t_rows = [matching_covariates(store, t.person_id, to_day(t.index_date), window_days)
              for t in targets]
    c_rows = []
    for c in control_ids:
        last = store.last_event_day(store.index_of(c))
        if last is None:
            raise CohortError(f"control candidate {c} has no recorded events")
        c_rows.append(matching_covariates(store, c, last, window_days))
    t_scores = model.score(t_rows).tolist() if t_rows else []
    c_scores = model.score(c_rows).tolist() if c_rows else []
    pairs = greedy_match([t.person_id for t in targets], t_scores, control_ids, c_scores)
    matched = [MatchedPair(targets[t].person_id, control_ids[c], t_scores[t], c_scores[c],
                           targets[t].index_date) for t, c in pairs]
    done = {p.target_id for p in matched}
    unmatched = sorted(t.person_id for t in targets if t.person_id not in done)
    if unmatched:
        logger.warning("no eligible controls left for %d targets: %s%s", len(unmatched),
                       unmatched[:10], " ..." if len(unmatched) > 10 else "")
    return MatchResult(matched, unmatched)


def standardized_mean_differences(t_rows, c_rows, covariates=MATCH_COVARIATES) -> dict[str, float]:
    """Per covariate, the largest absolute SMD over its one-hot levels."""
    out = {}
    for name in covariates:
        levels = sorted({r[name] for r in t_rows} | {r[name] for r in c_rows})
        worst = 0.0
        for lv in levels:
            pt = np.mean([r[name] == lv for r in t_rows]) if t_rows else 0.0
            pc = np.mean([r[name] == lv for r in c_rows]) if c_rows else 0.0
            sd = np.sqrt((pt * (1 - pt) + pc * (1 - pc)) / 2)
            if sd > 0:
                worst = max(worst, abs(pt - pc) / sd)
        out[name] = float(worst)
    return out


@dataclass
class CohortBuild:
    labels: list[CohortLabel]
    model: PropensityModel
    match: MatchResult
    smd_before: dict[str, float]
    smd_after: dict[str, float]
    n_candidates: int


def build_cohort(store: EventStore, config: PhenotypeConfig, window_days: int = 730,
                 ridge: float = 1e-6, targets: list[CohortLabel] | None = None) -> CohortBuild:
    """Phenotype (unless ``targets`` are given), fit propensity scores and match."""
    if targets is None:
        targets = phenotype(store, config)
    target_ids = {t.person_id for t in targets}
    candidates = [int(pid) for i, pid in enumerate(store.person_ids)
                  if int(pid) not in target_ids and store.offsets[i + 1] > store.offsets[i]]
    if not targets or not candidates:
        raise CohortError("need at least one target and one eligible control")
    t_rows = [matching_covariates(store, t.person_id, to_day(t.index_date), window_days)
              for t in targets]
    c_rows = [matching_covariates(store, c, store.last_event_day(store.index_of(c)), window_days)
              for c in candidates]
    model = fit_propensity(t_rows + c_rows, [1] * len(t_rows) + [0] * len(c_rows), ridge=ridge)
    result = match_controls(targets, candidates, model, store, window_days)
    c_pos = {c: k for k, c in enumerate(candidates)}
    t_pos = {t.person_id: k for k, t in enumerate(targets)}
    smd_before = standardized_mean_differences(t_rows, c_rows)
    smd_after = standardized_mean_differences([t_rows[t_pos[p.target_id]] for p in result.pairs],
                                              [c_rows[c_pos[p.control_id]] for p in result.pairs])
    logger.info("matched %d pairs from %d targets / %d candidate controls",
                len(result.pairs), len(targets), len(candidates))
    return CohortBuild(result.labels(), model, result, smd_before, smd_after, len(candidates))


COHORT_HEADER = ["person_id", "label", "index_date", "matched_to"]


def write_cohort(labels: list[CohortLabel], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COHORT_HEADER)
        for c in labels:
            w.writerow([c.person_id, c.label, c.index_date.isoformat(),
                        "" if c.matched_to is None else c.matched_to])


def read_cohort(path) -> list[CohortLabel]:
    out = []
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != COHORT_HEADER:
            raise CohortError(f"{path}: bad header")
        for line, row in enumerate(reader, start=2):
            if len(row) != 4 or row[1] not in (TARGET, CONTROL):
                raise CohortError(f"{path}:{line}: malformed row")
            out.append(CohortLabel(int(row[0]), row[1], dt.date.fromisoformat(row[2]),
                                   int(row[3]) if row[3] else None))
    return out
