"""Two-stage feature selection and cross-stratum heterogeneity statistics.

Stage 1 ranks concepts by the absolute difference in presence between
targets and controls and keeps a fixed quota per domain.  Stage 2 fits one
boosted model on the survivors and keeps the ``k`` features with the largest
total split gain.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaincc
from scipy.stats import rankdata

from .boosting import GBDTModel, GBDTParams, train
from .ehr import DOMAINS
from .featurize import RecencyFeatureMatrix

logger = logging.getLogger(__name__)

STAGE1, STAGE2 = "stage1", "stage2"
SELECTED_HEADER = ["rank", "concept_code", "domain", "stage", "score"]
HETEROGENEITY_HEADER = ["concept_code", "H", "p"]
SAABAS, TREESHAP = "saabas", "treeshap"
ATTRIBUTIONS = (SAABAS, TREESHAP)


@dataclass(frozen=True)
class PrevalenceRanking:
    codes: np.ndarray
    domains: np.ndarray
    p_target: np.ndarray
    p_control: np.ndarray

    @property
    def score(self) -> np.ndarray:
        return np.abs(self.p_target - self.p_control)

    def order(self) -> np.ndarray:
        """Column positions sorted by score, then target prevalence, then code."""
        return np.array(sorted(range(len(self.codes)),
                               key=lambda j: (-self.score[j], -self.p_target[j], self.codes[j])),
                        dtype=np.int64)


@dataclass(frozen=True)
class QuotaConfig:
    conditions: int = 300
    procedures: int = 500
    medications: int = 300

    def __post_init__(self):
        if min(self.conditions, self.procedures, self.medications) < 0:
            raise ValueError("quotas must be non-negative")

    def for_domain(self, domain: str) -> int:
        return {"condition": self.conditions, "procedure": self.procedures,
                "medication": self.medications}[domain]


@dataclass(frozen=True)
class SelectedFeature:
    concept_code: str
    domain: str
    stage: str
    score: float


@dataclass
class SelectedFeatureSet:
    features: list[SelectedFeature]
    model: GBDTModel | None = field(default=None, repr=False)

    @property
    def codes(self) -> list[str]:
        return [f.concept_code for f in self.features]

    def __len__(self) -> int:
        return len(self.features)


def prevalence_ranking(matrix: RecencyFeatureMatrix) -> PrevalenceRanking:
    y = np.asarray(matrix.labels)
    n_t, n_c = int((y == 1).sum()), int((y == 0).sum())
    if n_t == 0 or n_c == 0:
        raise ValueError("prevalence ranking needs both targets and controls")
    p_t = matrix.presence_counts(y == 1) / n_t
    p_c = matrix.presence_counts(y == 0) / n_c
    return PrevalenceRanking(np.asarray(matrix.codes), np.asarray(matrix.domains), p_t, p_c)


def stage1_prevalence(matrix: RecencyFeatureMatrix,
                      quotas: QuotaConfig | None = None) -> SelectedFeatureSet:
    """Keep the top-scoring concepts of each domain, up to its quota."""
    quotas = quotas or QuotaConfig()
    ranking = prevalence_ranking(matrix)
    order = ranking.order()
    kept = []
    for domain in DOMAINS:
        quota = quotas.for_domain(domain)
        in_domain = [j for j in order if ranking.domains[j] == domain]
        if len(in_domain) < quota:
            warnings.warn(f"only {len(in_domain)} {domain} concepts available for a quota of "
                          f"{quota}; keeping all", RuntimeWarning, stacklevel=2)
        kept.extend(in_domain[:quota])
    kept_set = set(kept)
    score = ranking.score
    feats = [SelectedFeature(str(ranking.codes[j]), str(ranking.domains[j]), STAGE1,
                             float(score[j])) for j in order if j in kept_set]
    logger.info("stage 1 kept %d of %d concepts", len(feats), len(order))
    return SelectedFeatureSet(feats)


def rank_by_gain(model: GBDTModel, codes, domains, k: int = 100) -> SelectedFeatureSet:
    gain = model.gain_importance()
    order = sorted(range(len(codes)), key=lambda j: (-gain[j], codes[j]))
    if k > len(codes):
        warnings.warn(f"k={k} exceeds the {len(codes)} available features; keeping all",
                      RuntimeWarning, stacklevel=2)
    feats = [SelectedFeature(str(codes[j]), str(domains[j]), STAGE2, float(gain[j]))
             for j in order[:k]]
    return SelectedFeatureSet(feats, model)


def stage2_gain(matrix: RecencyFeatureMatrix, params: GBDTParams | None = None, k: int = 100,
                workers=None) -> SelectedFeatureSet:
    """Fit one model on ``matrix`` and keep the ``k`` columns with most split gain.

    The fitted model is attached to the result for coverage accounting.
    """
    if matrix.n_cols == 0:
        raise ValueError("stage 2 needs a non-empty stage 1 set")
    model = train(matrix, params=params or GBDTParams(), workers=workers)
    out = rank_by_gain(model, list(matrix.codes), list(matrix.domains), k)
    logger.info("stage 2 kept %d of %d features", len(out), matrix.n_cols)
    return out


def attribution_importance(model: GBDTModel, X, chunk: int = 2048, method: str = SAABAS,
                           background=None) -> np.ndarray:
    """Mean absolute attribution per feature.

    ``method`` is ``"saabas"`` (path attribution, the default) or
    ``"treeshap"`` (interventional, against the ``background`` rows).
    """
    X = np.asarray(X, dtype=np.float64)
    if method not in ATTRIBUTIONS:
        raise ValueError(f"unknown attribution method {method!r}")
    if method == TREESHAP and background is None:
        raise ValueError("treeshap attribution needs background rows")
    total = np.zeros(model.n_features)
    for lo in range(0, X.shape[0], chunk):
        if method == SAABAS:
            _, contrib = model.path_contributions(X[lo:lo + chunk])
        else:
            _, contrib = model.interventional_contributions(X[lo:lo + chunk], background)
        total += np.abs(contrib).sum(axis=0)
    return total / max(X.shape[0], 1)


def shap_coverage(model: GBDTModel, matrix: RecencyFeatureMatrix, selected, method: str = SAABAS,
                  n_rows: int = 500, n_background: int = 50, seed: int = 0) -> float:
    """Share of total attribution mass carried by the selected features.

    ``selected`` is a :class:`SelectedFeatureSet` or an iterable of codes;
    ``matrix`` columns must be the model's training columns.  Path
    attribution uses every row; the interventional mode explains a seeded
    sample of ``n_rows`` rows against ``n_background`` others.
    """
    codes = selected.codes if isinstance(selected, SelectedFeatureSet) else list(selected)
    names = model.feature_names or list(matrix.codes)
    if list(matrix.codes) != list(names):
        matrix = matrix.select_codes(names)
    X = matrix.to_dense()
    if method == TREESHAP:
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(X))
        background = X[order[:n_background]]
        imp = attribution_importance(model, X[order[n_background:n_background + n_rows]],
                                     method=TREESHAP, background=background)
    else:
        imp = attribution_importance(model, X, method=method)
    total = imp.sum()
    if total <= 0:
        warnings.warn("model carries no attribution mass; coverage set to 1.0",
                      RuntimeWarning, stacklevel=2)
        return 1.0
    pos = {c: j for j, c in enumerate(names)}
    picked = sorted({pos[c] for c in codes if c in pos})
    return float(min(1.0, imp[picked].sum() / total))


def kruskal_wallis(samples) -> tuple[float, float]:
    """Tie-corrected Kruskal-Wallis H and its chi-square p-value."""
    groups = [np.asarray(s, dtype=np.float64).ravel() for s in samples]
    if len(groups) < 2 or any(len(g) == 0 for g in groups):
        raise ValueError("kruskal_wallis needs at least two non-empty groups")
    pooled = np.concatenate(groups)
    n = len(pooled)
    ranks = rankdata(pooled)
    _, counts = np.unique(pooled, return_counts=True)
    ties = 1.0 - float(np.sum(counts.astype(np.float64) ** 3 - counts)) / (n ** 3 - n)
    if ties <= 0:
        return 0.0, 1.0
    bounds = np.cumsum([0] + [len(g) for g in groups])
    h = sum(ranks[a:b].sum() ** 2 / (b - a) for a, b in zip(bounds[:-1], bounds[1:]))
    h = (12.0 / (n * (n + 1)) * h - 3.0 * (n + 1)) / ties
    h = max(h, 0.0)
    return float(h), float(gammaincc((len(groups) - 1) / 2.0, h / 2.0))


def heterogeneity_tests(matrix: RecencyFeatureMatrix, strata) -> list[tuple[str, float, float]]:
    """Per column, Kruskal-Wallis across strata of the recency values.

    ``strata`` gives one label per row (``None`` rows are ignored).  Strata
    with fewer than two members are left out of the test.
    """
    strata = np.array([s if s is not None else "" for s in strata], dtype=object)
    labels = sorted({s for s in strata.tolist() if s})
    members = {s: np.flatnonzero(strata == s) for s in labels}
    small = [s for s in labels if len(members[s]) < 2]
    if small:
        warnings.warn(f"strata with fewer than two members left out: {small}",
                      RuntimeWarning, stacklevel=2)
    used = [members[s] for s in labels if len(members[s]) >= 2]
    out = []
    for j in range(matrix.n_cols):
        col = matrix.column(j)
        if len(used) < 2:
            h, p = 0.0, 1.0
        else:
            h, p = kruskal_wallis([col[rows] for rows in used])
        out.append((str(matrix.codes[j]), h, p))
    return out


def count_significant(matrix: RecencyFeatureMatrix, strata, alpha: float = 0.05) -> int:
    return sum(p < alpha for _, _, p in heterogeneity_tests(matrix, strata))


def two_proportion_z(k1: int, n1: int, k2: int, n2: int) -> float:
    """Pooled-variance z statistic for ``k1/n1 - k2/n2``."""
    if n1 <= 0 or n2 <= 0:
        raise ValueError("group sizes must be positive")
    if not (0 <= k1 <= n1 and 0 <= k2 <= n2):
        raise ValueError("counts must lie in [0, n]")
    p1, p2 = k1 / n1, k2 / n2
    pooled = (k1 + k2) / (n1 + n2)
    var = pooled * (1 - pooled) * (1 / n1 + 1 / n2)
    if var == 0:
        return 0.0
    return (p1 - p2) / math.sqrt(var)


def compare_prevalence(k1: int, n1: int, k2: int, n2: int) -> tuple[float, float]:
    """Difference in proportions and its uncorrected 1-df chi-square p-value."""
    z = two_proportion_z(k1, n1, k2, n2)
    return k1 / n1 - k2 / n2, float(gammaincc(0.5, z * z / 2.0))


def write_selected(path, stage1: SelectedFeatureSet, stage2: SelectedFeatureSet | None = None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SELECTED_HEADER)
        for block in (stage1, stage2):
            if block is None:
                continue
            for rank, f in enumerate(block.features, start=1):
                w.writerow([rank, f.concept_code, f.domain, f.stage, repr(f.score)])


def read_selected(path) -> tuple[SelectedFeatureSet, SelectedFeatureSet]:
    blocks = {STAGE1: [], STAGE2: []}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != SELECTED_HEADER:
            raise ValueError(f"{path}: bad header")
        for rec in reader:
            blocks[rec[3]].append(SelectedFeature(rec[1], rec[2], rec[3], float(rec[4])))
    return SelectedFeatureSet(blocks[STAGE1]), SelectedFeatureSet(blocks[STAGE2])


def write_heterogeneity(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HETEROGENEITY_HEADER)
        for code, h, p in rows:
            w.writerow([code, repr(h), repr(p)])
