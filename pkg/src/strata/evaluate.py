"""Metrics, stratified folds and the global-versus-stratum benchmark.

The benchmark trains one global model on every row and one model per
sex x age stratum, each with its own tuned hyperparameters, and compares
their pooled out-of-fold AUCs stratum by stratum.
"""

from __future__ import annotations

import logging
import math
import warnings
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.stats import rankdata

from .boosting import GBDTParams, train
from .cohort import TARGET, CohortLabel
from .demographics import REMAINDER, STRATUM_LABELS, assign_stratum
from .ehr import EventStore
from .featurize import RecencyFeatureMatrix
from .selection import QuotaConfig, stage1_prevalence, stage2_gain
from .tune import SearchSpace, TPEConfig, optimize

logger = logging.getLogger(__name__)

GLOBAL = "global"
UNDEFINED = "n/a"

__all__ = ["assign_stratum", "auc", "roc_points", "Metrics", "threshold_metrics",
           "stratified_kfold", "weighted_total", "cohort_statistics", "BenchmarkConfig",
           "run_benchmark", "GroupReport"]


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with midranks, so tied scores earn half credit."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos = y == 1
    n_p = int(pos.sum())
    n_n = len(y) - n_p
    if n_p == 0 or n_n == 0:
        raise ValueError("AUC needs both classes")
    r = rankdata(s)
    return float((r[pos].sum() - n_p * (n_p + 1) / 2.0) / (n_p * n_n))


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """FPR/TPR pairs at every distinct score threshold, from (0, 0) to (1, 1)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels) == 1
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    n_p, n_n = y.sum(), len(y) - y.sum()
    return np.r_[0.0, fp / max(n_n, 1)], np.r_[0.0, tp / max(n_p, 1)]


@dataclass(frozen=True)
class Metrics:
    auc: float
    f1: float
    sensitivity: float
    specificity: float
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_counts(cls, tp: int, fp: int, tn: int, fn: int, auc_value=math.nan) -> "Metrics":
        def ratio(a, b):
            return a / b if b else 0.0

        return cls(float(auc_value), ratio(2 * tp, 2 * tp + fp + fn), ratio(tp, tp + fn),
                   ratio(tn, tn + fp), tp, fp, tn, fn)


def threshold_metrics(scores, labels, threshold: float = 0.5) -> Metrics:
    """Confusion-matrix metrics with ``score >= threshold`` called positive."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels) == 1
    if y.all() or not y.any():
        raise ValueError("threshold metrics need both classes")
    pred = s >= threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    tn = int(np.sum(~pred & ~y))
    fn = int(np.sum(~pred & y))
    return Metrics.from_counts(tp, fp, tn, fn, auc(s, y.astype(int)))


def stratified_kfold(labels, k: int = 10, seed: int = 0, groups=None) -> np.ndarray:
    """Fold id per row, balanced within every class and (optionally) group.

    Rows are shuffled within each (class, group) cell and dealt round-robin
    with one counter running across all cells, so every fold's class counts
    and overall size are within one of their exact shares.
    """
    y = np.asarray(labels)
    n = len(y)
    classes = np.unique(y)
    for c in classes:
        if np.sum(y == c) < k:
            raise ValueError(f"class {c!r} has fewer than k={k} members")
    g = np.zeros(n, dtype=np.int64) if groups is None else \
        np.unique(np.asarray(groups, dtype=str), return_inverse=True)[1]
    rng = np.random.default_rng(seed)
    folds = np.empty(n, dtype=np.int64)
    counter = 0
    for c in classes:
        for grp in np.unique(g):
            cell = np.flatnonzero((y == c) & (g == grp))
            cell = cell[rng.permutation(len(cell))]
            folds[cell] = (counter + np.arange(len(cell))) % k
            counter += len(cell)
    return folds


def weighted_total(aucs, shares) -> float:
    a = np.asarray(aucs, dtype=np.float64)
    w = np.asarray(shares, dtype=np.float64)
    if a.shape != w.shape:
        raise ValueError("one share per AUC required")
    if abs(w.sum() - 1.0) > 1e-6:
        raise ValueError(f"shares sum to {w.sum():.9f}, not 1")
    return float(np.dot(w, a))


def format_percentage(k: int, n: int) -> str:
    return UNDEFINED if n == 0 else f"{100.0 * k / n:.1f}%"


@dataclass(frozen=True)
class CohortStatRow:
    group: str
    n: int
    targets: int

    @property
    def percentage(self) -> str:
        return format_percentage(self.targets, self.n)

    def to_dict(self) -> dict:
        return {"group": self.group, "n": self.n, "targets": self.targets,
                "target_percentage": self.percentage}


def row_strata(store: EventStore, cohort: list[CohortLabel]) -> list[str]:
    """Stratum label per cohort row; the remainder bucket for other sexes."""
    out = []
    for c in cohort:
        s = assign_stratum(store.participant(c.person_id), c.index_date)
        out.append(REMAINDER if s is None else s.label)
    return out


def cohort_statistics(cohort: list[CohortLabel], store: EventStore | None = None,
                      strata=None) -> list[CohortStatRow]:
    """Rows per stratum (the remainder bucket only when non-empty) plus a total."""
    if strata is None:
        strata = row_strata(store, cohort)
    return stratum_counts([int(c.label == TARGET) for c in cohort], strata)


def stratum_counts(labels, strata) -> list[CohortStatRow]:
    n, t = {}, {}
    for y, s in zip(labels, strata):
        n[s] = n.get(s, 0) + 1
        t[s] = t.get(s, 0) + int(y)
    rows = [CohortStatRow(label, n.get(label, 0), t.get(label, 0)) for label in STRATUM_LABELS]
    if n.get(REMAINDER):
        rows.append(CohortStatRow(REMAINDER, n[REMAINDER], t[REMAINDER]))
    rows.append(CohortStatRow("Total", sum(r.n for r in rows), sum(r.targets for r in rows)))
    return rows


def substream(seed: int, name: str) -> int:
    """Child seed for a named consumer of the master seed."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


@dataclass
class BenchmarkConfig:
    folds: int = 10
    threshold: float = 0.5
    paper_mode: bool = False
    quotas: QuotaConfig = field(default_factory=QuotaConfig)
    k: int = 100
    selection_params: GBDTParams = field(default_factory=GBDTParams)
    model_params: GBDTParams = field(default_factory=GBDTParams)
    tuning: TPEConfig | None = field(default_factory=lambda: TPEConfig(n_trials=30, n_startup=10))
    tune_folds: int = 3
    space: SearchSpace = field(default_factory=SearchSpace)
    seed: int = 0
    workers: int | None = None


@dataclass
class RegimeResult:
    name: str
    n: int
    params: dict
    tuning_auc: float | None
    folds: int
    fold_aucs: list[float]
    oof: np.ndarray = field(repr=False)
    rows: np.ndarray = field(repr=False)
    trials: list = field(default_factory=list, repr=False)
    fold_metrics: list = field(default_factory=list, repr=False)

    def fold_summary(self) -> dict:
        """Mean and sample std over folds of each threshold metric."""
        out = {}
        for key in ("auc", "f1", "sensitivity", "specificity"):
            v = np.array([getattr(m, key) for m in self.fold_metrics])
            out[key] = {"mean": float(v.mean()) if len(v) else None,
                        "std": float(v.std(ddof=1)) if len(v) > 1 else None}
        return out


@dataclass
class StratumRow:
    stratum: str
    n: int
    share: float
    auc_global: float
    auc_group: float

    @property
    def delta(self) -> float:
        return self.auc_group - self.auc_global


@dataclass
class GroupReport:
    rows: list[StratumRow]
    total_global: float
    total_group: float
    global_metrics: Metrics
    combined_metrics: Metrics
    regimes: dict[str, RegimeResult] = field(repr=False)
    labels: np.ndarray = field(repr=False)
    strata: list[str] = field(repr=False)
    selected: dict = field(default_factory=dict, repr=False)

    @property
    def total_delta(self) -> float:
        return self.total_group - self.total_global

    def combined_scores(self) -> np.ndarray:
        """Stratum-model predictions where available, global ones elsewhere."""
        out = self.regimes[GLOBAL].oof.copy()
        for name, reg in self.regimes.items():
            if name != GLOBAL:
                out[reg.rows] = reg.oof[reg.rows]
        return out

    def to_dict(self, roc_limit: int = 200) -> dict:
        def roc(scores):
            fpr, tpr = roc_points(scores, self.labels)
            if len(fpr) > roc_limit:
                keep = np.unique(np.linspace(0, len(fpr) - 1, roc_limit).round().astype(int))
                fpr, tpr = fpr[keep], tpr[keep]
            return [[float(a), float(b)] for a, b in zip(fpr, tpr)]

        regimes = {}
        for name, reg in self.regimes.items():
            fa = np.asarray(reg.fold_aucs)
            regimes[name] = {
                "n": reg.n, "folds": reg.folds, "params": reg.params,
                "tuning_auc": reg.tuning_auc,
                "pooled_auc": auc(reg.oof[reg.rows], self.labels[reg.rows]),
                "fold_auc_mean": float(fa.mean()) if len(fa) else None,
                "fold_auc_std": float(fa.std(ddof=1)) if len(fa) > 1 else None,
                "fold_metrics": reg.fold_summary(),
            }
        return {
            "strata": [{"stratum": r.stratum, "n": r.n, "share": r.share,
                        "auc_global": r.auc_global, "auc_group": r.auc_group,
                        "delta": r.delta} for r in self.rows],
            "total": {"auc_global": self.total_global, "auc_group": self.total_group,
                      "delta": self.total_delta},
            "global_metrics": asdict(self.global_metrics),
            "combined_metrics": asdict(self.combined_metrics),
            "regimes": regimes,
            "roc": {"global": roc(self.regimes[GLOBAL].oof), "combined": roc(self.combined_scores())},
        }


class _Selector:
    """Feature selection per set of held-out folds, computed once and reused."""

    def __init__(self, matrix: RecencyFeatureMatrix, folds: np.ndarray, cfg: BenchmarkConfig):
        self.matrix, self.folds, self.cfg = matrix, folds, cfg
        self.cache: dict[tuple, list[str]] = {}

    def codes(self, held_out: tuple) -> list[str]:
        if self.cfg.paper_mode:
            held_out = ()
        if held_out not in self.cache:
            rows = np.flatnonzero(~np.isin(self.folds, held_out))
            sub = self.matrix.select_rows(rows)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                s1 = stage1_prevalence(sub, self.cfg.quotas)
                s2 = stage2_gain(sub.select_codes(s1.codes), self.cfg.selection_params,
                                 self.cfg.k, self.cfg.workers)
            self.cache[held_out] = s2.codes
            logger.info("selected %d features with folds %s held out", len(s2.codes), held_out)
        return self.cache[held_out]


def _fit_predict(X, y, ids, train_rows, test_rows, params, workers):
    model = train(X[train_rows], y[train_rows], params, row_ids=ids[train_rows], workers=workers)
    return model.predict_proba(X[test_rows])


def _tune(name, X, y, ids, cfg: BenchmarkConfig):
    """TPE over the search space; the objective is mean inner-CV AUC."""
    base = cfg.model_params.replace(seed=substream(cfg.seed, f"model:{name}") % 2 ** 31)
    if cfg.tuning is None or cfg.tuning.n_trials == 0:
        return asdict(base), None, []
    k = min(cfg.tune_folds, int(min(np.sum(y == 1), np.sum(y == 0))))
    if k < 2:
        warnings.warn(f"{name}: too few rows to tune; using default parameters",
                      RuntimeWarning, stacklevel=2)
        return asdict(base), None, []
    inner = stratified_kfold(y, k, substream(cfg.seed, f"inner:{name}"))

    def objective(point):
        params = base.replace(**point)
        scores = np.empty(len(y))
        for f in range(k):
            te = inner == f
            scores[te] = _fit_predict(X, y, ids, ~te, te, params, cfg.workers)
        return np.mean([auc(scores[inner == f], y[inner == f]) for f in range(k)])

    tcfg = TPEConfig(cfg.tuning.n_trials, cfg.tuning.gamma_fraction, cfg.tuning.n_startup,
                     cfg.tuning.n_candidates, substream(cfg.seed, f"tune:{name}") % 2 ** 31)
    best, history = optimize(objective, cfg.space, tcfg)
    logger.info("%s: tuned AUC %.4f with %s", name, best.objective, best.params)
    return asdict(base.replace(**best.params)), best.objective, history


@dataclass
class TuneOutcome:
    params: dict
    tuning_auc: float | None
    history: list = field(default_factory=list, repr=False)


def regime_rows(labels, strata, min_per_class: int = 2) -> dict[str, np.ndarray]:
    """Row positions of the global regime and of every usable stratum."""
    labels = np.asarray(labels)
    strata_arr = np.array(list(strata), dtype=object)
    out = {GLOBAL: np.arange(len(labels))}
    for label in STRATUM_LABELS:
        rows = np.flatnonzero(strata_arr == label)
        y_r = labels[rows]
        if len(rows) == 0 or min(np.sum(y_r == 1), np.sum(y_r == 0)) < min_per_class:
            warnings.warn(f"{label}: too few rows of each class; left out of the table",
                          RuntimeWarning, stacklevel=2)
            continue
        out[label] = rows
    return out


def tune_regimes(matrix: RecencyFeatureMatrix, strata, config: BenchmarkConfig | None = None,
                 codes=None) -> dict[str, TuneOutcome]:
    """Independently tuned parameters for the global model and each stratum model.

    Tuning sees the features selected on the full cohort (``codes``, or a
    fresh selection when omitted).
    """
    cfg = config or BenchmarkConfig()
    labels = np.asarray(matrix.labels, dtype=np.int64)
    ids = np.asarray(matrix.person_ids)
    if codes is None:
        codes = _Selector(matrix, np.zeros(len(labels), dtype=np.int64), cfg).codes(())
    X = matrix.select_codes(codes).to_dense()
    out = {}
    for name, rows in regime_rows(labels, strata).items():
        params, best, history = _tune(name, X[rows], labels[rows], ids[rows], cfg)
        out[name] = TuneOutcome(params, best, history)
    return out


def _regime(name, rows, matrix, labels, ids, folds, selector: _Selector, cfg: BenchmarkConfig,
            tuned: TuneOutcome):
    """Cross-validate one regime on ``rows`` with fixed parameters."""
    y_r = labels[rows]
    k = min(cfg.folds, int(np.sum(y_r == 1)), int(np.sum(y_r == 0)))
    if k < cfg.folds:
        warnings.warn(f"{name}: {k} folds instead of {cfg.folds} (small class)",
                      RuntimeWarning, stacklevel=3)
    params = GBDTParams(**tuned.params)
    oof = np.full(len(labels), np.nan)
    local = folds[rows] % k
    fold_aucs, fold_metrics = [], []
    dense = {}
    for f in range(k):
        held = tuple(int(g) for g in range(cfg.folds) if g % k == f)
        codes = tuple(selector.codes(held))
        if codes not in dense:
            dense[codes] = matrix.select_codes(codes).to_dense()
        te = rows[local == f]
        tr = rows[local != f]
        oof[te] = _fit_predict(dense[codes], labels, ids, tr, te, params, cfg.workers)
        if 0 < labels[te].sum() < len(te):
            fold_metrics.append(threshold_metrics(oof[te], labels[te], cfg.threshold))
            fold_aucs.append(fold_metrics[-1].auc)
    logger.info("%s: pooled out-of-fold AUC %.4f over %d rows", name,
                auc(oof[rows], y_r), len(rows))
    return RegimeResult(name, len(rows), tuned.params, tuned.tuning_auc, k, fold_aucs, oof,
                        rows, tuned.history, fold_metrics)


def run_benchmark(store: EventStore | None, cohort: list[CohortLabel],
                  matrix: RecencyFeatureMatrix, config: BenchmarkConfig | None = None,
                  strata=None, tuned: dict[str, TuneOutcome] | None = None) -> GroupReport:
    """Global model versus six stratum models, all cross-validated on shared folds.

    ``matrix`` rows follow ``cohort``; it should already have the leakage
    codes removed.  Feature selection runs inside every training split
    unless ``config.paper_mode`` is set, in which case it runs once on all
    rows.  Parameters come from ``tuned`` when given, otherwise every
    regime is tuned first.
    """
    cfg = config or BenchmarkConfig()
    if strata is None:
        strata = row_strata(store, cohort)
    strata = list(strata)
    if len(strata) != matrix.n_rows:
        raise ValueError("one stratum label per matrix row required")
    labels = np.asarray(matrix.labels, dtype=np.int64)
    ids = np.asarray(matrix.person_ids)
    folds = stratified_kfold(labels, cfg.folds, substream(cfg.seed, "folds"), groups=strata)
    selector = _Selector(matrix, folds, cfg)
    rows_by_regime = regime_rows(labels, strata)
    if tuned is None:
        tuned = tune_regimes(matrix, strata, cfg, selector.codes(()))
    missing = set(rows_by_regime) - set(tuned)
    if missing:
        raise ValueError(f"no parameters for regime(s) {sorted(missing)}")

    regimes = {name: _regime(name, rows, matrix, labels, ids, folds, selector, cfg, tuned[name])
               for name, rows in rows_by_regime.items()}
    evaluated = [s for s in STRATUM_LABELS if s in regimes]
    n_total = sum(regimes[s].n for s in evaluated)
    table = []
    for s in evaluated:
        reg = regimes[s]
        table.append(StratumRow(s, reg.n, reg.n / n_total,
                                auc(regimes[GLOBAL].oof[reg.rows], labels[reg.rows]),
                                auc(reg.oof[reg.rows], labels[reg.rows])))
    shares = [r.share for r in table]
    report = GroupReport(
        table,
        weighted_total([r.auc_global for r in table], shares) if table else math.nan,
        weighted_total([r.auc_group for r in table], shares) if table else math.nan,
        threshold_metrics(regimes[GLOBAL].oof, labels, cfg.threshold),
        labels=labels, strata=strata, regimes=regimes, combined_metrics=None,
        selected={"full": selector.codes(())})
    report.combined_metrics = threshold_metrics(report.combined_scores(), labels, cfg.threshold)
    return report
