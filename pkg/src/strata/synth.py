"""Synthetic cohort generator with planted, stratum-specific risk concepts.

Every person draws from its own random stream keyed by ``(seed, person
index)``, so a person's data does not depend on generation order.  The
generator also writes the ground truth needed to score phenotyping and
feature selection.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .demographics import STRATUM_LABELS, REMAINDER
from .ehr import EVENT_HEADER, PARTICIPANT_HEADER, DOMAINS, EventStore, iso_dates, to_day

logger = logging.getLogger(__name__)

# Reference cohort: stratum sizes and CRS target counts.
TABLE1_COUNTS = {
    "Male 18-40": (291, 174),
    "Male 40-60": (1184, 598),
    "Male 60+": (3566, 1782),
    "Female 18-40": (1295, 619),
    "Female 40-60": (4089, 2039),
    "Female 60+": (7135, 3568),
}
_TABLE1_TOTAL = sum(n for n, _ in TABLE1_COUNTS.values())
DEFAULT_PROPORTIONS = tuple(TABLE1_COUNTS[s][0] / _TABLE1_TOTAL for s in STRATUM_LABELS)
# relative target rate per stratum (1.0 = cohort average of 50%)
TABLE1_RATE_RATIO = tuple(2 * TABLE1_COUNTS[s][1] / TABLE1_COUNTS[s][0] for s in STRATUM_LABELS)

AGE_RANGES = {"18-40": (18, 39), "40-60": (40, 59), "60+": (60, 89)}
RACES = ("White", "Black", "Asian", "Other")
RACE_P = (0.6, 0.2, 0.1, 0.1)
RACE_RATE_RATIO = (1.15, 0.8, 0.85, 0.9)
ETHNICITIES = ("Not Hispanic or Latino", "Hispanic or Latino")
ETHNICITY_P = (0.82, 0.18)
ETHNICITY_RATE_RATIO = (1.05, 0.8)
VISIT_LEVELS = ((2, 11), (12, 24), (25, 40))
VISIT_P_TARGET = (0.25, 0.4, 0.35)
VISIT_P_CONTROL = (0.4, 0.35, 0.25)
DOMAIN_PREFIX = {"condition": "C", "procedure": "P", "medication": "M"}


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PlantedSignal:
    """A concept whose prevalence differs between targets and controls.

    ``stratum`` is a stratum label or ``"all"``.  ``recency_profile`` holds
    the mean days-before-index of the last occurrence for (targets,
    controls); offsets follow a geometric law truncated to the window.
    """

    stratum: str
    concept_code: str
    target_prevalence: float
    control_prevalence: float
    recency_profile: tuple[float, float] = (120.0, 365.0)


@dataclass
class SynthConfig:
    n_participants: int = 20_000
    n_concepts_per_domain: tuple[int, int, int] = (1500, 2000, 1500)
    strata_proportions: tuple[float, ...] = DEFAULT_PROPORTIONS
    planted_signals: list[PlantedSignal] | None = None
    crs_code_set: tuple[str, ...] = ("CRS01", "CRS02", "CRS03")
    target_fraction: float = 0.25
    background_prevalence: float = 0.01
    lone_crs_rate: float = 0.05
    confounding: float = 1.0
    window_days: int = 730
    spread_days: int = 60
    anchor_date: str = "2022-06-30"
    seed: int = 7

    def __post_init__(self):
        self.n_concepts_per_domain = tuple(int(n) for n in self.n_concepts_per_domain)
        self.strata_proportions = tuple(float(p) for p in self.strata_proportions)
        self.crs_code_set = tuple(self.crs_code_set)
        if self.planted_signals is None:
            self.planted_signals = default_planted_signals(self.n_concepts_per_domain)
        self.planted_signals = [
            s if isinstance(s, PlantedSignal) else PlantedSignal(**{**s, "recency_profile": tuple(
                s.get("recency_profile", (120.0, 365.0)))})
            for s in self.planted_signals]

    def validate(self) -> None:
        if self.n_participants < 1:
            raise SynthConfigError("n_participants must be positive")
        if len(self.n_concepts_per_domain) != 3 or min(self.n_concepts_per_domain) < 0:
            raise SynthConfigError("n_concepts_per_domain must be three non-negative integers")
        if len(self.strata_proportions) != 6:
            raise SynthConfigError("strata_proportions needs six fractions")
        if min(self.strata_proportions) < 0 or sum(self.strata_proportions) > 1 + 1e-9:
            raise SynthConfigError("strata_proportions must be non-negative and sum to <= 1")
        for name in ("target_fraction", "background_prevalence", "lone_crs_rate"):
            if not 0 <= getattr(self, name) <= 1:
                raise SynthConfigError(f"{name} must lie in [0, 1]")
        if not self.crs_code_set:
            raise SynthConfigError("crs_code_set is empty")
        dictionary = set(concept_dictionary(self.n_concepts_per_domain))
        seen = set()
        for s in self.planted_signals:
            if s.stratum != "all" and s.stratum not in STRATUM_LABELS:
                raise SynthConfigError(f"unknown stratum {s.stratum!r} in planted signal")
            if not (0 <= s.target_prevalence <= 1 and 0 <= s.control_prevalence <= 1):
                raise SynthConfigError(f"prevalence of {s.concept_code} outside [0, 1]")
            if s.target_prevalence == s.control_prevalence:
                raise SynthConfigError(f"planted signal {s.concept_code} has equal prevalences")
            if s.concept_code not in dictionary:
                raise SynthConfigError(f"planted concept {s.concept_code} is not in the dictionary")
            if min(s.recency_profile) < 1:
                raise SynthConfigError("recency_profile means must be >= 1 day")
            key = (s.stratum, s.concept_code)
            if key in seen:
                raise SynthConfigError(f"duplicate planted signal {key}")
            seen.add(key)
        if len(seen) > len(dictionary):
            raise SynthConfigError("more planted concepts than the dictionary holds")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["planted_signals"] = [asdict(s) for s in self.planted_signals]
        return d


@dataclass
class GroundTruth:
    true_label: dict[int, int]
    planted: dict[str, list[str]] = field(default_factory=dict)

    def planted_codes(self) -> set[str]:
        return {c for codes in self.planted.values() for c in codes}


def concept_dictionary(n_per_domain) -> dict[str, str]:
    """Concept code -> domain for the synthetic vocabulary (CRS codes excluded)."""
    out = {}
    for domain, n in zip(DOMAINS, n_per_domain):
        prefix = DOMAIN_PREFIX[domain]
        width = max(4, len(str(n)))
        for i in range(n):
            out[f"{prefix}{i:0{width}d}"] = domain
    return out


def default_planted_signals(n_per_domain, n_shared: int = 30, n_per_stratum: int = 5,
                            shared=(0.15, 0.10), specific=(0.25, 0.08)) -> list[PlantedSignal]:
    """Shared signals plus a few stratum-specific ones, spread across domains.

    Concepts are taken at evenly spaced positions of the dictionary so that
    every domain carries planted codes.
    """
    codes = list(concept_dictionary(n_per_domain))
    n_total = n_shared + n_per_stratum * len(STRATUM_LABELS)
    if n_total > len(codes):
        raise SynthConfigError("planted concept count exceeds the dictionary")
    step = len(codes) / n_total
    picked = [codes[int(i * step + step / 2)] for i in range(n_total)]
    shared_at = set(np.linspace(0, n_total - 1, n_shared).round().astype(int).tolist()) \
        if n_shared else set()
    signals = [PlantedSignal("all", c, *shared) for i, c in enumerate(picked) if i in shared_at]
    rest = [c for i, c in enumerate(picked) if i not in shared_at]
    for j, label in enumerate(STRATUM_LABELS):
        for c in rest[j::len(STRATUM_LABELS)][:n_per_stratum]:
            signals.append(PlantedSignal(label, c, *specific, recency_profile=(60.0, 365.0)))
    return signals


def _truncated_geometric(rng, mean: float, limit: int) -> int:
    """Offset in ``[0, limit)`` from a geometric law with the given mean."""
    p = 1.0 / mean
    if p >= 1.0:
        return 0
    mass = 1.0 - (1.0 - p) ** limit
    u = rng.random() * mass
    return min(int(math.log1p(-u) / math.log1p(-p)), limit - 1)


def _nearest_visit(visits: np.ndarray, day: int) -> int:
    i = int(np.searchsorted(visits, day))
    if i == len(visits) or (i > 0 and day - visits[i - 1] <= visits[i] - day):
        i -= 1
    return int(visits[i])


def _birth_day(rng, ref: dt.date, age: int) -> int:
    day = min(ref.day, 28) if ref.month == 2 else ref.day
    anniversary = dt.date(ref.year - age, ref.month, day)
    return to_day(anniversary) - int(rng.integers(0, 365))


class _Generator:
    def __init__(self, config: SynthConfig):
        config.validate()
        self.cfg = config
        self.dictionary = concept_dictionary(config.n_concepts_per_domain)
        self.codes = np.array(list(self.dictionary), dtype=object)
        self.code_domain = {**self.dictionary, **{c: "condition" for c in config.crs_code_set}}
        self.planted_by_stratum: dict[str, list[PlantedSignal]] = {}
        for s in config.planted_signals:
            self.planted_by_stratum.setdefault(s.stratum, []).append(s)
        code_pos = {c: i for i, c in enumerate(self.codes)}
        self.planted_pos = {
            label: np.array([code_pos[s.concept_code] for s in sigs], dtype=np.int64)
            for label, sigs in self.planted_by_stratum.items()}
        p = np.array(config.strata_proportions)
        self.strata_cdf = np.cumsum(np.append(p, max(0.0, 1.0 - p.sum())))
        self.anchor = to_day(config.anchor_date)

    def person(self, index: int):
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, index])
        k = int(np.searchsorted(self.strata_cdf, rng.random() * self.strata_cdf[-1], side="right"))
        k = min(k, 6)
        if k < 6:
            label = STRATUM_LABELS[k]
            sex, bin_ = label.split(" ")
            sex = sex.lower()
            rate_ratio = TABLE1_RATE_RATIO[k]
        else:
            label, sex = REMAINDER, "other_unknown"
            bin_ = ("18-40", "40-60", "60+")[int(rng.integers(0, 3))]
            rate_ratio = 1.0
        lo, hi = AGE_RANGES[bin_]
        age = int(rng.integers(lo, hi + 1))
        race = int(rng.choice(len(RACES), p=RACE_P))
        eth = int(rng.choice(len(ETHNICITIES), p=ETHNICITY_P))
        ratio = rate_ratio * RACE_RATE_RATIO[race] * ETHNICITY_RATE_RATIO[eth]
        p_target = min(0.95, cfg.target_fraction * ratio ** cfg.confounding)
        is_target = bool(rng.random() < p_target)

        ref_day = self.anchor - int(rng.integers(0, cfg.spread_days + 1))
        ref = dt.date(1970, 1, 1) + dt.timedelta(days=ref_day)
        birth = _birth_day(rng, ref, age)

        # utilization: visit days spread over the window padded on both sides
        vp = np.array(VISIT_P_TARGET if is_target else VISIT_P_CONTROL) ** cfg.confounding
        level = int(rng.choice(3, p=vp / vp.sum()))
        n_visits = int(rng.integers(VISIT_LEVELS[level][0], VISIT_LEVELS[level][1] + 1))
        pad = cfg.spread_days
        first = ref_day - cfg.window_days - pad + 1
        visits = first + rng.choice(cfg.window_days + 2 * pad, size=n_visits, replace=False)

        in_window = np.sort(visits[(visits > ref_day - cfg.window_days) & (visits < ref_day)])
        if not len(in_window):
            in_window = np.array([ref_day - 1])
        days, codes = [], []
        present = np.flatnonzero(rng.random(len(self.codes)) < cfg.background_prevalence)
        planted = [s for key in ("all", label) for s in self.planted_by_stratum.get(key, ())]
        if planted:
            blocked = np.concatenate([self.planted_pos[key] for key in ("all", label)
                                      if key in self.planted_pos])
            present = np.setdiff1d(present, blocked)
        n_occ = 1 + rng.poisson(0.5, size=len(present))
        codes.extend(self.codes[np.repeat(present, n_occ)].tolist())
        days.extend(rng.choice(visits, size=int(n_occ.sum())).tolist())
        for s in planted:
            prev = s.target_prevalence if is_target else s.control_prevalence
            if rng.random() < prev:
                mean = s.recency_profile[0] if is_target else s.recency_profile[1]
                # recorded at the visit nearest the drawn day, so planted codes add no visits
                day = ref_day - _truncated_geometric(rng, mean, cfg.window_days)
                codes.append(s.concept_code)
                days.append(_nearest_visit(in_window, day))
        crs = cfg.crs_code_set
        if is_target:
            codes.append(crs[int(rng.integers(len(crs)))])
            days.append(ref_day)
            codes.append(crs[int(rng.integers(len(crs)))])
            days.append(ref_day + int(rng.integers(1, cfg.window_days)))
        elif rng.random() < cfg.lone_crs_rate:
            codes.append(crs[int(rng.integers(len(crs)))])
            days.append(int(rng.choice(visits)))
        return (sex, birth, RACES[race], ETHNICITIES[eth], int(is_target), label,
                days, codes)


def _simulate(config: SynthConfig):
    gen = _Generator(config)
    cols = {k: [] for k in ("pid", "sex", "birth", "race", "eth")}
    ev_pid, ev_code, ev_day = [], [], []
    labels = {}
    for i in range(config.n_participants):
        pid = i + 1
        sex, birth, race, eth, label, _, days, codes = gen.person(i)
        for k, v in zip(cols, (pid, sex, birth, race, eth)):
            cols[k].append(v)
        labels[pid] = label
        ev_pid.extend([pid] * len(days))
        ev_code.extend(codes)
        ev_day.extend(days)
    ev_pid = np.array(ev_pid, dtype=np.int64)
    ev_day = np.array(ev_day, dtype=np.int64)
    ev_code = np.array(ev_code, dtype=object)
    order = np.lexsort((ev_code.astype(str), ev_day, ev_pid))
    ev_pid, ev_day, ev_code = ev_pid[order], ev_day[order], ev_code[order]
    ev_dom = np.array([gen.code_domain[c] for c in ev_code.tolist()], dtype=object)
    truth = GroundTruth(labels, {k: [s.concept_code for s in v]
                                 for k, v in sorted(gen.planted_by_stratum.items())})
    logger.info("generated %d participants, %d events, %d targets",
                len(labels), len(ev_pid), sum(labels.values()))
    return cols, (ev_pid, ev_code, ev_dom, ev_day), truth


def generate(config: SynthConfig, out_dir):
    """Write ``participants.csv``, ``events.csv`` and the ground-truth files.

    Returns ``(participants_path, events_path, ground_truth)``.
    """
    cols, (ev_pid, ev_code, ev_dom, ev_day), truth = _simulate(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p_path, e_path = out / "participants.csv", out / "events.csv"
    _write_csv(p_path, PARTICIPANT_HEADER,
               zip(cols["pid"], cols["sex"], iso_dates(cols["birth"]).tolist(),
                   cols["race"], cols["eth"]))
    _write_csv(e_path, EVENT_HEADER,
               zip(ev_pid.tolist(), ev_code.tolist(), ev_dom.tolist(),
                   iso_dates(ev_day).tolist()))
    write_ground_truth(truth, out)
    return p_path, e_path, truth


def generate_store(config: SynthConfig):
    """Generate straight into memory: ``(EventStore, GroundTruth)``."""
    cols, (ev_pid, ev_code, ev_dom, ev_day), truth = _simulate(config)
    store = EventStore(cols["pid"], cols["sex"], cols["birth"], cols["race"], cols["eth"],
                       ev_pid, ev_code, ev_dom, ev_day)
    return store, truth


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_ground_truth(truth: GroundTruth, out_dir) -> None:
    out = Path(out_dir)
    _write_csv(out / "ground_truth.csv", ["person_id", "true_label"],
               sorted(truth.true_label.items()))
    _write_csv(out / "planted_concepts.csv", ["stratum", "concept_code"],
               [(k, c) for k, codes in truth.planted.items() for c in codes])


def read_ground_truth(out_dir) -> GroundTruth:
    out = Path(out_dir)
    with open(out / "ground_truth.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    labels = {int(r["person_id"]): int(r["true_label"]) for r in rows}
    planted: dict[str, list[str]] = {}
    with open(out / "planted_concepts.csv", newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            planted.setdefault(r["stratum"], []).append(r["concept_code"])
    return GroundTruth(labels, planted)


def heterogeneous_signals(n_per_domain=(1500, 2000, 1500), n_flip: int = 12, n_shared: int = 10,
                          strong=(0.35, 0.10), shared=(0.20, 0.10)) -> list[PlantedSignal]:
    """Signals whose direction depends on the stratum, plus a few shared ones.

    Each flip concept raises risk in three strata and lowers it in the other
    three, so a model blind to the stratum sees little net effect.
    """
    codes = list(concept_dictionary(n_per_domain))
    n_total = n_flip + n_shared
    step = len(codes) / n_total
    picked = [codes[int(i * step + step / 2)] for i in range(n_total)]
    rng = np.random.default_rng(n_flip)
    signals = []
    for code in picked[:n_flip]:
        up = set(rng.choice(len(STRATUM_LABELS), size=3, replace=False).tolist())
        for k, label in enumerate(STRATUM_LABELS):
            t, c = strong if k in up else strong[::-1]
            signals.append(PlantedSignal(label, code, t, c))
    signals.extend(PlantedSignal("all", code, *shared) for code in picked[n_flip:])
    return signals


def homogeneous_signals(n_per_domain=(1500, 2000, 1500), n_signals: int = 22,
                        prevalence=(0.30, 0.10)) -> list[PlantedSignal]:
    """The null-heterogeneity control: every signal acts identically in every stratum."""
    codes = list(concept_dictionary(n_per_domain))
    step = len(codes) / n_signals
    return [PlantedSignal("all", codes[int(i * step + step / 2)], *prevalence)
            for i in range(n_signals)]
