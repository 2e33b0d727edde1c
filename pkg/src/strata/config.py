"""Pipeline configuration: one JSON document, validated block by block."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .boosting import GBDTParams, TrainingError
from .cohort import PhenotypeConfig
from .evaluate import BenchmarkConfig, substream
from .featurize import SENTINEL
from .selection import ATTRIBUTIONS, QuotaConfig
from .synth import SynthConfig, SynthConfigError
from .tune import SearchSpace, SearchSpaceError, TPEConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


DEFAULTS = {
    "paths": {"input": None, "output": "strata-out"},
    "synth": {},
    "phenotype": {"crs_code_set": ["CRS01", "CRS02", "CRS03"], "min_code_count": 2,
                  "qualifying_span_days": 730},
    "matching": {"ridge": 1e-6},
    "featurize": {"window_days": 730, "sentinel": SENTINEL},
    "selection": {"quotas": {"conditions": 300, "procedures": 500, "medications": 300},
                  "k": 100, "paper_mode": False, "params": {}, "attribution": "saabas"},
    "model": {},
    "tuning": {"n_trials": 100, "gamma_fraction": 0.25, "n_startup": 20, "n_candidates": 24,
               "tune_folds": 3, "space": {}},
    "evaluation": {"folds": 10, "threshold": 0.5},
    "seed": 0,
}


def _merge(base: dict, over: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if key not in base:
            raise ConfigError(f"{where}{key}: unknown key")
        if isinstance(base[key], dict) and key not in ("space", "params", "synth", "model"):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{key}: expected an object")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _build(cls, block: dict, where: str):
    known = {f.name for f in fields(cls)}
    bad = sorted(set(block) - known)
    if bad:
        raise ConfigError(f"{where}.{bad[0]}: unknown field")
    try:
        return cls(**block)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def block_hash(*parts) -> str:
    return hashlib.sha256(canonical(list(parts)).encode()).hexdigest()[:16]


@dataclass
class PipelineConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        cfg = cls(_merge(DEFAULTS, data, ""))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        return cls.from_dict(data)

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def with_overrides(self, seed=None, output=None, paper_mode=None) -> "PipelineConfig":
        raw = copy.deepcopy(self.raw)
        if seed is not None:
            raw["seed"] = int(seed)
        if output is not None:
            raw["paths"]["output"] = str(output)
        if paper_mode:
            raw["selection"]["paper_mode"] = True
        cfg = PipelineConfig(raw)
        cfg.validate()
        return cfg

    # typed views -----------------------------------------------------------
    def synth(self) -> SynthConfig:
        block = dict(self.raw["synth"])
        if "seed" in block:
            raise ConfigError("synth.seed: randomness comes from the top-level seed")
        block["seed"] = substream(self.seed, "synth") % 2 ** 31
        cfg = _build(SynthConfig, block, "synth")
        try:
            cfg.validate()
        except SynthConfigError as exc:
            raise ConfigError(f"synth: {exc}") from None
        return cfg

    def phenotype(self) -> PhenotypeConfig:
        block = dict(self.raw["phenotype"])
        block["crs_code_set"] = tuple(block["crs_code_set"])
        return _build(PhenotypeConfig, block, "phenotype")

    def model_params(self, block="model", stage="model") -> GBDTParams:
        raw = dict(self.raw[block] if block == "model" else self.raw["selection"]["params"])
        where = "model" if block == "model" else "selection.params"
        if "seed" in raw:
            raise ConfigError(f"{where}.seed: randomness comes from the top-level seed")
        if "sentinel" in raw:
            raise ConfigError(f"{where}.sentinel: set featurize.sentinel instead")
        raw["seed"] = substream(self.seed, stage) % 2 ** 31
        raw["sentinel"] = self.raw["featurize"]["sentinel"]
        params = _build(GBDTParams, raw, where)
        try:
            return params.validate()
        except TrainingError as exc:
            raise ConfigError(f"{where}: {exc}") from None

    def quotas(self) -> QuotaConfig:
        return _build(QuotaConfig, self.raw["selection"]["quotas"], "selection.quotas")

    def tpe(self) -> TPEConfig | None:
        t = self.raw["tuning"]
        if t["n_trials"] == 0:
            return None
        try:
            return TPEConfig(t["n_trials"], t["gamma_fraction"], t["n_startup"],
                             t["n_candidates"], substream(self.seed, "tune") % 2 ** 31)
        except SearchSpaceError as exc:
            raise ConfigError(f"tuning: {exc}") from None

    def space(self) -> SearchSpace:
        try:
            space = SearchSpace.with_overrides(self.raw["tuning"]["space"])
        except (SearchSpaceError, TypeError) as exc:
            raise ConfigError(f"tuning.space: {exc}") from None
        known = {f.name for f in fields(GBDTParams)} - {"seed", "sentinel"}
        bad = sorted(set(space.dims) - known)
        if bad:
            raise ConfigError(f"tuning.space.{bad[0]}: not a model parameter")
        return space

    def benchmark(self, workers=None) -> BenchmarkConfig:
        ev = self.raw["evaluation"]
        return BenchmarkConfig(
            folds=int(ev["folds"]), threshold=float(ev["threshold"]),
            paper_mode=bool(self.raw["selection"]["paper_mode"]), quotas=self.quotas(),
            k=int(self.raw["selection"]["k"]),
            selection_params=self.model_params("selection", "select"),
            model_params=self.model_params(), tuning=self.tpe(),
            tune_folds=int(self.raw["tuning"]["tune_folds"]), space=self.space(),
            seed=self.seed, workers=workers)

    def validate(self) -> None:
        r = self.raw
        if not isinstance(r["seed"], int) or isinstance(r["seed"], bool) or r["seed"] < 0:
            raise ConfigError("seed: must be a non-negative integer")
        if not r["paths"]["output"]:
            raise ConfigError("paths.output: must be a directory path")
        if r["paths"]["input"] is None:
            self.synth()
        self.phenotype()
        if not r["matching"]["ridge"] > 0:
            raise ConfigError("matching.ridge: must be positive")
        fz = r["featurize"]
        if not isinstance(fz["window_days"], int) or fz["window_days"] < 1:
            raise ConfigError("featurize.window_days: must be a positive integer")
        if fz["sentinel"] <= fz["window_days"]:
            raise ConfigError("featurize.sentinel: must exceed window_days")
        if r["selection"]["attribution"] not in ATTRIBUTIONS:
            raise ConfigError(f"selection.attribution: must be one of {', '.join(ATTRIBUTIONS)}")
        k = r["selection"]["k"]
        if not isinstance(k, int) or k < 1:
            raise ConfigError("selection.k: must be a positive integer")
        t = r["tuning"]
        if not isinstance(t["n_trials"], int) or t["n_trials"] < 0:
            raise ConfigError("tuning.n_trials: must be a non-negative integer")
        if not isinstance(t["tune_folds"], int) or t["tune_folds"] < 2:
            raise ConfigError("tuning.tune_folds: must be an integer >= 2")
        ev = r["evaluation"]
        if not isinstance(ev["folds"], int) or ev["folds"] < 2:
            raise ConfigError("evaluation.folds: must be an integer >= 2")
        if not 0 < ev["threshold"] < 1:
            raise ConfigError("evaluation.threshold: must lie in (0, 1)")
        self.benchmark()

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


def example_config() -> dict:
    """A small configuration that runs end to end in a few minutes."""
    raw = copy.deepcopy(DEFAULTS)
    raw["synth"] = {"n_participants": 4000, "n_concepts_per_domain": [300, 400, 300]}
    raw["selection"]["quotas"] = {"conditions": 60, "procedures": 100, "medications": 60}
    raw["selection"]["k"] = 40
    raw["selection"]["params"] = {"n_estimators": 60}
    raw["model"] = {"n_estimators": 80}
    raw["tuning"].update(n_trials=4, n_startup=2, tune_folds=2,
                         space={"n_estimators": {"kind": "int_uniform", "low": 40, "high": 120},
                                "max_depth": {"kind": "int_uniform", "low": 2, "high": 6}})
    raw["evaluation"]["folds"] = 5
    return raw


__all__ = ["ConfigError", "PipelineConfig", "DEFAULTS", "example_config", "block_hash",
           "canonical"]
