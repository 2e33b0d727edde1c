"""Staged pipeline over an output directory.

Every stage reads the artifacts of the stages before it and writes its own
sub-directory.  A stage's cache key hashes the configuration blocks it
depends on together with the keys of its upstream stages; when the stored
key matches and the artifacts are present the stage is skipped.
"""

from __future__ import annotations

import csv
import json
import logging
import shutil
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import report as report_mod
from .boosting import GBDTModel, GBDTParams, train
from .cohort import TARGET, build_cohort, phenotype, read_cohort, write_cohort
from .config import PipelineConfig, block_hash
from .ehr import load_store
from .evaluate import (GLOBAL, TuneOutcome, row_strata, run_benchmark, substream,
                       tune_regimes)
from .featurize import read_features, strip_leakage, encode_recency, write_features
from .selection import (SelectedFeatureSet, heterogeneity_tests, read_selected, shap_coverage,
                        stage1_prevalence, stage2_gain, write_heterogeneity, write_selected)
from .synth import generate, read_ground_truth
from .tune import write_trials

logger = logging.getLogger(__name__)

STAGES = ("synth", "phenotype", "match", "encode", "select", "tune", "train", "eval", "report")
UPSTREAM = {
    "synth": (), "phenotype": ("synth",), "match": ("phenotype",), "encode": ("match",),
    "select": ("encode",), "tune": ("select",), "train": ("tune",), "eval": ("train",),
    "report": ("eval",),
}
# configuration blocks each stage depends on
BLOCKS = {
    "synth": (("paths", "input"), ("synth",), ("seed",)),
    "phenotype": (("phenotype",),),
    "match": (("matching",), ("featurize", "window_days")),
    "encode": (("featurize",), ("phenotype", "crs_code_set")),
    "select": (("selection",), ("seed",)),
    "tune": (("tuning",), ("model",), ("featurize", "sentinel"), ("seed",)),
    "train": (),
    "eval": (("evaluation",), ("selection",), ("seed",)),
    "report": (),
}


class MissingArtifact(RuntimeError):
    """An upstream stage has not produced what this stage needs."""


def slug(name: str) -> str:
    return name.lower().replace(" ", "_").replace("+", "plus")


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


class Pipeline:
    def __init__(self, config: PipelineConfig, workers=None):
        self.cfg = config
        self.workers = workers
        self.out = Path(config.raw["paths"]["output"])
        self._store = None

    # bookkeeping -----------------------------------------------------------
    @property
    def manifest_path(self) -> Path:
        return self.out / "manifest.json"

    def manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text(encoding="utf-8"))
        return {}

    def stage_dir(self, stage: str) -> Path:
        return self.out / stage

    def key(self, stage: str) -> str:
        parts = []
        for path in BLOCKS[stage]:
            node = self.cfg.raw
            for p in path:
                node = node[p]
            parts.append([list(path), node])
        upstream = [self.key(u) for u in UPSTREAM[stage]]
        return block_hash(stage, parts, upstream)

    def artifact(self, stage: str, name: str) -> Path:
        """Path of an upstream artifact, which must already exist."""
        if stage == "synth" and self.cfg.raw["paths"]["input"] is not None:
            path = Path(self.cfg.raw["paths"]["input"]) / name
        else:
            path = self.stage_dir(stage) / name
        if not path.exists():
            raise MissingArtifact(f"missing {path}; run the '{stage}' stage first")
        return path

    def run_stage(self, stage: str, force: bool = False) -> bool:
        """Run one stage unless its cached output is current; True if it ran."""
        key = self.key(stage)
        entry = self.manifest().get(stage)
        if not force and entry and entry["key"] == key and all(
                (self.out / a).exists() for a in entry["artifacts"]):
            logger.info("%s: cached (%s)", stage, key)
            return False
        d = self.stage_dir(stage)
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        artifacts = getattr(self, f"_{stage}")(d)
        manifest = self.manifest()
        manifest[stage] = {"key": key,
                           "artifacts": sorted(str(p.relative_to(self.out)) for p in artifacts)}
        self.out.mkdir(parents=True, exist_ok=True)
        _dump_json(self.manifest_path, manifest)
        logger.info("%s: done (%s)", stage, key)
        return True

    def run(self, stages=STAGES) -> None:
        for stage in stages:
            self.run_stage(stage)

    # shared loaders --------------------------------------------------------
    def store(self):
        if self._store is None:
            self._store = load_store(self.artifact("synth", "participants.csv"),
                                     self.artifact("synth", "events.csv"))
        return self._store

    def cohort(self):
        return read_cohort(self.artifact("match", "cohort.csv"))

    def rows(self):
        """(person_ids, labels, strata) of the matched cohort, in cohort order."""
        with open(self.artifact("encode", "rows.csv"), newline="", encoding="utf-8") as fh:
            recs = list(csv.DictReader(fh))
        return ([int(r["person_id"]) for r in recs], [int(r["label"]) for r in recs],
                [r["stratum"] for r in recs])

    def matrix(self):
        fz = self.cfg.raw["featurize"]
        with open(self.artifact("encode", "columns.csv"), newline="", encoding="utf-8") as fh:
            domains = {r["concept_code"]: r["domain"] for r in csv.DictReader(fh)}
        return read_features(self.artifact("encode", "features.csv"), self.cohort(), domains,
                             fz["window_days"], fz["sentinel"])

    def selected(self) -> tuple[SelectedFeatureSet, SelectedFeatureSet]:
        return read_selected(self.artifact("select", "selected_features.csv"))

    def models(self) -> dict[str, GBDTModel]:
        index = json.loads(self.artifact("train", "models.json").read_text(encoding="utf-8"))
        return {name: GBDTModel.load(self.artifact("train", f"models/{fname}"))
                for name, fname in index.items()}

    # stages ----------------------------------------------------------------
    def _synth(self, d: Path):
        if self.cfg.raw["paths"]["input"] is not None:
            logger.info("synth: using input data in %s", self.cfg.raw["paths"]["input"])
            self.artifact("synth", "participants.csv")
            self.artifact("synth", "events.csv")
            return []
        generate(self.cfg.synth(), d)
        self._store = None
        return sorted(d.iterdir())

    def _phenotype(self, d: Path):
        targets = phenotype(self.store(), self.cfg.phenotype())
        write_cohort(targets, d / "targets.csv")
        return [d / "targets.csv"]

    def _match(self, d: Path):
        store = self.store()
        targets = read_cohort(self.artifact("phenotype", "targets.csv"))
        build = build_cohort(store, self.cfg.phenotype(), self.cfg.raw["featurize"]["window_days"],
                             ridge=self.cfg.raw["matching"]["ridge"], targets=targets)
        write_cohort(build.labels, d / "cohort.csv")
        _dump_json(d / "matching.json", {
            "pairs": len(build.match.pairs),
            "unmatched_targets": build.match.unmatched,
            "candidate_controls": build.n_candidates,
            "smd_before": build.smd_before,
            "smd_after": build.smd_after,
            "propensity": {"intercept": build.model.intercept,
                           "coefficients": build.model.coefficients,
                           "iterations": build.model.iterations},
        })
        return [d / "cohort.csv", d / "matching.json"]

    def _encode(self, d: Path):
        store = self.store()
        cohort = self.cohort()
        fz = self.cfg.raw["featurize"]
        matrix = encode_recency(store, cohort, fz["window_days"], fz["sentinel"])
        matrix = strip_leakage(matrix, self.cfg.raw["phenotype"]["crs_code_set"])
        write_features(matrix, d / "features.csv")
        with open(d / "columns.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["concept_code", "domain"])
            w.writerows(zip(matrix.codes.tolist(), matrix.domains.tolist()))
        strata = row_strata(store, cohort)
        with open(d / "rows.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["person_id", "label", "stratum"])
            for c, s in zip(cohort, strata):
                w.writerow([c.person_id, int(c.label == TARGET), s])
        return [d / "features.csv", d / "columns.csv", d / "rows.csv"]

    def _select(self, d: Path):
        matrix = self.matrix()
        bench = self.cfg.benchmark(self.workers)
        s1 = stage1_prevalence(matrix, bench.quotas)
        m1 = matrix.select_codes(s1.codes)
        s2 = stage2_gain(m1, bench.selection_params, bench.k, self.workers)
        coverage = shap_coverage(s2.model, m1, s2, method=self.cfg.raw["selection"]["attribution"],
                                 seed=substream(self.cfg.seed, "attribution"))
        _, _, strata = self.rows()
        het = heterogeneity_tests(matrix.select_codes(s2.codes), strata)
        write_selected(d / "selected_features.csv", s1, s2)
        write_heterogeneity(d / "heterogeneity.csv", het)
        summary = {"stage1": len(s1), "stage2": len(s2), "coverage": coverage,
                   "attribution": self.cfg.raw["selection"]["attribution"],
                   "significant": sum(p < 0.05 for _, _, p in het), "alpha": 0.05,
                   "stage1_by_domain": {dom: sum(f.domain == dom for f in s1.features)
                                        for dom in sorted({f.domain for f in s1.features})}}
        truth_dir = self.stage_dir("synth")
        if self.cfg.raw["paths"]["input"] is None and (truth_dir / "planted_concepts.csv").exists():
            planted = read_ground_truth(truth_dir).planted_codes()
            if planted:
                summary["planted_recall"] = {
                    "stage1": len(planted & set(s1.codes)) / len(planted),
                    "stage2": len(planted & set(s2.codes)) / len(planted)}
        _dump_json(d / "selection.json", summary)
        return [d / "selected_features.csv", d / "heterogeneity.csv", d / "selection.json"]

    def _tune(self, d: Path):
        matrix = self.matrix()
        _, s2 = self.selected()
        _, _, strata = self.rows()
        bench = self.cfg.benchmark(self.workers)
        tuned = tune_regimes(matrix, strata, bench, s2.codes)
        params = {}
        for name, outcome in tuned.items():
            params[name] = {"params": outcome.params, "tuning_auc": outcome.tuning_auc}
            if outcome.history:
                write_trials(d / f"trials_{slug(name)}.csv", outcome.history)
        _dump_json(d / "params.json", params)
        return sorted(d.iterdir())

    def tuned(self) -> dict[str, TuneOutcome]:
        raw = json.loads(self.artifact("tune", "params.json").read_text(encoding="utf-8"))
        return {k: TuneOutcome(v["params"], v["tuning_auc"]) for k, v in raw.items()}

    def _train(self, d: Path):
        matrix = self.matrix()
        _, s2 = self.selected()
        _, _, strata = self.rows()
        X = matrix.select_codes(s2.codes)
        dense = X.to_dense()
        strata_arr = np.array(strata, dtype=object)
        (d / "models").mkdir()
        index = {}
        for name, outcome in self.tuned().items():
            rows = np.arange(X.n_rows) if name == GLOBAL else np.flatnonzero(strata_arr == name)
            model = train(dense[rows], X.labels[rows], GBDTParams(**outcome.params),
                          row_ids=X.person_ids[rows], feature_names=s2.codes,
                          workers=self.workers)
            fname = f"{slug(name)}.json"
            model.save(d / "models" / fname)
            index[name] = fname
        _dump_json(d / "models.json", index)
        return [d / "models.json", *sorted((d / "models").iterdir())]

    def _eval(self, d: Path):
        models = self.models()
        tuned = {name: TuneOutcome(asdict(m.params), None) for name, m in models.items()}
        for name, t in self.tuned().items():
            if name in tuned:
                tuned[name].tuning_auc = t.tuning_auc
        matrix = self.matrix()
        _, _, strata = self.rows()
        bench = self.cfg.benchmark(self.workers)
        result = run_benchmark(None, self.cohort(), matrix, bench, strata=strata, tuned=tuned)
        _dump_json(d / "benchmark.json", result.to_dict())
        combined = result.combined_scores()
        with open(d / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["person_id", "stratum", "label", "global_score", "combined_score"])
            for pid, s, y, g, c in zip(matrix.person_ids.tolist(), strata, result.labels.tolist(),
                                       result.regimes[GLOBAL].oof.tolist(), combined.tolist()):
                w.writerow([pid, s, y, repr(g), repr(c)])
        return [d / "benchmark.json", d / "predictions.csv"]

    def _report(self, d: Path):
        bench = json.loads(self.artifact("eval", "benchmark.json").read_text(encoding="utf-8"))
        matching = json.loads(self.artifact("match", "matching.json").read_text(encoding="utf-8"))
        selection = json.loads(self.artifact("select", "selection.json").read_text(encoding="utf-8"))
        _, labels, strata = self.rows()
        models = self.models()
        doc = report_mod.build_report(self.cfg, labels, strata, matching, selection, bench,
                                      models[GLOBAL])
        report_mod.write_report(doc, d)
        return sorted(d.iterdir())
