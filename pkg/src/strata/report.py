"""Report assembly: report.json, a Markdown rendering and PNG figures."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluate import stratum_counts, substream  # noqa: E402

logger = logging.getLogger(__name__)

FORMAT = "strata-report"
VERSION = 1
SEEDED_STAGES = ("synth", "select", "model", "tune", "folds")

STYLE = {
    "figure.figsize": (5.0, 3.6),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}


def build_report(cfg, labels, strata, matching: dict, selection: dict, benchmark: dict,
                 global_model=None) -> dict:
    """Assemble the report document; contains nothing run-dependent but results."""
    echo = cfg.to_dict()
    # where the artifacts live is not part of the result
    echo["paths"].pop("output", None)
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "config": echo,
        "seeds": {"master": cfg.seed,
                  **{name: substream(cfg.seed, name) for name in SEEDED_STAGES}},
        "cohort": {
            "statistics": [r.to_dict() for r in stratum_counts(labels, strata)],
            "matching": {k: matching[k] for k in ("pairs", "candidate_controls", "smd_before",
                                                  "smd_after")},
            "unmatched_targets": len(matching["unmatched_targets"]),
        },
        "selection": selection,
        "benchmark": benchmark,
    }
    if global_model is not None:
        imp = global_model.gain_importance()
        names = global_model.feature_names or [str(j) for j in range(len(imp))]
        order = sorted(range(len(imp)), key=lambda j: (-imp[j], names[j]))[:20]
        doc["importance"] = [{"concept_code": names[j], "gain": float(imp[j])} for j in order]
    return doc


def _fmt(x, digits=4) -> str:
    return "n/a" if x is None else f"{x:.{digits}f}"


def render_markdown(doc: dict) -> str:
    b = doc["benchmark"]
    lines = ["# Stratified risk model report", "",
             f"Master seed: {doc['seeds']['master']}", "", "## Cohort", "",
             "| Group | N | Targets | Target % |", "|---|---:|---:|---:|"]
    for r in doc["cohort"]["statistics"]:
        lines.append(f"| {r['group']} | {r['n']} | {r['targets']} | {r['target_percentage']} |")
    m = doc["cohort"]["matching"]
    lines += ["", f"Matched pairs: {m['pairs']} from {m['candidate_controls']} candidate controls "
                  f"({doc['cohort']['unmatched_targets']} targets unmatched).", "",
              "| Covariate | SMD before | SMD after |", "|---|---:|---:|"]
    for k in m["smd_before"]:
        lines.append(f"| {k} | {m['smd_before'][k]:.4f} | {m['smd_after'][k]:.4f} |")
    s = doc["selection"]
    lines += ["", "## Feature selection", "",
              f"Stage 1 kept {s['stage1']} concepts, stage 2 kept {s['stage2']}; the stage 2 set "
              f"carries {100 * s['coverage']:.1f}% of the attribution mass.",
              f"{s['significant']} of {s['stage2']} selected features differ across strata "
              f"(Kruskal-Wallis, p < {s['alpha']})."]
    if "planted_recall" in s:
        pr = s["planted_recall"]
        lines.append(f"Planted concepts recovered: {100 * pr['stage1']:.1f}% after stage 1, "
                     f"{100 * pr['stage2']:.1f}% after stage 2.")
    lines += ["", "## Global versus stratum models", "",
              "| Stratum | Share | AUC global | AUC group | Delta |", "|---|---:|---:|---:|---:|"]
    for r in b["strata"]:
        lines.append(f"| {r['stratum']} | {100 * r['share']:.1f}% | {r['auc_global']:.4f} | "
                     f"{r['auc_group']:.4f} | {r['delta']:+.4f} |")
    t = b["total"]
    lines.append(f"| Total | 100.0% | {t['auc_global']:.4f} | {t['auc_group']:.4f} | "
                 f"{t['delta']:+.4f} |")
    lines += ["", "| Model | AUC | F1 | Sensitivity | Specificity |", "|---|---:|---:|---:|---:|"]
    for name, key in (("Global", "global_metrics"), ("Stratified", "combined_metrics")):
        g = b[key]
        lines.append(f"| {name} | {g['auc']:.4f} | {g['f1']:.4f} | {g['sensitivity']:.4f} | "
                     f"{g['specificity']:.4f} |")
    lines += ["", "| Regime | N | Folds | Pooled AUC | Fold AUC mean | Fold AUC std |",
              "|---|---:|---:|---:|---:|---:|"]
    for name, r in b["regimes"].items():
        lines.append(f"| {name} | {r['n']} | {r['folds']} | {r['pooled_auc']:.4f} | "
                     f"{_fmt(r['fold_auc_mean'])} | {_fmt(r['fold_auc_std'])} |")
    lines += ["", "Per-fold mean ± std at the decision threshold:", "",
              "| Regime | F1 | Sensitivity | Specificity |", "|---|---:|---:|---:|"]
    for name, r in b["regimes"].items():
        fm = r["fold_metrics"]
        cells = [f"{_fmt(fm[k]['mean'])} ± {_fmt(fm[k]['std'])}"
                 for k in ("f1", "sensitivity", "specificity")]
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    lines += ["", "![ROC](roc.png)", "", "![Delta AUC](delta_auc.png)", ""]
    if "importance" in doc:
        lines += ["![Importance](importance.png)", ""]
    return "\n".join(lines)


def plot_roc(doc: dict, path: Path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for key, label in (("global", "global model"), ("combined", "stratum models")):
            pts = np.array(doc["benchmark"]["roc"][key])
            ax.plot(pts[:, 0], pts[:, 1], lw=1.2, label=label)
        ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls="--")
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)


def plot_delta(doc: dict, path: Path) -> None:
    rows = doc["benchmark"]["strata"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        deltas = [r["delta"] for r in rows]
        colors = ["tab:blue" if d >= 0 else "tab:red" for d in deltas]
        ax.bar(range(len(rows)), deltas, color=colors)
        ax.axhline(0, color="0.3", lw=0.8)
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels([r["stratum"] for r in rows], rotation=30, ha="right")
        ax.set_ylabel("AUC(stratum model) - AUC(global)")
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)


def plot_importance(doc: dict, path: Path) -> None:
    items = doc["importance"][::-1]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 0.18 * len(items) + 1.0))
        ax.barh(range(len(items)), [i["gain"] for i in items], color="tab:gray")
        ax.set_yticks(range(len(items)))
        ax.set_yticklabels([i["concept_code"] for i in items])
        ax.set_xlabel("total split gain (global model)")
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)


def write_report(doc: dict, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "report.json", out / "report.md", out / "roc.png", out / "delta_auc.png"]
    paths[0].write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths[1].write_text(render_markdown(doc), encoding="utf-8")
    plot_roc(doc, paths[2])
    plot_delta(doc, paths[3])
    if "importance" in doc:
        paths.append(out / "importance.png")
        plot_importance(doc, paths[-1])
    return paths
