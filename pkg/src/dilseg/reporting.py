"""CSV tables and grouped bar figures for evaluation reports."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from . import __version__
from .stats import EvaluationReport


def write_report(report: EvaluationReport, out_dir: str | Path, config_hash: str = "") -> None:
    """Emit report.json, summary/group/pairwise CSVs, and one grouped bar
    figure per disaggregation axis (median DSC with IQR error bars)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    payload = report.to_json()
    payload["config_hash"] = config_hash
    payload["toolkit_version"] = __version__
    with open(out_dir / "report.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")

    with open(out_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["model", "n_lesions", "median_dsc", "q1", "q3", "precision", "recall", "f1",
             "fp_per_lesion", "config_hash", "version"]
        )
        for m in report.models:
            writer.writerow(
                [m.model, m.n_lesions, repr(m.median), repr(m.q1), repr(m.q3),
                 repr(m.precision), repr(m.recall), repr(m.f1),
                 repr(m.fp_per_lesion) if m.fp_per_lesion is not None else "",
                 config_hash, __version__]
            )

    with open(out_dir / "groups.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "axis", "group", "n", "median_dsc", "q1", "q3"])
        for m in report.models:
            for g in m.groups:
                writer.writerow([m.model, g.axis, g.group, g.n, repr(g.median),
                                 repr(g.q1), repr(g.q3)])

    if report.pairwise:
        with open(out_dir / "pairwise.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model_a", "model_b", "n", "p_value", "effect_size",
                             "significant", "all_zero"])
            for c in report.pairwise:
                writer.writerow([c.model_a, c.model_b, c.n, repr(c.p_value),
                                 repr(c.effect_size), c.significant, c.all_zero])

    for axis in ("gs", "size", "zone"):
        _bar_figure(report, axis, out_dir / f"dsc_by_{axis}.png")


def _bar_figure(report: EvaluationReport, axis: str, path: Path) -> None:
    groups = sorted(
        {g.group for m in report.models for g in m.groups if g.axis == axis}
    )
    if not groups:
        return
    fig, ax = plt.subplots(figsize=(1.8 + 1.4 * len(groups), 3.5))
    width = 0.8 / max(len(report.models), 1)
    for i, m in enumerate(report.models):
        by_group = {g.group: g for g in m.groups if g.axis == axis}
        xs, heights, lo, hi = [], [], [], []
        for j, name in enumerate(groups):
            g = by_group.get(name)
            if g is None:
                continue
            xs.append(j + i * width)
            heights.append(g.median)
            lo.append(max(g.median - g.q1, 0.0))
            hi.append(max(g.q3 - g.median, 0.0))
        ax.bar(xs, heights, width=width, label=m.model, yerr=[lo, hi], capsize=2)
    ax.set_xticks([j + width * (len(report.models) - 1) / 2 for j in range(len(groups))])
    ax.set_xticklabels(groups)
    ax.set_ylabel("median lesion DSC")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
