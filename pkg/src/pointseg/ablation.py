"""Ablation runner: a grid of config overrides, each cell trained with shared
seeds, reported as a CSV table plus stability flags against the base config."""
from __future__ import annotations

import csv
import itertools
import json
import math
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig, apply_overrides
from .pipeline import TrainingDiverged, run_experiment
from .synth import Corpus

METRIC_KEYS = ("mae", "s_measure", "e_measure", "f_w_beta")


@dataclass
class AblationCell:
    overrides: dict[str, str]
    status: str = "ok"  # ok | failed
    error: str = ""
    seed_mae: list[float] = field(default_factory=list)
    medians: dict[str, float] = field(default_factory=dict)
    mae_variance: float = float("nan")
    any_diverged: bool = False
    higher_variance: bool = False

    @property
    def flagged(self) -> bool:
        return self.any_diverged or self.higher_variance

    def label(self) -> str:
        if not self.overrides:
            return "base"
        return ";".join(f"{k}={v}" for k, v in sorted(self.overrides.items()))


@dataclass
class AblationReport:
    reference: AblationCell
    cells: list[AblationCell]
    seeds: list[int]

    def rows(self) -> list[dict]:
        out = []
        for cell in (self.reference, *self.cells):
            row = {"cell": cell.label(), "status": cell.status,
                   "mae_variance": cell.mae_variance,
                   "any_diverged": int(cell.any_diverged),
                   "higher_variance": int(cell.higher_variance),
                   "flagged": int(cell.flagged)}
            for key in METRIC_KEYS:
                row[key] = cell.medians.get(key, float("nan"))
            out.append(row)
        return out


def _run_cell(corpus: Corpus, cfg: RunConfig, seeds: Sequence[int],
              cache: dict) -> tuple[list[dict], bool]:
    results = []
    any_diverged = False
    for seed in seeds:
        seeded = apply_overrides(cfg, {"seed": str(seed)})
        key = (seeded.to_json(),)
        if key not in cache:
            try:
                report = run_experiment(corpus, seeded)
                cache[key] = {
                    "diverged": report.diverged,
                    "finite": all(math.isfinite(s[3]) for s in report.steps),
                    **{k: getattr(report.metrics, k) for k in METRIC_KEYS},
                }
            except TrainingDiverged:
                cache[key] = {"diverged": True, "finite": False,
                              **{k: float("nan") for k in METRIC_KEYS}}
        results.append(cache[key])
        any_diverged |= cache[key]["diverged"] or not cache[key]["finite"]
    return results, any_diverged


def run_ablation(corpus: Corpus, base_cfg: RunConfig,
                 grid: dict[str, list[str]],
                 seeds: Sequence[int] = (0, 1, 2),
                 run_dir=None) -> AblationReport:
    """Cartesian product of the grid values; every cell and the base config
    run with the shared seeds. A cell is flagged when any seed diverges or
    when its cross-seed MAE variance strictly exceeds the base config's."""
    cache: dict = {}
    ref = AblationCell(overrides={})
    ref_results, ref.any_diverged = _run_cell(corpus, base_cfg, seeds, cache)
    ref.seed_mae = [r["mae"] for r in ref_results]
    ref.mae_variance = float(np.var(ref.seed_mae))
    ref.medians = {k: float(np.median([r[k] for r in ref_results])) for k in METRIC_KEYS}

    cells: list[AblationCell] = []
    keys = sorted(grid)
    for combo in itertools.product(*(grid[k] for k in keys)):
        overrides = {k: str(v) for k, v in zip(keys, combo)}
        cell = AblationCell(overrides=overrides)
        try:
            cfg = apply_overrides(base_cfg, overrides)
            results, cell.any_diverged = _run_cell(corpus, cfg, seeds, cache)
            cell.seed_mae = [r["mae"] for r in results]
            cell.mae_variance = float(np.var(cell.seed_mae))
            cell.medians = {k: float(np.median([r[k] for r in results]))
                            for k in METRIC_KEYS}
            cell.higher_variance = cell.mae_variance > ref.mae_variance
        except Exception as exc:  # failed cells are marked, the run continues
            cell.status = "failed"
            cell.error = f"{type(exc).__name__}: {exc}"
            traceback.print_exc()
        cells.append(cell)

    report = AblationReport(reference=ref, cells=cells, seeds=list(seeds))
    if run_dir is not None:
        write_ablation_files(report, run_dir)
    return report


def write_ablation_files(report: AblationReport, run_dir) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    rows = report.rows()
    with open(run_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    (run_dir / "ablation.json").write_text(json.dumps({
        "seeds": report.seeds,
        "cells": rows,
    }, indent=2, sort_keys=True))
    try:
        plot_ablation(report, run_dir / "plots")
    except Exception:
        traceback.print_exc()


def plot_ablation(report: AblationReport, out_dir) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = report.rows()
    labels = [r["cell"] for r in rows]
    fig, axes = plt.subplots(1, len(METRIC_KEYS), figsize=(4 * len(METRIC_KEYS), 3.5))
    for ax, key in zip(axes, METRIC_KEYS):
        vals = [r[key] for r in rows]
        colors = ["tab:red" if r["flagged"] else "tab:blue" for r in rows]
        ax.bar(range(len(vals)), vals, color=colors)
        ax.set_title(key)
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=6)
    fig.tight_layout()
    fig.savefig(out_dir / "ablation.png", dpi=120)
    plt.close(fig)
