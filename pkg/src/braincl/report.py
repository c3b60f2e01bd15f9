"""Comparison reports over completed run directories.

Everything here is read-only: metrics are recomputed from each run's
persisted matrix.json, never from training state. Outputs are a markdown
summary table, a CSV of metrics, and one forgetting-curve plot per run
(DSC of each dataset across the sessions from the one that learned it on).
"""

from __future__ import annotations

import json
import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import metrics as clm


def forgetting_curves(matrix: clm.TrainTestMatrix) -> dict[str, list[tuple[int, float]]]:
    """Per dataset j: [(session i, dsc)] for the sessions i >= j (1-based)."""
    curves = {}
    for j, ds_id in enumerate(matrix.dataset_ids):
        curves[ds_id] = [
            (i + 1, float(matrix.dsc[i, j])) for i in range(j, matrix.num_datasets)
        ]
    return curves


def session_stds(matrix: clm.TrainTestMatrix) -> dict[str, float]:
    """Std of each dataset's DSC across all sessions (stability; lower is steadier)."""
    return {
        ds_id: float(np.std(matrix.dsc[:, j]))
        for j, ds_id in enumerate(matrix.dataset_ids)
    }


def load_run(run_dir) -> dict | None:
    """Read one run directory; None (with a warning) when matrix.json is absent."""
    run_dir = Path(run_dir)
    matrix_path = run_dir / "matrix.json"
    if not matrix_path.exists():
        warnings.warn(f"skipping {run_dir}: no matrix.json")
        return None
    doc = json.loads(matrix_path.read_text())
    if "failed_session" in doc:
        warnings.warn(f"skipping {run_dir}: run failed in session {doc['failed_session']}")
        return None
    matrix = clm.TrainTestMatrix(list(doc["datasets"]), np.array(doc["dsc"]))
    return {
        "name": run_dir.name,
        "matrix": matrix,
        "strategy": doc.get("strategy", {}),
        "alphas": doc.get("alpha_t", []),
        "metrics": clm.compute_all(matrix),
        "stds": session_stds(matrix),
        "curves": forgetting_curves(matrix),
    }


def _plot_curves(run: dict, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for ds_id, points in run["curves"].items():
        sessions = [p[0] for p in points]
        values = [p[1] for p in points]
        ax.plot(sessions, values, marker="o", label=ds_id)
    ax.set_xlabel("session")
    ax.set_ylabel("test DSC")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(run["name"])
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def build_report(run_dirs, out_dir) -> dict:
    """Compare runs; writes report.md, metrics.csv and per-run plots to out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = []
    skipped = []
    for rd in run_dirs:
        run = load_run(rd)
        if run is None:
            skipped.append(str(rd))
            continue
        runs.append(run)

    md = ["# Run comparison", "", "| run | strategy | AVG | ILM | BWT | FWT |",
          "|---|---|---|---|---|---|"]
    csv_lines = ["run,strategy,avg,ilm,bwt,fwt," +
                 "first_dataset_std"]
    for run in runs:
        m = run["metrics"]
        strat = run["strategy"].get("name", "?")
        md.append(
            f"| {run['name']} | {strat} | {m['avg']:.4f} | {m['ilm']:.4f} "
            f"| {m['bwt']:.4f} | {m['fwt']:.4f} |"
        )
        first_std = run["stds"][run["matrix"].dataset_ids[0]]
        csv_lines.append(
            f"{run['name']},{strat},{m['avg']:.6f},{m['ilm']:.6f},"
            f"{m['bwt']:.6f},{m['fwt']:.6f},{first_std:.6f}"
        )
        plot_path = out_dir / f"forgetting_{run['name']}.png"
        _plot_curves(run, plot_path)
        run["plot"] = str(plot_path)
        (out_dir / f"matrix_{run['name']}.csv").write_text(clm.matrix_csv(run["matrix"]))

    md += ["", "## Per-dataset DSC stability (std across sessions)", ""]
    md.append("| run | dataset | std |")
    md.append("|---|---|---|")
    for run in runs:
        for ds_id, std in run["stds"].items():
            md.append(f"| {run['name']} | {ds_id} | {std:.4f} |")

    (out_dir / "report.md").write_text("\n".join(md) + "\n")
    (out_dir / "metrics.csv").write_text("\n".join(csv_lines) + "\n")
    return {"runs": runs, "skipped": skipped, "out_dir": str(out_dir)}
