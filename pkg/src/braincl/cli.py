"""Command-line surface: `braincl synth|run|report`.

Exit codes: 0 success, 1 runtime failure (e.g. a diverged session),
2 validation failure (schema errors, missing preconditions).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import metrics as clm
from . import synthdata
from .domain import ValidationError
from .experiment import Experiment, ExperimentError, build_strategy, load_experiment
from .report import build_report
from .trainer import SessionDiverged, run_sequence


def _print_matrix(matrix: clm.TrainTestMatrix) -> None:
    ids = matrix.dataset_ids
    width = max(8, max(len(i) for i in ids) + 1)
    print("train\\test".ljust(12) + "".join(i.rjust(width) for i in ids))
    for i, row in enumerate(matrix.dsc, start=1):
        print(f"session {i}".ljust(12) + "".join(f"{v:.4f}".rjust(width) for v in row))


def cmd_synth(args) -> int:
    exp = load_experiment(args.experiment)
    data_root = Path(args.data_root or exp.data_root)
    generated, skipped = [], []
    for spec in exp.dataset_specs:
        manifest = data_root / spec.id / synthdata.MANIFEST_NAME
        fingerprint = synthdata.dataset_fingerprint(spec, exp.universe)
        if manifest.exists():
            import json

            existing = json.loads(manifest.read_text()).get("fingerprint")
            if existing == fingerprint:
                skipped.append(spec.id)
                continue
        dataset = synthdata.generate_dataset(spec, exp.universe)
        synthdata.save_dataset(dataset, data_root)
        generated.append(spec.id)
    print(f"generated: {generated or 'none'}")
    print(f"skipped (up to date): {skipped or 'none'}")
    return 0


def _resolve_strategy(exp: Experiment, args):
    if args.strategy is None:
        return exp.strategy
    doc = {"name": args.strategy}
    if args.static_alpha is not None:
        doc["static_alpha"] = args.static_alpha
    return build_strategy(doc, path="--strategy")


def cmd_run(args) -> int:
    exp = load_experiment(args.experiment)
    strategy = _resolve_strategy(exp, args)
    seed = args.seed if args.seed is not None else exp.seed
    cfg = exp.sequence_config(strategy=strategy, seed=seed)

    data_root = Path(args.data_root or exp.data_root)
    datasets = []
    for spec in cfg.datasets:
        manifest = data_root / spec.id / synthdata.MANIFEST_NAME
        if not manifest.exists():
            raise ValidationError(
                f"dataset {spec.id!r} not found under {data_root}; run `braincl synth` first"
            )
        ds = synthdata.load_dataset(data_root, spec.id)
        if synthdata.dataset_fingerprint(ds.spec, ds.universe) != synthdata.dataset_fingerprint(
            spec, exp.universe
        ):
            raise ValidationError(
                f"dataset {spec.id!r} on disk was generated from a different spec; re-run `braincl synth`"
            )
        datasets.append(ds)

    run_name = args.run_name or f"{exp.name}_{strategy.name}_seed{seed}"
    run_dir = exp.runs_root() / run_name
    try:
        matrix, artifacts = run_sequence(cfg, run_dir, datasets=datasets)
    except SessionDiverged as exc:
        print(f"session diverged: {exc.record}", file=sys.stderr)
        print(f"partial artifacts in {run_dir}", file=sys.stderr)
        return 1

    values = clm.write_metrics(matrix, run_dir / "metrics.json")
    print(f"run directory: {run_dir}")
    _print_matrix(matrix)
    print()
    print("metric      value")
    for key in ("avg", "ilm", "bwt", "fwt"):
        print(f"{key.upper():<10} {values[key]:+.4f}")
    if artifacts["audit_violations"]:
        print(f"WARNING: past-dataset reads detected: {artifacts['audit_violations']}")
    return 0


def cmd_report(args) -> int:
    result = build_report(args.run_dirs, args.out)
    for rd in result["skipped"]:
        print(f"skipped {rd} (no usable matrix.json)", file=sys.stderr)
    if not result["runs"]:
        print("no runs to report", file=sys.stderr)
        return 1
    print(f"report written to {result['out_dir']}")
    for run in result["runs"]:
        m = run["metrics"]
        print(
            f"{run['name']}: AVG={m['avg']:.4f} ILM={m['ilm']:.4f} "
            f"BWT={m['bwt']:+.4f} FWT={m['fwt']:.4f}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="braincl",
        description="Buffer-free continual learning for variable-modality 3D lesion segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate all datasets of an experiment file")
    p_synth.add_argument("experiment", help="experiment YAML file")
    p_synth.add_argument("--data-root", default=None, help="override the dataset directory")
    p_synth.set_defaults(func=cmd_synth)

    p_run = sub.add_parser("run", help="train a full sequence and write run artifacts")
    p_run.add_argument("experiment", help="experiment YAML file")
    p_run.add_argument("--strategy", default=None,
                       choices=["proposed", "naive", "static_kd", "ablation"],
                       help="override the experiment's strategy preset")
    p_run.add_argument("--static-alpha", type=float, default=None)
    p_run.add_argument("--seed", type=int, default=None, help="override the experiment seed")
    p_run.add_argument("--run-name", default=None)
    p_run.add_argument("--data-root", default=None)
    p_run.set_defaults(func=cmd_run)

    p_report = sub.add_parser("report", help="compare completed runs")
    p_report.add_argument("run_dirs", nargs="+", help="run directories to compare")
    p_report.add_argument("--out", default="report", help="output directory")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ExperimentError, ValidationError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
