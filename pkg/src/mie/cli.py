"""Command-line surface: gen-data, train, ablate, landscape, report.

Exit codes: 0 success, 1 validation error (bad config, bad input file),
2 runtime or numeric error. All artifacts are deterministic for a given
config and seed, so re-running a command overwrites byte-identical
files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import __version__
from . import evaluate as ev
from .config import RunConfig, load_grid, load_run_config
from .data import generate, load_dataset, save_dataset
from .errors import MieError, NumericError, ValidationError
from .nn import load_model, save_model
from .trainer import ablate, train

__all__ = ["main"]


class _Parser(argparse.ArgumentParser):
    # Bad flags are validation errors: exit 1, not argparse's default 2.
    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _meta(config: RunConfig) -> dict:
    return {
        "artifact_version": __version__,
        "config": {
            "seed": config.seed,
            "fusion": config.fusion,
            "data": dataclasses.asdict(config.data),
            "train": dataclasses.asdict(config.train),
        },
    }


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def cmd_gen_data(args) -> int:
    config = load_run_config(args.config, seed_override=args.seed)
    dataset = generate(config.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, out)
    split_sizes = {
        name: int(dataset.split_indices(name).size) for name in ("train", "val", "test")
    }
    print(
        f"wrote {out}: n={dataset.n} m={dataset.m} c={dataset.c} "
        f"dims={list(dataset.dims)} splits={split_sizes}"
    )
    return 0


def _resolve_out_dir(config: RunConfig, args) -> Path:
    out_dir = Path(args.out) if args.out else Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _load_dataset_from(config: RunConfig):
    if not config.dataset_path:
        raise ValidationError("config is missing dataset.path")
    path = Path(config.dataset_path)
    if not path.exists():
        raise ValidationError(f"dataset file not found: {path}")
    return load_dataset(path)


def cmd_train(args) -> int:
    config = load_run_config(args.config, seed_override=args.seed)
    dataset = _load_dataset_from(config)
    result = train(dataset, config.train)
    out_dir = _resolve_out_dir(config, args)

    for j, model in enumerate(result.models, start=1):
        save_model(model, out_dir / f"modality_{j}.ckpt")
    meta = _meta(config)
    with open(out_dir / "phase_trace.jsonl", "w") as fh:
        fh.write(json.dumps({"type": "meta", **meta}, sort_keys=True) + "\n")
        for record in result.phase_trace:
            row = dataclasses.asdict(record)
            row["type"] = "phase"
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    label = "mie"
    if not config.train.ablation.sam_on and not config.train.ablation.gm_on:
        label = "baseline"
    _write_json(
        out_dir / "metrics.json",
        {"label": label, "meta": meta, "metrics": result.final_metrics},
    )
    _write_json(
        out_dir / "singular_report.json",
        {"meta": meta, "records": result.singular_records},
    )
    fused = result.final_metrics[f"fused_{config.fusion}"]
    print(
        f"run '{label}' done: fused {config.fusion} accuracy "
        f"{fused['accuracy']:.4f}, map {fused['mean_average_precision']:.4f}, "
        f"macro-f1 {fused['macro_f1']:.4f} (artifacts in {out_dir})"
    )
    return 0


def cmd_ablate(args) -> int:
    config = load_run_config(args.config, seed_override=args.seed)
    dataset = _load_dataset_from(config)
    grid = load_grid(args.grid, dataset.m)
    workers = int(os.environ.get("MIE_THREADS", "1"))
    table = ablate(dataset, config.train, grid, workers=max(1, workers))
    out_dir = _resolve_out_dir(config, args)
    meta = _meta(config)
    with open(out_dir / "ablation_runs.jsonl", "w") as fh:
        fh.write(json.dumps({"type": "meta", **meta}, sort_keys=True) + "\n")
        for record in table["runs"]:
            fh.write(json.dumps({"type": "run", **record}, sort_keys=True) + "\n")
    _write_json(out_dir / "ablation_summary.json", {"meta": meta, "cells": table["summary"]})
    print(f"ablation grid done: {len(table['runs'])} runs over {len(grid.cells)} cells")
    for cell in table["summary"]:
        acc = cell["metrics"]["fused_average.accuracy"]
        print(
            f"  {cell['cell']}: fused accuracy {acc['mean']:.4f} "
            f"+/- {acc['stddev']:.4f} over {cell['n_runs']} runs"
        )
    return 0


def cmd_landscape(args) -> int:
    config = load_run_config(args.config, seed_override=args.seed)
    dataset = _load_dataset_from(config)
    model = load_model(args.checkpoint)
    j = config.landscape_modality
    if not 1 <= j <= dataset.m:
        raise ValidationError(f"landscape.modality {j} out of range for {dataset.m} modalities")
    idx = dataset.split_indices(config.landscape_split)
    if config.landscape_samples > 0:
        idx = idx[: config.landscape_samples]
    if idx.size == 0:
        raise ValidationError(f"split {config.landscape_split!r} has no samples")
    if dataset.dims[j - 1] != model.input_dim:
        raise ValidationError(
            f"checkpoint input dim {model.input_dim} does not match modality {j} "
            f"features ({dataset.dims[j - 1]})"
        )
    batch = (dataset.features[j - 1][idx], dataset.labels[idx])
    grid = ev.landscape_slice(
        model,
        batch,
        grid_radius=config.landscape_radius,
        grid_points=config.landscape_grid_points,
        seed=config.seed,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["alpha,beta,loss"]
    for i, alpha in enumerate(grid.alphas):
        for k, beta in enumerate(grid.betas):
            lines.append(f"{float(alpha)!r},{float(beta)!r},{float(grid.losses[i, k])!r}")
    out.write_text("\n".join(lines) + "\n")
    _write_json(out.with_suffix(out.suffix + ".meta.json"), _meta(config))
    center = config.landscape_grid_points // 2
    print(
        f"wrote {out}: {len(lines) - 1} grid points, "
        f"center loss {grid.losses[center, center]:.4f}"
    )
    return 0


def _read_run_dir(run_dir: Path) -> tuple[dict, list[dict]]:
    singular_path = run_dir / "singular_report.json"
    trace_path = run_dir / "phase_trace.jsonl"
    missing = [str(p) for p in (singular_path, trace_path) if not p.exists()]
    if missing:
        raise ValidationError(
            f"{run_dir} is not a run directory; expected files: {', '.join(missing)}"
        )
    singular = json.loads(singular_path.read_text())
    phases = []
    for line in trace_path.read_text().splitlines():
        row = json.loads(line)
        if row.get("type") == "phase":
            phases.append(row)
    return singular, phases


def cmd_report(args) -> int:
    runs = [(Path(d), *_read_run_dir(Path(d))) for d in args.run_dirs]
    print("singular value magnitudes (max / mean of last built covariance):")
    for run_dir, singular, _ in runs:
        print(f"  {run_dir}:")
        for rec in singular["records"]:
            print(
                json.dumps(
                    {
                        "layer": f"modality{rec['modality']}/{rec['layer']}",
                        "max": rec["max"],
                        "mean": rec["mean"],
                    },
                    sort_keys=True,
                )
            )
    print()
    print("phase trace (outer iter, trained modality, fused accuracy, mean train loss):")
    for run_dir, _, phases in runs:
        print(f"  {run_dir}:")
        for row in phases:
            per_mod = ", ".join(f"{a:.4f}" for a in row["phase_end_per_modality_accuracy"])
            print(
                f"    outer {row['outer_iter']} modality {row['modality_index']}: "
                f"multi {row['phase_end_multi_accuracy']:.4f} (per-modality {per_mod}), "
                f"train loss {row['mean_train_loss']:.4f}"
            )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mie", description=__doc__)
    parser.add_argument("--version", action="version", version=f"mie {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the alternating training schedule")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="output directory (default: out.dir)")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run an ablation / sensitivity grid")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("landscape", help="export a 2-d loss-landscape slice as CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("report", help="print singular-value and phase summaries")
    p.add_argument("run_dirs", nargs="+", metavar="RUN_DIR")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2
    except (MieError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
