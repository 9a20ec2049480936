"""Command-line entry points.

Subcommands:
  prepare   audio manifest -> patch archive
  cluster   confusion matrix file -> super-category partition file
  vote      prediction files + partition -> per-segment decisions file
  run       full pipeline from a JSON config (synthetic or real mode)
  simulate  SimSpec JSON -> truths, prediction files and the planted partition
  report    re-render the tables of an existing run directory

Exit codes: 0 success, 1 validation error, 2 stage failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .classifier import export_predictions, import_predictions
from .clustering import build_affinity, read_confusion, spectral_cluster
from .dataset import load_manifest, read_partition, synthetic_catalog, write_partition
from .dsp import CQTParams, prepare_segment, read_wav, write_patch_archive
from .pipeline import (
    StageError,
    load_config,
    read_report,
    run_pipeline,
    sim_spec_from_dict,
)
from .simulate import simulate_classifiers
from .voting import PunishmentConfig, vote_dataset, write_decisions


def _cmd_prepare(args) -> int:
    manifest = load_manifest(args.manifest)
    params = CQTParams(
        f_min=args.fmin,
        bins_per_octave=args.bins_per_octave,
        n_bins=args.nbins,
        hop_seconds=args.hop,
        window_kind=args.window,
        magnitude_floor_db=args.floor_db,
    )
    patches = []
    labels = {}
    for entry in manifest.entries:
        segment = read_wav(entry.path, segment_id=entry.segment_id)
        patches.extend(prepare_segment(segment, params))
        labels[entry.segment_id] = manifest.catalog.names[entry.class_index]
    index = write_patch_archive(patches, labels, args.out)
    print(f"wrote {len(patches)} patches, index at {index}")
    return 0


def _cmd_cluster(args) -> int:
    confusion, catalog = read_confusion(args.confusion)
    affinity = build_affinity(confusion, args.knn)
    partition = spectral_cluster(affinity, args.k, args.seed)
    write_partition(partition, catalog, args.out)
    for cat in partition.categories:
        names = ", ".join(catalog.names[m] for m in cat.sorted_members)
        print(f"{cat.name}: {names}")
    print(f"wrote partition to {args.out}")
    return 0


def _cmd_vote(args) -> int:
    manifest = load_manifest(args.manifest, require_audio=False) if args.manifest else None
    partition, catalog = read_partition(
        args.partition, manifest.catalog if manifest else None
    )
    base = import_predictions(args.base_preds, n_classes=partition.n_classes)
    supers = []
    if len(args.super_preds) != partition.n_categories:
        raise ValueError(
            f"partition has {partition.n_categories} categories but "
            f"{len(args.super_preds)} super prediction files were given"
        )
    for j, path in enumerate(args.super_preds):
        supers.append(
            import_predictions(path, n_classes=partition.categories[j].task_classes)
        )
    cfg = PunishmentConfig.parse_threshold(args.threshold, gamma=args.gamma)
    decisions = vote_dataset(base, supers, partition, cfg)
    write_decisions(decisions, args.out, manifest.labels() if manifest else None)
    punished = sum(1 for d in decisions if d.punished_supers)
    changed = sum(1 for d in decisions if d.majority != d.punishment)
    print(
        f"voted {len(decisions)} segments: {punished} punished, "
        f"{changed} decisions changed; wrote {args.out}"
    )
    return 0


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    report = run_pipeline(cfg)
    print(f"mode: {cfg.mode}, folds: {len(report.folds)}")
    print(f"majority voting accuracy:   {report.mean_majority_accuracy:.4f}")
    print(f"punishment voting accuracy: {report.mean_punishment_accuracy:.4f}")
    if report.partition_recovered is not None:
        print(f"planted partition recovered: {report.partition_recovered}")
    print(f"report written to {Path(cfg.out_dir) / 'report.json'}")
    return 0


def _cmd_simulate(args) -> int:
    with open(args.spec) as f:
        spec = sim_spec_from_dict(json.load(f))
    truths, base, supers = simulate_classifiers(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_predictions(base, out / "base_predictions.csv")
    for j, sp in enumerate(supers):
        export_predictions(sp, out / f"super_{j}_predictions.csv")
    catalog = synthetic_catalog(spec.n_classes)
    write_partition(spec.partition, catalog, out / "partition.txt")
    with open(out / "truths.csv", "w") as f:
        f.write("segment_id,class_index,class_name\n")
        for seg, truth in truths.items():
            f.write(f"{seg},{truth},{catalog.names[truth]}\n")
    print(f"simulated {spec.n_segments} segments x {spec.patches_per_segment} patches into {out}")
    return 0


def _cmd_report(args) -> int:
    report = read_report(args.run_dir)
    width = max(len(n) for n in report.class_names)
    print(f"{'scene'.ljust(width)}  majority  punishment")
    for c, name in enumerate(report.class_names):
        maj = float(np.mean([f.per_class_recall_majority[c] for f in report.folds]))
        pun = float(np.mean([f.per_class_recall_punishment[c] for f in report.folds]))
        print(f"{name.ljust(width)}  {maj:8.4f}  {pun:10.4f}")
    print(f"{'overall'.ljust(width)}  {report.mean_majority_accuracy:8.4f}  {report.mean_punishment_accuracy:10.4f}")
    print()
    print("super categories:")
    for name, members in report.partition:
        print(f"  {name}: {', '.join(members)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="asc",
        description="Coarse-to-fine acoustic scene classification toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="turn manifest audio into a patch archive")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fmin", type=float, default=27.5)
    p.add_argument("--bins-per-octave", type=int, default=24)
    p.add_argument("--nbins", type=int, default=143)
    p.add_argument("--hop", type=float, default=0.011)
    p.add_argument("--window", default="hann")
    p.add_argument("--floor-db", type=float, default=-80.0)
    p.set_defaults(func=_cmd_prepare)

    p = sub.add_parser("cluster", help="cluster a confusion matrix into super categories")
    p.add_argument("--confusion", required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--knn", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_cluster)

    p = sub.add_parser("vote", help="majority and punishment voting from prediction files")
    p.add_argument("--base-preds", required=True)
    p.add_argument("--super-preds", required=True, nargs="+")
    p.add_argument("--partition", required=True)
    p.add_argument("--manifest", help="optional manifest for truth labels and class order")
    p.add_argument("--gamma", type=float, default=0.25)
    p.add_argument("--threshold", default="5/8")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_vote)

    p = sub.add_parser("run", help="run the full pipeline from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("simulate", help="write synthetic prediction files from a SimSpec")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("report", help="print the tables of an existing run directory")
    p.add_argument("--in", dest="run_dir", required=True)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
