"""End-to-end orchestration: cross-validation, clustering, voting, metrics, reports.

The flow mirrors the method flowchart: prepare patches, train (or simulate) the
base classifier, accumulate held-out confusion, cluster it into super
categories, train (or simulate) the super classifiers, punishment-vote, and
evaluate. Synthetic mode is the default verification path; real mode drives
the same stages from a manifest of wave files and can also consume predictions
produced by external models through the prediction file format.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .classifier import (
    PredictionMatrix,
    ReferenceModelParams,
    TrainConfig,
    predict,
    init_super_from_base,
    save_model,
    train,
)
from .clustering import (
    ConfusionMatrix,
    accumulate_confusion,
    average_confusions,
    build_affinity,
    spectral_cluster,
    write_confusion,
)
from .dataset import (
    ClassCatalog,
    DatasetManifest,
    SuperCategoryPartition,
    load_manifest,
    make_partition,
    relabel_for_super,
    split_fold,
    synthetic_catalog,
)
from .dsp import CQTParams, prepare_segment, read_wav
from .simulate import SimSpec, simulate_classifiers
from .validation import check_seed
from .voting import (
    PunishmentConfig,
    SegmentDecision,
    build_voting_vector,
    majority_vote,
    vote_dataset,
    write_decisions,
)


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def stage_seed(global_seed: int, stage: str) -> int:
    """Deterministic per-stage seed.

    One global knob fans out to independent stage seeds by hashing
    ``"<stage>:<global_seed>"`` with blake2b and reducing to 32 bits.
    """
    digest = hashlib.blake2b(f"{stage}:{check_seed(global_seed)}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") % (2**32)


@dataclass(frozen=True)
class ClusteringConfig:
    n_categories: int = 3
    knn_k: int | None = 2
    per_patch: bool = False

    def __post_init__(self):
        if self.n_categories < 1:
            raise ValueError("n_categories must be at least 1")
        if self.knn_k is not None and self.knn_k < 1:
            raise ValueError("knn_k must be at least 1 (or null for a dense graph)")


@dataclass(frozen=True)
class ClassifierConfig:
    grid: int = 4
    hidden_width: int = 64
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 25

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            seed=seed,
            patience=self.patience,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run needs; build it from a JSON file via ``load_config``."""

    mode: str
    seed: int
    out_dir: str
    clustering: ClusteringConfig
    punishment: PunishmentConfig
    simulation: SimSpec | None = None
    manifest: str | None = None
    split: int = 0
    cqt: CQTParams | None = None
    classifier: ClassifierConfig | None = None
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.mode not in ("synthetic", "real"):
            raise ValueError("mode must be 'synthetic' or 'real'")
        check_seed(self.seed)
        if self.mode == "synthetic" and self.simulation is None:
            raise ValueError("synthetic mode needs a 'simulation' section")
        if self.mode == "real":
            if not self.manifest:
                raise ValueError("real mode needs a 'manifest' path")
            if not Path(self.manifest).exists():
                raise ValueError(f"manifest not found: {self.manifest}")


def sim_spec_from_dict(d: Mapping, default_seed: int = 0) -> SimSpec:
    """Build a SimSpec from a parsed JSON mapping."""
    required = {"n_classes", "partition", "n_segments", "patches_per_segment", "p_base", "q", "p_super"}
    missing = sorted(required - set(d))
    if missing:
        raise ValueError(f"simulation section is missing {missing}")
    partition = make_partition([set(int(m) for m in block) for block in d["partition"]])
    p_super = d["p_super"]
    if isinstance(p_super, (int, float)):
        p_super = tuple(float(p_super) for _ in range(partition.n_categories))
    else:
        p_super = tuple(float(p) for p in p_super)
    return SimSpec(
        n_classes=int(d["n_classes"]),
        partition=partition,
        n_segments=int(d["n_segments"]),
        patches_per_segment=int(d["patches_per_segment"]),
        p_base=float(d["p_base"]),
        q=float(d["q"]),
        p_super=p_super,
        dispersion=float(d.get("dispersion", 4.0)),
        seed=int(d.get("seed", default_seed)),
    )


def config_from_dict(d: Mapping) -> ExperimentConfig:
    mode = d.get("mode", "synthetic")
    seed = int(d.get("seed", 0))
    clustering = ClusteringConfig(
        n_categories=int(d.get("clustering", {}).get("n_categories", 3)),
        knn_k=(lambda v: None if v is None else int(v))(d.get("clustering", {}).get("knn_k", 2)),
        per_patch=bool(d.get("clustering", {}).get("per_patch", False)),
    )
    pun = d.get("punishment", {})
    threshold = str(pun.get("threshold", "5/8"))
    punishment = PunishmentConfig.parse_threshold(threshold, gamma=float(pun.get("gamma", 0.25)))
    simulation = sim_spec_from_dict(d["simulation"], default_seed=seed) if "simulation" in d else None
    cqt = None
    if "cqt" in d:
        c = d["cqt"]
        cqt = CQTParams(
            f_min=float(c.get("f_min", 27.5)),
            bins_per_octave=int(c.get("bins_per_octave", 24)),
            n_bins=int(c.get("n_bins", 143)),
            hop_seconds=float(c.get("hop_seconds", 0.011)),
            window_kind=str(c.get("window", "hann")),
            magnitude_floor_db=float(c.get("floor_db", -80.0)),
        )
    classifier = None
    if "classifier" in d:
        c = d["classifier"]
        classifier = ClassifierConfig(
            grid=int(c.get("grid", 4)),
            hidden_width=int(c.get("hidden_width", 64)),
            learning_rate=float(c.get("learning_rate", 1e-4)),
            batch_size=int(c.get("batch_size", 32)),
            max_epochs=int(c.get("max_epochs", 200)),
            patience=int(c.get("patience", 25)),
        )
    return ExperimentConfig(
        mode=mode,
        seed=seed,
        out_dir=str(d.get("out_dir", "runs/out")),
        clustering=clustering,
        punishment=punishment,
        simulation=simulation,
        manifest=d.get("manifest"),
        split=int(d.get("split", 0)),
        cqt=cqt,
        classifier=classifier,
        raw=dict(d),
    )


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        return config_from_dict(json.load(f))


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    per_class_recall: tuple[float, ...]
    n_segments: int


def evaluate(decisions: Mapping[str, int], truths: Mapping[str, int], n_classes: int) -> EvalResult:
    """Overall accuracy and per-class recall of segment decisions.

    Classes with no test segments report a recall of 0.
    """
    if not decisions:
        raise ValueError("no decisions to evaluate")
    if set(decisions) != set(truths):
        raise ValueError("decision and truth segment ids do not match")
    correct = np.zeros(n_classes)
    totals = np.zeros(n_classes)
    hit = 0
    for seg, decided in decisions.items():
        t = truths[seg]
        totals[t] += 1
        if decided == t:
            correct[t] += 1
            hit += 1
    recall = np.where(totals > 0, correct / np.maximum(totals, 1), 0.0)
    return EvalResult(
        accuracy=hit / len(decisions),
        per_class_recall=tuple(float(r) for r in recall),
        n_segments=len(decisions),
    )


@dataclass(frozen=True)
class FoldResult:
    fold: int
    n_segments: int
    majority_accuracy: float
    punishment_accuracy: float
    base_patch_accuracy: float
    super_patch_accuracies: tuple[float, ...]
    per_class_recall_majority: tuple[float, ...]
    per_class_recall_punishment: tuple[float, ...]
    confusion_majority: tuple[tuple[float, ...], ...]
    confusion_punishment: tuple[tuple[float, ...], ...]

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "n_segments": self.n_segments,
            "majority_accuracy": self.majority_accuracy,
            "punishment_accuracy": self.punishment_accuracy,
            "base_patch_accuracy": self.base_patch_accuracy,
            "super_patch_accuracies": list(self.super_patch_accuracies),
            "per_class_recall_majority": list(self.per_class_recall_majority),
            "per_class_recall_punishment": list(self.per_class_recall_punishment),
            "confusion_majority": [list(r) for r in self.confusion_majority],
            "confusion_punishment": [list(r) for r in self.confusion_punishment],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FoldResult":
        return cls(
            fold=int(d["fold"]),
            n_segments=int(d["n_segments"]),
            majority_accuracy=float(d["majority_accuracy"]),
            punishment_accuracy=float(d["punishment_accuracy"]),
            base_patch_accuracy=float(d["base_patch_accuracy"]),
            super_patch_accuracies=tuple(float(v) for v in d["super_patch_accuracies"]),
            per_class_recall_majority=tuple(float(v) for v in d["per_class_recall_majority"]),
            per_class_recall_punishment=tuple(float(v) for v in d["per_class_recall_punishment"]),
            confusion_majority=tuple(tuple(float(v) for v in r) for r in d["confusion_majority"]),
            confusion_punishment=tuple(tuple(float(v) for v in r) for r in d["confusion_punishment"]),
        )


@dataclass(frozen=True)
class Report:
    """Everything a run produced, in plain serialisable values."""

    config: dict
    stage_seeds: dict
    class_names: tuple[str, ...]
    partition: tuple[tuple[str, tuple[str, ...]], ...]
    clustered_partition: tuple[tuple[str, tuple[str, ...]], ...]
    partition_recovered: bool | None
    folds: tuple[FoldResult, ...]
    mean_majority_accuracy: float
    mean_punishment_accuracy: float

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "stage_seeds": self.stage_seeds,
            "class_names": list(self.class_names),
            "partition": [[name, list(members)] for name, members in self.partition],
            "clustered_partition": [[name, list(members)] for name, members in self.clustered_partition],
            "partition_recovered": self.partition_recovered,
            "folds": [f.to_dict() for f in self.folds],
            "mean_majority_accuracy": self.mean_majority_accuracy,
            "mean_punishment_accuracy": self.mean_punishment_accuracy,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Report":
        return cls(
            config=dict(d["config"]),
            stage_seeds=dict(d["stage_seeds"]),
            class_names=tuple(d["class_names"]),
            partition=tuple((name, tuple(members)) for name, members in d["partition"]),
            clustered_partition=tuple(
                (name, tuple(members)) for name, members in d["clustered_partition"]
            ),
            partition_recovered=d["partition_recovered"],
            folds=tuple(FoldResult.from_dict(f) for f in d["folds"]),
            mean_majority_accuracy=float(d["mean_majority_accuracy"]),
            mean_punishment_accuracy=float(d["mean_punishment_accuracy"]),
        )


def _partition_names(partition: SuperCategoryPartition, catalog: ClassCatalog):
    return tuple(
        (cat.name, tuple(catalog.names[m] for m in cat.sorted_members))
        for cat in partition.categories
    )


def _decision_maps(decisions: Sequence[SegmentDecision]) -> tuple[dict, dict]:
    majority = {d.segment_id: d.majority for d in decisions}
    punishment = {d.segment_id: d.punishment for d in decisions}
    return majority, punishment


def _confusion_tuple(truths: Mapping[str, int], decided: Mapping[str, int], n_classes: int):
    m = accumulate_confusion(
        [truths[s] for s in decided], [decided[s] for s in decided], n_classes
    )
    return tuple(tuple(float(v) for v in row) for row in m.counts)


def _patch_truths(pm: PredictionMatrix, truths: Mapping[str, int]) -> np.ndarray:
    return np.array([truths[seg] for seg, _, _ in pm.keys], dtype=np.int64)


def _patch_accuracy(pm: PredictionMatrix, patch_truths: np.ndarray) -> float:
    return float(np.mean(pm.probs.argmax(axis=1) == patch_truths))


def _majority_decisions(base: PredictionMatrix) -> dict[str, int]:
    rows = base.segment_rows()
    return {
        seg: majority_vote(build_voting_vector(base.probs[rows[seg]], segment_id=seg))
        for seg in base.segment_order()
    }


def _fold_result(
    fold: int,
    base: PredictionMatrix,
    supers: Sequence[PredictionMatrix],
    partition: SuperCategoryPartition,
    punishment_cfg: PunishmentConfig,
    truths: Mapping[str, int],
    n_classes: int,
) -> tuple[FoldResult, list[SegmentDecision]]:
    decisions = vote_dataset(base, supers, partition, punishment_cfg)
    majority_map, punishment_map = _decision_maps(decisions)
    eval_majority = evaluate(majority_map, {s: truths[s] for s in majority_map}, n_classes)
    eval_punishment = evaluate(punishment_map, {s: truths[s] for s in punishment_map}, n_classes)
    base_truths = _patch_truths(base, truths)
    super_accuracies = []
    for j, sp in enumerate(supers):
        relabeled = relabel_for_super(_patch_truths(sp, truths), partition.categories[j], n_classes)
        super_accuracies.append(_patch_accuracy(sp, relabeled))
    result = FoldResult(
        fold=fold,
        n_segments=eval_majority.n_segments,
        majority_accuracy=eval_majority.accuracy,
        punishment_accuracy=eval_punishment.accuracy,
        base_patch_accuracy=_patch_accuracy(base, base_truths),
        super_patch_accuracies=tuple(super_accuracies),
        per_class_recall_majority=eval_majority.per_class_recall,
        per_class_recall_punishment=eval_punishment.per_class_recall,
        confusion_majority=_confusion_tuple(truths, majority_map, n_classes),
        confusion_punishment=_confusion_tuple(truths, punishment_map, n_classes),
    )
    return result, decisions


def _run_synthetic(cfg: ExperimentConfig, out: Path | None) -> Report:
    seeds = {
        "simulate": stage_seed(cfg.seed, "simulate"),
        "cluster": stage_seed(cfg.seed, "cluster"),
    }
    spec = replace(cfg.simulation, seed=seeds["simulate"])
    catalog = synthetic_catalog(spec.n_classes)

    try:
        truths, base, supers = simulate_classifiers(spec)
    except Exception as e:
        raise StageError("simulate", e) from e

    try:
        if cfg.clustering.per_patch:
            confusion = accumulate_confusion(
                _patch_truths(base, truths), base.probs.argmax(axis=1), spec.n_classes
            )
        else:
            majority_map = _majority_decisions(base)
            confusion = accumulate_confusion(
                [truths[s] for s in majority_map],
                [majority_map[s] for s in majority_map],
                spec.n_classes,
            )
        affinity = build_affinity(confusion, cfg.clustering.knn_k)
        clustered = spectral_cluster(affinity, cfg.clustering.n_categories, seeds["cluster"])
    except StageError:
        raise
    except Exception as e:
        raise StageError("cluster", e) from e

    try:
        fold, decisions = _fold_result(
            0, base, supers, spec.partition, cfg.punishment, truths, spec.n_classes
        )
    except Exception as e:
        raise StageError("vote", e) from e

    report = Report(
        config=cfg.raw,
        stage_seeds=seeds,
        class_names=catalog.names,
        partition=_partition_names(spec.partition, catalog),
        clustered_partition=_partition_names(clustered, catalog),
        partition_recovered=clustered.as_sets() == spec.partition.as_sets(),
        folds=(fold,),
        mean_majority_accuracy=fold.majority_accuracy,
        mean_punishment_accuracy=fold.punishment_accuracy,
    )
    if out is not None:
        write_confusion(confusion, catalog, out / "confusion.csv")
        _write_partition_file(report.partition, out / "partition.txt")
        write_decisions(decisions, out / "decisions_fold0.csv", truths)
    return report


def _prepare_patches(manifest: DatasetManifest, cqt: CQTParams):
    patches = {}
    for entry in manifest.entries:
        segment = read_wav(entry.path, segment_id=entry.segment_id)
        patches[entry.segment_id] = prepare_segment(segment, cqt)
    return patches


def _stack_patches(patch_map, segment_ids, truths):
    keys, mats, labels = [], [], []
    for sid in segment_ids:
        for patch in patch_map[sid]:
            keys.append(patch.key)
            mats.append(patch.values)
            labels.append(truths[sid])
    return tuple(keys), np.stack(mats), np.array(labels, dtype=np.int64)


def _run_real(cfg: ExperimentConfig, out: Path | None) -> Report:
    classifier_cfg = cfg.classifier if cfg.classifier is not None else ClassifierConfig()
    cqt = cfg.cqt if cfg.cqt is not None else CQTParams()

    try:
        manifest = load_manifest(cfg.manifest)
    except Exception as e:
        raise StageError("load_manifest", e) from e
    catalog = manifest.catalog
    n_classes = catalog.n_classes
    truths = manifest.labels()

    try:
        patch_map = _prepare_patches(manifest, cqt)
    except Exception as e:
        raise StageError("prepare", e) from e

    if out is not None:
        _write_patch_index(patch_map, manifest, out / "patch_index.csv")

    n_folds = manifest.fold_count(cfg.split)
    seeds: dict[str, int] = {"cluster": stage_seed(cfg.seed, "cluster")}

    base_params: list[ReferenceModelParams] = []
    base_preds: list[PredictionMatrix] = []
    fold_truths: list[dict[str, int]] = []
    confusions: list[ConfusionMatrix] = []
    train_sets = []
    test_stacks = []
    for f in range(n_folds):
        train_ids, test_ids = split_fold(manifest, f, cfg.split)
        if not train_ids or not test_ids:
            raise StageError("split", ValueError(f"fold {f} has an empty train or test set"))
        _, x_train, y_train = _stack_patches(patch_map, train_ids, truths)
        keys_test, x_test, _ = _stack_patches(patch_map, test_ids, truths)
        test_stacks.append(x_test)
        seeds[f"train_base/{f}"] = stage_seed(cfg.seed, f"train_base/{f}")
        try:
            result = train(
                x_train,
                y_train,
                n_classes,
                classifier_cfg.train_config(seeds[f"train_base/{f}"]),
                grid=classifier_cfg.grid,
                hidden_width=classifier_cfg.hidden_width,
            )
        except Exception as e:
            raise StageError(f"train_base/{f}", e) from e
        pm = PredictionMatrix(keys=keys_test, probs=predict(result.params, x_test))
        base_params.append(result.params)
        base_preds.append(pm)
        fold_truths.append({sid: truths[sid] for sid in test_ids})
        train_sets.append((x_train, y_train))
        if cfg.clustering.per_patch:
            confusions.append(
                accumulate_confusion(_patch_truths(pm, truths), pm.probs.argmax(axis=1), n_classes)
            )
        else:
            majority_map = _majority_decisions(pm)
            confusions.append(
                accumulate_confusion(
                    [truths[s] for s in majority_map],
                    [majority_map[s] for s in majority_map],
                    n_classes,
                )
            )
        if out is not None:
            (out / "checkpoints").mkdir(exist_ok=True)
            save_model(result.params, out / "checkpoints" / f"base_fold{f}.npz")

    try:
        confusion = average_confusions(confusions)
        partition = spectral_cluster(
            build_affinity(confusion, cfg.clustering.knn_k),
            cfg.clustering.n_categories,
            seeds["cluster"],
        )
    except Exception as e:
        raise StageError("cluster", e) from e

    folds = []
    for f in range(n_folds):
        x_train, y_train = train_sets[f]
        supers = []
        for cat in partition.categories:
            tag = f"train_super/{f}/{cat.id}"
            seeds[tag] = stage_seed(cfg.seed, tag)
            init_seed = stage_seed(cfg.seed, f"init_super/{f}/{cat.id}")
            seeds[f"init_super/{f}/{cat.id}"] = init_seed
            y_rel = relabel_for_super(y_train, cat, n_classes)
            init = init_super_from_base(base_params[f], cat.task_classes, init_seed)
            try:
                result = train(
                    x_train,
                    y_rel,
                    cat.task_classes,
                    classifier_cfg.train_config(seeds[tag]),
                    init=init,
                )
            except Exception as e:
                raise StageError(tag, e) from e
            supers.append(
                PredictionMatrix(
                    keys=base_preds[f].keys,
                    probs=predict(result.params, test_stacks[f]),
                )
            )
            if out is not None:
                save_model(result.params, out / "checkpoints" / f"super{cat.id}_fold{f}.npz")
        try:
            fold_result, decisions = _fold_result(
                f, base_preds[f], supers, partition, cfg.punishment, fold_truths[f], n_classes
            )
        except Exception as e:
            raise StageError(f"vote/{f}", e) from e
        folds.append(fold_result)
        if out is not None:
            write_decisions(decisions, out / f"decisions_fold{f}.csv", fold_truths[f])

    partition_names = _partition_names(partition, catalog)
    report = Report(
        config=cfg.raw,
        stage_seeds=seeds,
        class_names=catalog.names,
        partition=partition_names,
        clustered_partition=partition_names,
        partition_recovered=None,
        folds=tuple(folds),
        mean_majority_accuracy=float(np.mean([f.majority_accuracy for f in folds])),
        mean_punishment_accuracy=float(np.mean([f.punishment_accuracy for f in folds])),
    )
    if out is not None:
        write_confusion(confusion, catalog, out / "confusion.csv")
        _write_partition_file(report.partition, out / "partition.txt")
    return report


def _write_patch_index(patch_map, manifest: DatasetManifest, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    catalog = manifest.catalog
    lines = ["segment_id,channel,patch_index,class_name"]
    for entry in manifest.entries:
        for patch in patch_map[entry.segment_id]:
            lines.append(
                f"{patch.segment_id},{patch.channel_index},{patch.patch_index},"
                f"{catalog.names[entry.class_index]}"
            )
    path.write_text("\n".join(lines) + "\n")


def _write_partition_file(partition_names, path: Path) -> None:
    lines = [f"{name}: {', '.join(members)}" for name, members in partition_names]
    Path(path).write_text("\n".join(lines) + "\n")


def run_pipeline(cfg: ExperimentConfig, write_artifacts: bool = True) -> Report:
    """Execute the full flowchart and return (and optionally emit) the report.

    Artifacts land under ``cfg.out_dir``: the confusion matrix, the partition,
    per-fold decisions, checkpoints in real mode, and the report files.
    """
    out = None
    if write_artifacts:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
    report = _run_synthetic(cfg, out) if cfg.mode == "synthetic" else _run_real(cfg, out)
    if out is not None:
        emit_report(report, out)
    return report


def emit_report(report: Report, out_dir) -> None:
    """Write ``report.json`` and the per-scene comparison table.

    Output is byte-stable: keys are sorted and no timestamps are embedded, so
    rerunning an identical configuration reproduces identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"
    )
    lines = ["scene,majority_recall,punishment_recall"]
    n_classes = len(report.class_names)
    for c in range(n_classes):
        maj = float(np.mean([f.per_class_recall_majority[c] for f in report.folds]))
        pun = float(np.mean([f.per_class_recall_punishment[c] for f in report.folds]))
        lines.append(f"{report.class_names[c]},{maj!r},{pun!r}")
    lines.append(
        f"__overall__,{report.mean_majority_accuracy!r},{report.mean_punishment_accuracy!r}"
    )
    (out / "comparison.csv").write_text("\n".join(lines) + "\n")


def read_report(path) -> Report:
    """Parse a report.json (or a run directory containing one) back into a Report."""
    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    with open(p) as f:
        return Report.from_dict(json.load(f))
