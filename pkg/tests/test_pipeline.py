from __future__ import annotations

import dataclasses
import json

import pytest

from ascvote.clustering import accumulate_confusion, build_affinity, spectral_cluster
from ascvote.dataset import make_partition
from ascvote.pipeline import (
    StageError,
    config_from_dict,
    emit_report,
    evaluate,
    read_report,
    run_pipeline,
    stage_seed,
)
from ascvote.simulate import simulate_classifiers
from ascvote.voting import build_voting_vector, majority_vote


def synthetic_config(out_dir, seed=7, n_segments=120, **sim_overrides):
    sim = {
        "n_classes": 15,
        "partition": [list(range(0, 6)), list(range(6, 11)), list(range(11, 15))],
        "n_segments": n_segments,
        "patches_per_segment": 10,
        "p_base": 0.75,
        "q": 0.8,
        "p_super": 0.95,
        "dispersion": 4.0,
    }
    sim.update(sim_overrides)
    return config_from_dict(
        {
            "mode": "synthetic",
            "seed": seed,
            "out_dir": str(out_dir),
            "simulation": sim,
            "clustering": {"n_categories": 3, "knn_k": 2},
            "punishment": {"gamma": 0.25, "threshold": "5/8"},
        }
    )


def real_config(manifest_path, out_dir, seed=3):
    return config_from_dict(
        {
            "mode": "real",
            "seed": seed,
            "out_dir": str(out_dir),
            "manifest": str(manifest_path),
            "split": 0,
            "cqt": {
                "f_min": 60.0,
                "bins_per_octave": 12,
                "n_bins": 48,
                "hop_seconds": 0.02,
            },
            "classifier": {
                "grid": 4,
                "hidden_width": 16,
                "learning_rate": 0.05,
                "batch_size": 16,
                "max_epochs": 80,
                "patience": 80,
            },
            "clustering": {"n_categories": 2, "knn_k": 1},
            "punishment": {"gamma": 0.25, "threshold": "5/8"},
        }
    )


def test_stage_seed_is_stable_and_distinct():
    assert stage_seed(7, "simulate") == stage_seed(7, "simulate")
    assert stage_seed(7, "simulate") != stage_seed(8, "simulate")
    assert stage_seed(7, "simulate") != stage_seed(7, "cluster")


def test_evaluate_examples():
    assert evaluate({"a": 0, "b": 1}, {"a": 0, "b": 1}, 2).accuracy == 1.0
    result = evaluate({"a": 0, "b": 0}, {"a": 0, "b": 1}, 2)
    assert result.accuracy == 0.5
    assert result.per_class_recall == (1.0, 0.0)
    with pytest.raises(ValueError, match="no decisions"):
        evaluate({}, {}, 2)
    with pytest.raises(ValueError, match="ids do not match"):
        evaluate({"a": 0}, {"b": 0}, 2)


def test_synthetic_pipeline_report(tmp_path):
    cfg = synthetic_config(tmp_path / "run")
    report = run_pipeline(cfg)
    assert len(report.folds) == 1
    fold = report.folds[0]
    assert 0.0 <= fold.majority_accuracy <= 1.0
    assert 0.0 <= fold.punishment_accuracy <= 1.0
    assert fold.n_segments == 120
    assert len(fold.super_patch_accuracies) == 3
    assert len(report.class_names) == 15
    assert report.partition_recovered in (True, False)
    assert report.config == cfg.raw
    # artifacts on disk
    out = tmp_path / "run"
    for name in ("report.json", "comparison.csv", "confusion.csv", "partition.txt", "decisions_fold0.csv"):
        assert (out / name).exists(), name


def test_synthetic_pipeline_super_patch_accuracy_beats_base(tmp_path):
    report = run_pipeline(synthetic_config(tmp_path / "r", seed=5), write_artifacts=False)
    fold = report.folds[0]
    assert min(fold.super_patch_accuracies) > fold.base_patch_accuracy


def test_pipeline_rerun_is_byte_identical(tmp_path):
    cfg = synthetic_config(tmp_path / "run", seed=11)
    run_pipeline(cfg)
    names = ("report.json", "comparison.csv", "confusion.csv", "partition.txt", "decisions_fold0.csv")
    first = {name: (tmp_path / "run" / name).read_bytes() for name in names}
    run_pipeline(synthetic_config(tmp_path / "run", seed=11))
    for name in names:
        assert (tmp_path / "run" / name).read_bytes() == first[name]


def test_report_roundtrip_is_lossless(tmp_path):
    report = run_pipeline(synthetic_config(tmp_path / "run", seed=2), write_artifacts=False)
    emit_report(report, tmp_path / "emitted")
    parsed = read_report(tmp_path / "emitted")
    assert parsed == report
    raw = json.loads((tmp_path / "emitted" / "report.json").read_text())
    assert parsed.to_dict() == raw


def test_comparison_table_shape(tmp_path):
    cfg = synthetic_config(tmp_path / "run", seed=4)
    run_pipeline(cfg)
    lines = (tmp_path / "run" / "comparison.csv").read_text().strip().splitlines()
    assert lines[0] == "scene,majority_recall,punishment_recall"
    assert len(lines) == 1 + 15 + 1
    assert lines[-1].startswith("__overall__,")


def test_cluster_stage_recovers_planted_partition_across_seeds():
    planted = make_partition([set(range(0, 6)), set(range(6, 11)), set(range(11, 15))])
    recovered = 0
    for seed in range(100):
        spec = synthetic_config("unused", seed=seed, n_segments=1500).simulation
        truths, base, _ = simulate_classifiers(dataclasses.replace(spec, seed=seed))
        rows = base.segment_rows()
        decided = {
            seg: majority_vote(build_voting_vector(base.probs[rows[seg]]))
            for seg in base.segment_order()
        }
        confusion = accumulate_confusion(
            [truths[s] for s in decided], [decided[s] for s in decided], 15
        )
        partition = spectral_cluster(build_affinity(confusion, 2), 3, seed)
        recovered += partition.as_sets() == planted.as_sets()
    assert recovered >= 95, f"planted partition recovered in only {recovered}/100 seeds"


def test_real_pipeline_end_to_end(tmp_path, toy_audio_manifest):
    cfg = real_config(toy_audio_manifest, tmp_path / "run")
    report = run_pipeline(cfg)
    assert len(report.folds) == 2
    assert report.partition_recovered is None
    assert len(report.class_names) == 2
    assert report.mean_majority_accuracy >= 0.8
    assert report.mean_punishment_accuracy >= 0.8
    out = tmp_path / "run"
    assert (out / "patch_index.csv").exists()
    assert (out / "checkpoints" / "base_fold0.npz").exists()
    assert (out / "checkpoints" / "super0_fold1.npz").exists()
    assert (out / "decisions_fold1.csv").exists()
    index_lines = (out / "patch_index.csv").read_text().strip().splitlines()
    assert len(index_lines) == 1 + 12 * 10


def test_real_pipeline_is_deterministic(tmp_path, toy_audio_manifest):
    run_pipeline(real_config(toy_audio_manifest, tmp_path / "run"))
    first = (tmp_path / "run" / "report.json").read_bytes()
    run_pipeline(real_config(toy_audio_manifest, tmp_path / "run"))
    assert (tmp_path / "run" / "report.json").read_bytes() == first


def test_malformed_manifest_fails_with_stage_name(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("wrong,header,entirely\nx,y,z\n")
    cfg = config_from_dict(
        {
            "mode": "real",
            "seed": 0,
            "out_dir": str(tmp_path / "x"),
            "manifest": str(bad),
        }
    )
    with pytest.raises(StageError) as err:
        run_pipeline(cfg, write_artifacts=False)
    assert err.value.stage == "load_manifest"


def test_config_validation(tmp_path):
    with pytest.raises(ValueError, match="simulation"):
        config_from_dict({"mode": "synthetic", "seed": 0, "out_dir": "x"})
    with pytest.raises(ValueError, match="manifest"):
        config_from_dict({"mode": "real", "seed": 0, "out_dir": "x"})
    with pytest.raises(ValueError, match="not found"):
        config_from_dict(
            {"mode": "real", "seed": 0, "out_dir": "x", "manifest": str(tmp_path / "ghost.csv")}
        )
    with pytest.raises(ValueError, match="mode"):
        config_from_dict({"mode": "hybrid", "seed": 0, "out_dir": "x"})
