from __future__ import annotations

import json

import numpy as np

from ascvote.cli import main
from ascvote.clustering import ConfusionMatrix, write_confusion
from ascvote.dataset import read_partition, synthetic_catalog
from ascvote.pipeline import read_report
from ascvote.voting import read_decisions

SIM_SPEC = {
    "n_classes": 6,
    "partition": [[0, 1, 2], [3, 4], [5]],
    "n_segments": 40,
    "patches_per_segment": 8,
    "p_base": 0.7,
    "q": 0.75,
    "p_super": 0.95,
    "dispersion": 4.0,
    "seed": 21,
}


def write_sim_spec(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(SIM_SPEC))
    return path


def test_simulate_then_vote_matches_library(tmp_path):
    spec = write_sim_spec(tmp_path)
    sim_dir = tmp_path / "sim"
    assert main(["simulate", "--spec", str(spec), "--out", str(sim_dir)]) == 0
    for name in ("base_predictions.csv", "super_0_predictions.csv", "super_1_predictions.csv",
                 "super_2_predictions.csv", "partition.txt", "truths.csv"):
        assert (sim_dir / name).exists(), name

    decisions_path = tmp_path / "decisions.csv"
    code = main(
        [
            "vote",
            "--base-preds", str(sim_dir / "base_predictions.csv"),
            "--super-preds",
            str(sim_dir / "super_0_predictions.csv"),
            str(sim_dir / "super_1_predictions.csv"),
            str(sim_dir / "super_2_predictions.csv"),
            "--partition", str(sim_dir / "partition.txt"),
            "--gamma", "0.25",
            "--threshold", "5/8",
            "--out", str(decisions_path),
        ]
    )
    assert code == 0
    decisions, _ = read_decisions(decisions_path)
    assert len(decisions) == 40

    # the file route must agree with the in-memory route
    from ascvote.pipeline import sim_spec_from_dict
    from ascvote.simulate import simulate_classifiers
    from ascvote.voting import vote_dataset

    truths, base, supers = simulate_classifiers(sim_spec_from_dict(SIM_SPEC))
    expected = vote_dataset(base, supers, sim_spec_from_dict(SIM_SPEC).partition)
    assert decisions == expected


def test_vote_rejects_wrong_super_count(tmp_path):
    spec = write_sim_spec(tmp_path)
    sim_dir = tmp_path / "sim"
    main(["simulate", "--spec", str(spec), "--out", str(sim_dir)])
    code = main(
        [
            "vote",
            "--base-preds", str(sim_dir / "base_predictions.csv"),
            "--super-preds", str(sim_dir / "super_0_predictions.csv"),
            "--partition", str(sim_dir / "partition.txt"),
            "--out", str(tmp_path / "d.csv"),
        ]
    )
    assert code == 1


def test_cluster_command(tmp_path):
    rng = np.random.default_rng(0)
    catalog = synthetic_catalog(6)
    counts = rng.uniform(0, 0.3, (6, 6))
    for block in ([0, 1, 2], [3, 4], [5]):
        for i in block:
            for j in block:
                if i != j:
                    counts[i, j] = rng.uniform(5.0, 9.0)
    confusion_path = tmp_path / "confusion.csv"
    write_confusion(ConfusionMatrix(counts=counts), catalog, confusion_path)
    partition_path = tmp_path / "partition.txt"
    code = main(
        ["cluster", "--confusion", str(confusion_path), "--k", "3", "--knn", "2",
         "--seed", "5", "--out", str(partition_path)]
    )
    assert code == 0
    partition, _ = read_partition(partition_path, catalog)
    assert partition.as_sets() == frozenset(
        {frozenset({0, 1, 2}), frozenset({3, 4}), frozenset({5})}
    )


def test_prepare_command(tmp_path, toy_audio_manifest):
    out = tmp_path / "patches"
    code = main(
        ["prepare", "--manifest", str(toy_audio_manifest), "--out", str(out),
         "--fmin", "60", "--bins-per-octave", "12", "--nbins", "48", "--hop", "0.02"]
    )
    assert code == 0
    index = (out / "index.csv").read_text().strip().splitlines()
    assert len(index) == 1 + 12 * 10
    assert len(list(out.glob("*.npy"))) == 12 * 10
    first = np.load(sorted(out.glob("*.npy"))[0])
    assert first.shape == (143, 143)


def test_run_and_report_commands(tmp_path, capsys):
    config = {
        "mode": "synthetic",
        "seed": 13,
        "out_dir": str(tmp_path / "run"),
        "simulation": SIM_SPEC,
        "clustering": {"n_categories": 3, "knn_k": 2},
        "punishment": {"gamma": 0.25, "threshold": "5/8"},
    }
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config))
    assert main(["run", "--config", str(config_path)]) == 0
    report = read_report(tmp_path / "run")
    assert report.config == config
    capsys.readouterr()

    assert main(["report", "--in", str(tmp_path / "run")]) == 0
    printed = capsys.readouterr().out
    assert "__overall__" not in printed  # human table, not the csv
    assert "overall" in printed
    assert "super categories:" in printed
    for name in report.class_names:
        assert name in printed


def test_exit_codes(tmp_path):
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 1
    bad_mode = tmp_path / "bad.json"
    bad_mode.write_text(json.dumps({"mode": "nope", "seed": 0, "out_dir": "x"}))
    assert main(["run", "--config", str(bad_mode)]) == 1
    # validation error: real mode with a manifest that does not exist
    ghost = tmp_path / "ghost.json"
    ghost.write_text(
        json.dumps({"mode": "real", "seed": 0, "out_dir": str(tmp_path / "o"),
                    "manifest": str(tmp_path / "ghost.csv")})
    )
    assert main(["run", "--config", str(ghost)]) == 1
    # stage failure: the manifest exists but cannot be parsed
    (tmp_path / "bad.csv").write_text("wrong,header\n")
    stage_fail = tmp_path / "stage.json"
    stage_fail.write_text(
        json.dumps({"mode": "real", "seed": 0, "out_dir": str(tmp_path / "o"),
                    "manifest": str(tmp_path / "bad.csv")})
    )
    assert main(["run", "--config", str(stage_fail)]) == 2
