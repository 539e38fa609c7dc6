#!/usr/bin/env python3
"""
End-to-end tests of the memspm command line: every command runs through
main() exactly as the console script would.
"""

import json

import numpy as np
import pandas as pd
import pytest

from main import build_config, build_parser, create_error_response, main, sweep_variants

SMALL_CONFIG = {
    "synthetic": {
        "n_common": 2,
        "n_src_private": 1,
        "n_tgt_private": 1,
        "subclusters_per_class": 2,
        "dim": 4,
        "samples_per_subcluster": 8,
    },
    "memory": {"n_items": 6, "n_subs": 3, "top_k": 3},
    "hidden_width": 8,
    "train": {"epochs": 2, "batch_size": 16},
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL_CONFIG))
    return str(path)


@pytest.fixture
def generated(tmp_path, config_file):
    out = tmp_path / "data"
    assert main(["gen", "--config", config_file, "--seed", "0", "--out", str(out)]) == 0
    return out


def test_flags_override_config_document(config_file):
    args = build_parser().parse_args(
        ["train", "--config", config_file, "--epochs", "5", "--n-subs", "4", "--seed", "9"]
    )
    config = build_config(args)
    assert config.train.epochs == 5
    assert config.memory.n_subs == 4
    assert config.memory.n_items == 6
    assert config.train.seed == 9 and config.synthetic.seed == 9


def test_invalid_scenario_is_rejected(config_file):
    args = build_parser().parse_args(["train", "--config", config_file, "--scenario", "closed"])
    with pytest.raises(ValueError):
        build_config(args)


def test_gen_is_byte_reproducible(tmp_path, config_file):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(["gen", "--config", config_file, "--seed", "3", "--out", str(out)]) == 0
    for name in ("source.mspm", "target.mspm", "gen.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    stats = json.loads((outs[0] / "gen.json").read_text())["stats"]
    assert stats["self_check_passed"]
    assert (outs[0] / "resolved_config.json").exists()
    assert (outs[0] / "config_report.json").exists()


@pytest.mark.slow
def test_train_eval_inspect_flow(tmp_path, config_file, generated):
    src, tgt = str(generated / "source.mspm"), str(generated / "target.mspm")
    run = tmp_path / "run"
    assert main(
        ["train", "--config", config_file, "--source", src, "--target", tgt, "--out", str(run)]
    ) == 0
    history = pd.read_csv(run / "history.csv")
    assert list(history["epoch"]) == [0, 1]
    assert {"ce", "cdd", "reg", "rec", "total", "lr"} <= set(history.columns)

    ckpt = str(run / "checkpoint.mspc")
    ev = tmp_path / "eval"
    assert main(
        ["eval", "--config", config_file, "--source", src, "--target", tgt,
         "--checkpoint", ckpt, "--out", str(ev)]
    ) == 0
    metrics = json.loads((ev / "metrics.json").read_text())
    assert 0.0 <= metrics["h_score"] <= 1.0
    assert set(metrics["per_class"]) == {"0", "1"}
    predictions = pd.read_csv(ev / "predictions.csv")
    assert len(predictions) == 2 * 2 * 8 + 1 * 2 * 8

    ins = tmp_path / "inspect"
    assert main(
        ["inspect", "--config", config_file, "--checkpoint", ckpt, "--data", src, "--out", str(ins)]
    ) == 0
    report = json.loads((ins / "inspect.json").read_text())
    assert report["n_samples"] == 3 * 2 * 8
    assert (ins / "usage.csv").exists()


@pytest.mark.slow
def test_partial_set_eval_omits_h_score(tmp_path, config_file, generated):
    src, tgt = str(generated / "source.mspm"), str(generated / "target.mspm")
    run = tmp_path / "run"
    common = ["--config", config_file, "--scenario", "PDA", "--source", src, "--target", tgt]
    assert main(["train", *common, "--epochs", "1", "--out", str(run)]) == 0
    ev = tmp_path / "eval"
    assert main(["eval", *common, "--checkpoint", str(run / "checkpoint.mspc"), "--out", str(ev)]) == 0
    metrics = json.loads((ev / "metrics.json").read_text())
    assert "h_score" not in metrics and "unk" not in metrics
    assert "pda_accuracy" in metrics


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--draws", "2", "--out", str(tmp_path / "ok")]) == 0
    assert "mem.items" in capsys.readouterr().out
    report = json.loads((tmp_path / "ok" / "gradcheck.json").read_text())
    assert report["passed"]


def test_gradcheck_command_fails_on_corrupted_gradient(tmp_path):
    out = tmp_path / "bad"
    code = main(["gradcheck", "--draws", "1", "--corrupt-group", "mem.items", "--out", str(out)])
    assert code == 2
    report = json.loads((out / "gradcheck.json").read_text())
    assert report["offending"] == "mem.items"


def test_missing_input_reports_error_json(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path / "run")]) == 1
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"]
    assert error["type"] == "ContractViolation"
    assert "--source" in error["message"]
    assert error["context"] == "train command"


@pytest.mark.slow
def test_sweep_reports_means_per_variant(tmp_path, config_file):
    document = dict(SMALL_CONFIG, sweep={"seeds": [0, 1], "n_subs_values": [2, 3]})
    document["train"] = {"epochs": 1, "batch_size": 16}
    path = tmp_path / "sweep.json"
    path.write_text(json.dumps(document))
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(path), "--out", str(out)]) == 0
    frame = pd.read_csv(out / "sweep.csv", dtype={"seed": str})
    assert set(frame["variant"]) == {"memspm_s2", "memspm_s3", "baseline"}
    assert len(frame) == 3 * 2 + 3
    assert (frame["seed"] == "mean").sum() == 3
    summary = json.loads((out / "sweep.json").read_text())
    assert set(summary["means"]) == {"memspm_s2", "memspm_s3", "baseline"}


def test_sweep_variants_cover_ablations(tmp_path):
    document = dict(
        SMALL_CONFIG,
        sweep={"n_subs_values": [1, 3], "n_items_values": [4], "ablations": ["k1", "no_rec"]},
    )
    path = tmp_path / "variants.json"
    path.write_text(json.dumps(document))
    config = build_config(build_parser().parse_args(["sweep", "--config", str(path)]))
    variants = {v.name: v for v in sweep_variants(config)}
    assert list(variants) == ["memspm_s1", "memspm_s3", "memspm_n4", "k1", "no_rec", "baseline"]
    assert variants["k1"].memory_updates == {"top_k": 1}
    assert variants["baseline"].memory_updates == {"use_memory": False}
    train_cfg = variants["no_rec"].train_config(config, seed=5)
    assert train_cfg.seed == 5
    assert train_cfg.loss_weights.lambda3 == 0.0
    assert train_cfg.loss_weights.lambda1 == config.train.loss_weights.lambda1
    assert config.train.loss_weights.lambda3 == 0.5


def test_unknown_ablation_is_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(dict(SMALL_CONFIG, sweep={"ablations": ["no_memory_at_all"]})))
    with pytest.raises(ValueError):
        build_config(build_parser().parse_args(["sweep", "--config", str(path)]))


@pytest.mark.slow
def test_sweep_runs_ablation_variants(tmp_path):
    document = dict(
        SMALL_CONFIG,
        sweep={
            "seeds": [0],
            "include_baseline": False,
            "ablations": ["k1", "fixed_threshold", "no_cdd"],
        },
    )
    document["train"] = {"epochs": 1, "batch_size": 16}
    path = tmp_path / "ablate.json"
    path.write_text(json.dumps(document))
    out = tmp_path / "ablate"
    assert main(["sweep", "--config", str(path), "--out", str(out)]) == 0
    frame = pd.read_csv(out / "sweep.csv", dtype={"seed": str})
    per_seed = frame[frame["seed"] != "mean"]
    assert list(per_seed["variant"]) == ["memspm_s3", "k1", "fixed_threshold", "no_cdd"]
    assert per_seed["h_score"].between(0.0, 1.0).all()


@pytest.mark.slow
def test_inspect_accepts_unlabeled_csv(tmp_path, config_file, generated):
    src, tgt = str(generated / "source.mspm"), str(generated / "target.mspm")
    run = tmp_path / "run"
    assert main(
        ["train", "--config", config_file, "--source", src, "--target", tgt,
         "--epochs", "1", "--out", str(run)]
    ) == 0
    rows = np.random.default_rng(0).normal(size=(12, 4))
    frame = pd.DataFrame(rows, columns=[f"f{i}" for i in range(4)])
    frame.insert(0, "label", -1)
    data = tmp_path / "unlabeled.csv"
    frame.to_csv(data, index=False)

    ins = tmp_path / "inspect"
    assert main(
        ["inspect", "--config", config_file, "--checkpoint", str(run / "checkpoint.mspc"),
         "--data", str(data), "--out", str(ins)]
    ) == 0
    report = json.loads((ins / "inspect.json").read_text())
    assert report["n_samples"] == 12
    assert report["mean_ari"] is None
    usage = pd.read_csv(ins / "usage.csv")
    assert usage["usage_count"].sum() == 12
    assert usage["mean_assigned_label"].isna().all()


def test_error_response_document():
    document = create_error_response(KeyError("n_subs"), "sweep command")
    assert document == {
        "error": {"message": "'n_subs'", "type": "KeyError", "context": "sweep command"}
    }
