"""Command-line surface: exit codes, artifacts, and reproducibility.

Every command runs in-process through cli.main so exit codes and stdout
are observable without subprocesses. A single tiny dataset and trained
checkpoint are shared across the module.
"""

import json
import os

import numpy as np
import pytest

import finfusion.cli as cli
import finfusion.metrics as mx

TINY = {
    "synthetic.n_steps": 170,
    "synthetic.n_assets": 2,
    "synthetic.n_institutions": 4,
    "model.d_model": 8,
    "model.n_heads": 2,
    "model.n_layers": 1,
    "model.d_ff": 16,
    "model.vocab_size": 132,
    "model.macro_group_dim": 4,
    "model.macro_hidden": 8,
    "model.graph_layers": 1,
    "model.mdn_components": 2,
    "model.risk_gat_layers": 1,
    "training.seeds": [0],
    "training.warmup_steps": 2,
    "training.episodes_per_epoch": 2,
    "rl.episode_length": 8,
    "stages.unimodal_pretrain": 1,
    "stages.multimodal_align": 1,
    "stages.joint_multitask": 1,
    "stages.rl_finetune": 1,
}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    data_dir = root / "data"
    assert cli.main(["generate", "--config", str(cfg),
                     "--out", str(data_dir)]) == 0
    data = data_dir / "dataset.jsonl"
    run_dir = root / "run"
    assert cli.main(["train", "--config", str(cfg), "--data", str(data),
                     "--out", str(run_dir)]) == 0
    return {
        "root": root,
        "cfg": str(cfg),
        "data": str(data),
        "data_dir": data_dir,
        "run": run_dir,
        "ckpt": str(run_dir / "seed_0" / "checkpoint.bin"),
    }


# ---------------------------------------------------------------------------
# generate

def test_generate_artifacts_and_manifest(work):
    manifest = json.loads((work["data_dir"] / "manifest.json").read_text())
    assert manifest["n_assets"] == 2
    assert manifest["n_steps"] == 170
    assert manifest["n_step_records"] == 170 * 2
    assert manifest["n_graph_records"] == 170
    assert len(manifest["config_hash"]) == 64
    echoed = json.loads((work["data_dir"] / "config.json").read_text())
    assert echoed["synthetic.n_steps"] == 170


def test_generate_is_byte_reproducible(work, tmp_path):
    out2 = tmp_path / "data2"
    assert cli.main(["generate", "--config", work["cfg"],
                     "--out", str(out2)]) == 0
    a = (work["data_dir"] / "dataset.jsonl").read_bytes()
    b = (out2 / "dataset.jsonl").read_bytes()
    assert a == b
    m1 = json.loads((work["data_dir"] / "manifest.json").read_text())
    m2 = json.loads((out2 / "manifest.json").read_text())
    assert m1["config_hash"] == m2["config_hash"]


def test_generate_rejects_bad_config(tmp_path, capsys):
    rc = cli.main(["generate", "--config", "/nonexistent.json",
                   "--out", str(tmp_path / "x")])
    assert rc == 3
    rc = cli.main(["generate", "--set", "synthetic.crisis_rate=1.5",
                   "--out", str(tmp_path / "y")])
    assert rc == 2
    assert "crisis_rate" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train

def test_train_artifacts(work):
    seed_dir = work["run"] / "seed_0"
    assert (seed_dir / "checkpoint.bin").exists()
    for i, stage in enumerate(
            ("unimodal-pretrain", "multimodal-align",
             "joint-multitask", "rl-finetune")):
        assert (seed_dir / f"stage_{i}_{stage}.bin").exists()
    reports = json.loads((seed_dir / "reports.json").read_text())
    assert [r["stage"] for r in reports] == [
        "unimodal-pretrain", "multimodal-align",
        "joint-multitask", "rl-finetune"]
    assert all(r["epochs"] == 1 for r in reports)


def test_train_missing_dataset_is_io_error(work, tmp_path, capsys):
    rc = cli.main(["train", "--config", work["cfg"],
                   "--data", str(tmp_path / "missing.jsonl"),
                   "--out", str(tmp_path / "out")])
    assert rc == 3
    assert "error:" in capsys.readouterr().err


def test_train_vocab_too_small_is_config_error(work, tmp_path, capsys):
    rc = cli.main(["train", "--config", work["cfg"],
                   "--set", "model.vocab_size=8",
                   "--data", work["data"], "--out", str(tmp_path / "out")])
    assert rc == 2
    assert "vocab_size" in capsys.readouterr().err


def test_train_is_reproducible(work, tmp_path):
    out2 = tmp_path / "run2"
    assert cli.main(["train", "--config", work["cfg"], "--data", work["data"],
                     "--out", str(out2)]) == 0
    a = (work["run"] / "seed_0" / "checkpoint.bin").read_bytes()
    b = (out2 / "seed_0" / "checkpoint.bin").read_bytes()
    assert a == b
    ra = (work["run"] / "seed_0" / "reports.json").read_bytes()
    rb = (out2 / "seed_0" / "reports.json").read_bytes()
    assert ra == rb


def test_train_resume_matches_uninterrupted(work, tmp_path, capsys):
    out2 = tmp_path / "resumed"
    seed_dir = out2 / "seed_0"
    os.makedirs(seed_dir)
    # plant the first two stage checkpoints from the reference run, as if
    # the job had died before joint-multitask
    for i, stage in enumerate(("unimodal-pretrain", "multimodal-align")):
        name = f"stage_{i}_{stage}.bin"
        (seed_dir / name).write_bytes(
            (work["run"] / "seed_0" / name).read_bytes())
    rc = cli.main(["train", "--config", work["cfg"], "--data", work["data"],
                   "--out", str(out2), "--resume"])
    assert rc == 0
    assert "resumed after multimodal-align" in capsys.readouterr().out
    a = (work["run"] / "seed_0" / "checkpoint.bin").read_bytes()
    b = (seed_dir / "checkpoint.bin").read_bytes()
    assert a == b


def test_train_divergence_is_numerical_error(work, tmp_path, capsys):
    rc = cli.main(["train", "--config", work["cfg"],
                   "--set", "training.peak_lr=1e12",
                   "--set", "training.warmup_steps=0",
                   "--data", work["data"], "--out", str(tmp_path / "out")])
    assert rc == 4
    assert "diverged" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# eval

def test_eval_prints_tables_and_writes_report(work, tmp_path, capsys):
    out = tmp_path / "evalout"
    rc = cli.main(["eval", "--checkpoint", work["ckpt"], "--data", work["data"],
                   "--split", "test", "--out", str(out)])
    assert rc == 0
    text = capsys.readouterr().out
    assert "forecasting (test)" in text
    assert "Directional Accuracy" in text
    assert "(seeds: 1)" in text
    assert (out / "report.txt").read_text() == text
    report = mx.EvalReport.from_json((out / "report.json").read_text())
    assert report.n_seeds == 1
    # the table quotes the same numbers the JSON stores
    acc = report.metrics["micro.directional_accuracy"]
    assert mx.format_metric("micro.directional_accuracy", acc) in text


def test_eval_aggregates_multiple_checkpoints(work, capsys):
    rc = cli.main(["eval", "--checkpoint", work["ckpt"],
                   "--checkpoint", work["ckpt"],
                   "--data", work["data"], "--split", "val"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "(seeds: 2)" in out
    # identical seeds: spread collapses to exactly zero
    assert "+/- 0.0" in out


def test_eval_corrupt_checkpoint_is_schema_error(work, tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    raw = bytearray((work["run"] / "seed_0" / "checkpoint.bin").read_bytes())
    raw[:4] = b"XXXX"
    bad.write_bytes(bytes(raw))
    rc = cli.main(["eval", "--checkpoint", str(bad), "--data", work["data"]])
    assert rc == 5
    assert "error:" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# forecast

def test_forecast_payload(work, capsys):
    rc = cli.main(["forecast", "--checkpoint", work["ckpt"],
                   "--data", work["data"], "--asset", "0", "--date", "100"])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out)
    probs = payload["direction_probs"]
    assert abs(probs["down"] + probs["flat"] + probs["up"] - 1.0) < 1e-9
    q = payload["quantiles"]
    assert q["0.1"] <= q["0.5"] <= q["0.9"]
    assert len(payload["mixture"]) == 2
    assert abs(sum(c["weight"] for c in payload["mixture"]) - 1.0) < 1e-9


def test_forecast_bad_coordinates(work, capsys):
    rc = cli.main(["forecast", "--checkpoint", work["ckpt"],
                   "--data", work["data"], "--asset", "9", "--date", "100"])
    assert rc == 2
    rc = cli.main(["forecast", "--checkpoint", work["ckpt"],
                   "--data", work["data"], "--asset", "0", "--date", "5"])
    assert rc == 2  # inside the warmup window, no usable features
    capsys.readouterr()


# ---------------------------------------------------------------------------
# report

def test_report_deterministic_text(work, capsys):
    argv = ["report", "--checkpoint", work["ckpt"], "--data", work["data"],
            "--date", "100"]
    assert cli.main(argv) == 0
    first = capsys.readouterr().out
    assert cli.main(argv) == 0
    second = capsys.readouterr().out
    assert first == second
    assert "SYSTEMIC RISK BULLETIN" in first
    assert "risk score:" in first


def test_report_bad_date(work, capsys):
    rc = cli.main(["report", "--checkpoint", work["ckpt"],
                   "--data", work["data"], "--date", "9999"])
    assert rc == 2
    capsys.readouterr()


# ---------------------------------------------------------------------------
# rl-run

def test_rl_run_artifacts_and_determinism(work, tmp_path, capsys):
    argv = ["rl-run", "--config", work["cfg"], "--checkpoint", work["ckpt"],
            "--data", work["data"], "--updates", "3", "--episodes", "2"]
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert cli.main(argv + ["--out", str(out1)]) == 0
    assert cli.main(argv + ["--out", str(out2)]) == 0
    capsys.readouterr()
    s1 = json.loads((out1 / "summary.json").read_text())
    s2 = json.loads((out2 / "summary.json").read_text())
    assert s1 == s2
    assert len(s1["mean_return"]) == 3
    assert s1["r_sys_source"] == "model"
    traces = [json.loads(line)
              for line in (out1 / "traces.jsonl").read_text().splitlines()]
    assert len(traces) == 2
    assert all(len(t["steps"]) == 8 for t in traces)
    assert all(s["position"] in (-1, 0, 1) for s in traces[0]["steps"])


def test_rl_run_seed_flag_changes_outcome(work, tmp_path, capsys):
    argv = ["rl-run", "--config", work["cfg"], "--checkpoint", work["ckpt"],
            "--data", work["data"], "--updates", "2", "--episodes", "2"]
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert cli.main(argv + ["--seed", "1", "--out", str(out1)]) == 0
    assert cli.main(argv + ["--seed", "2", "--out", str(out2)]) == 0
    capsys.readouterr()
    s1 = json.loads((out1 / "summary.json").read_text())
    s2 = json.loads((out2 / "summary.json").read_text())
    assert s1["seed"] == 1 and s2["seed"] == 2
    assert s1["mean_return"] != s2["mean_return"]


# ---------------------------------------------------------------------------
# grad-check

def test_grad_check_passes(capsys):
    assert cli.main(["grad-check"]) == 0
    out = capsys.readouterr().out
    assert "/14 checks passed" in out
    assert "FAIL" not in out


# ---------------------------------------------------------------------------
# parser

def test_unknown_command_exits_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2


def test_missing_required_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["eval", "--data", "x.jsonl"])
    assert exc.value.code == 2
    capsys.readouterr()
