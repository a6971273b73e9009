import json

import pytest

from miat.cli import build_parser, default_config, run


def test_synth_twice_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["synth", "--n-per-class", "2", "--seed", "1", "--out-dir", str(a)]) == 0
    assert run(["synth", "--n-per-class", "2", "--seed", "1", "--out-dir", str(b)]) == 0
    assert (a / "dataset.bin").read_bytes() == (b / "dataset.bin").read_bytes()
    stats = json.loads((a / "stats.json").read_text())
    assert sum(v["samples"] for v in stats["splits"].values()) > 0
    echo = json.loads((a / "config.json").read_text())
    assert echo["command"] == "synth" and echo["seed"] == 1 and echo["data"]["n_per_class"] == 2


def test_train_without_dataset_names_field(tmp_path, capsys):
    assert run(["train", "--out-dir", str(tmp_path)]) == 1
    assert "data.dataset" in capsys.readouterr().err


def test_usage_errors_exit_2(tmp_path):
    with pytest.raises(SystemExit) as info:
        run(["frobnicate"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        run(["train", "--no-such-flag", "1"])
    assert info.value.code == 2


def test_every_config_leaf_has_a_flag():
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices["train"]
    flags = {opt for action in sub._actions for opt in action.option_strings}

    def leaves(d, prefix=""):
        for k, v in d.items():
            if isinstance(v, dict):
                yield from leaves(v, f"{prefix}{k}.")
            else:
                yield f"{prefix}{k}"

    for key in leaves(default_config()):
        assert f"--{key}" in flags


def test_bad_override_value_exits_1(tmp_path):
    assert run(["gradcheck", "--model.d_model", "30", "--out-dir", str(tmp_path)]) == 1
    assert run(["synth", "--data.include_kinematics", "maybe", "--out-dir", str(tmp_path)]) == 1


def test_unknown_config_file_field(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"width": 3}}))
    assert run(["gradcheck", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 1


def test_train_eval_dump_and_echo_reproduces(tmp_path):
    data = tmp_path / "data"
    assert run(["synth", "--n-per-class", "1", "--data.n_anchors", "2", "--out-dir", str(data)]) == 0
    common = ["--dataset", str(data / "dataset.bin"), "--model.d_model", "16", "--model.n_heads", "4",
              "--model.ff_dim", "32", "--model.mlp_hidden", "16", "--train.epochs", "2",
              "--train.batch_size", "8", "--loss.lambda", "50", "--loss.warmup_epochs", "1"]
    run_dir = tmp_path / "run"
    assert run(["train", *common, "--out-dir", str(run_dir)]) == 0
    for name in ("config.json", "metrics.csv", "checkpoint.bin", "report.json"):
        assert (run_dir / name).exists()
    echo = json.loads((run_dir / "config.json").read_text())
    assert echo["loss"]["lambda"] == 50.0
    again = tmp_path / "again"
    assert run(["train", "--config", str(run_dir / "config.json"), "--out-dir", str(again)]) == 0
    assert (again / "metrics.csv").read_bytes() == (run_dir / "metrics.csv").read_bytes()

    ev = tmp_path / "eval"
    assert run(["eval", "--dataset", str(data / "dataset.bin"), "--checkpoint", str(run_dir / "checkpoint.bin"),
                "--out-dir", str(ev)]) == 0
    report = json.loads((ev / "report.json").read_text())
    assert "rmse_5s" in report["metrics"]
    assert (ev / "plots" / "rmse_by_lambda.csv").exists()

    dump = tmp_path / "dump"
    assert run(["dump-trajectories", "--dataset", str(data / "dataset.bin"),
                "--checkpoint", str(run_dir / "checkpoint.bin"), "--eval.n_samples", "2",
                "--out-dir", str(dump)]) == 0
    dumped = json.loads((dump / "plots" / "trajectories.json").read_text())
    assert len(dumped) == 2 and len(dumped[0]["modes"]) == 9


def test_ablate_writes_report_and_plot_csv(tmp_path):
    data = tmp_path / "data"
    assert run(["synth", "--n-per-class", "1", "--data.n_anchors", "2", "--out-dir", str(data)]) == 0
    out = tmp_path / "abl"
    assert run(["ablate", "--dataset", str(data / "dataset.bin"), "--eval.lambdas", "[1, 50]",
                "--eval.include_vanilla", "true", "--train.epochs", "1", "--model.d_model", "16",
                "--model.n_heads", "4", "--out-dir", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert set(report["mean_rmse"]) == {"lambda=1", "lambda=50", "vanilla"}
    assert report["deltas_pct"]["lambda=1"] == [0.0] * 5
    lines = (out / "plots" / "rmse_by_lambda.csv").read_text().splitlines()
    assert len(lines) == 1 + 3 * 5


def test_preprocess_csv(tmp_path):
    import io
    from miat.ngsim import write_records_csv
    from miat.synthetic import generate_corpus
    records, _ = generate_corpus(0, 1, n_neighbors=1)
    csv_path = tmp_path / "traj.csv"
    buf = io.StringIO()
    write_records_csv(records, buf)
    csv_path.write_text(buf.getvalue())
    out = tmp_path / "pre"
    assert run(["preprocess", "--data.csv", str(csv_path), "--threads", "2", "--out-dir", str(out)]) == 0
    stats = json.loads((out / "stats.json").read_text())
    assert sum(v["samples"] for v in stats["splits"].values()) > 0
    assert run(["preprocess", "--out-dir", str(out)]) == 1


def test_feature_mismatch_is_a_config_error(tmp_path, capsys):
    data = tmp_path / "d"
    assert run(["synth", "--n-per-class", "1", "--data.include_kinematics", "true", "--out-dir", str(data)]) == 0
    args = ["train", "--dataset", str(data / "dataset.bin"), "--train.epochs", "1", "--out-dir", str(tmp_path / "t")]
    assert run(args) == 1
    assert "model.input_dim=4" in capsys.readouterr().err
