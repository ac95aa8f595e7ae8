import json

import pytest

from mmt_pipeline import build_parser, main

SMALL_RUN = """\
epochs = 1
batch_size = 2
d = 16
h = 4
feature_channels = 16
dropout = 0.0
holdout_fraction = 0.34
seed = 3
"""


def run(argv):
    with pytest.raises(SystemExit) as exit_info:
        main(argv)
    return exit_info.value.code


def error_line(stderr):
    lines = [line for line in stderr.splitlines() if line.startswith("{")]
    assert lines, stderr
    return json.loads(lines[-1])


def test_parser_requires_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])
    args = build_parser().parse_args(["eval", "--ckpt", "c", "--data", "d", "--views", "2"])
    assert (args.command, args.views, args.out) == ("eval", 2, None)


def test_end_to_end(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "run.cfg").write_text(SMALL_RUN, encoding="utf-8")

    assert run(["gen-data", "--n", "6", "--seed", "7", "--out", "data.mmtd"]) == 0
    assert (tmp_path / "data.mmtd").exists()
    assert (tmp_path / "data.mmtd.rig.json").exists()

    assert run(["train", "--config", "run.cfg", "--data", "data.mmtd", "--out", "run"]) == 0
    assert (tmp_path / "run" / "checkpoint.mmtc").exists()
    assert (tmp_path / "run" / "metrics.jsonl").exists()

    capsys.readouterr()
    assert run(["eval", "--ckpt", "run/checkpoint.mmtc", "--data", "data.mmtd"]) == 0
    out = capsys.readouterr().out
    lines = out.splitlines()
    assert lines[0] == "sample,mpjpe,pa_mpjpe,mpve,smooth"
    assert len(lines) == 1 + 6 + 1
    assert lines[-1].startswith("mean,")

    assert run(["eval", "--ckpt", "run/checkpoint.mmtc", "--data", "data.mmtd",
                "--out", "metrics.csv"]) == 0
    assert (tmp_path / "metrics.csv").read_text(encoding="utf-8") == out

    assert run(["export-obj", "--ckpt", "run/checkpoint.mmtc", "--data", "data.mmtd",
                "--index", "1", "--out", "meshes"]) == 0
    assert (tmp_path / "meshes" / "sample_00001_pred.obj").exists()
    assert (tmp_path / "meshes" / "sample_00001_gt.obj").exists()

    capsys.readouterr()
    assert run(["summary"]) == 0
    summary = capsys.readouterr().out
    assert "training_runs: 1 rows" in summary
    assert "evaluations: 12 rows" in summary
    assert (tmp_path / "mmt_results.duckdb").exists()


def test_missing_checkpoint_reports_json(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert run(["eval", "--ckpt", "nope.mmtc", "--data", "nope.mmtd"]) == 1
    error = error_line(capsys.readouterr().err)
    assert error["command"] == "eval"
    assert error["error"] == "FileNotFoundError"


def test_unknown_config_key_fails(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "bad.cfg").write_text("epochs = 1\nlearning_rate = 0.1\n", encoding="utf-8")
    assert run(["gradcheck", "--config", "bad.cfg"]) == 1
    error = error_line(capsys.readouterr().err)
    assert error == {"command": "gradcheck", "error": "ConfigError",
                     "message": "Unknown config key: learning_rate"}


def test_set_overrides_are_validated(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert run(["gen-data", "--n", "1", "--out", "x.mmtd", "--set", "n_views=0"]) == 1
    assert error_line(capsys.readouterr().err)["error"] == "ConfigError"


@pytest.mark.parametrize("argv, message", [
    (["gen-data", "--n", "0", "--out", "x.mmtd"], "n_samples must be at least 1"),
    (["gen-data", "--n", "1", "--out", "x.mmtd", "--set", "n_views=5"],
     "The default rig has at most 4 views"),
])
def test_generator_arguments_report_config_errors(tmp_path, monkeypatch, capsys, argv, message):
    monkeypatch.chdir(tmp_path)
    assert run(argv) == 1
    assert error_line(capsys.readouterr().err) == {
        "command": "gen-data", "error": "ConfigError", "message": message}
    assert not (tmp_path / "x.mmtd").exists()


def test_export_index_past_the_end_reports_json(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert run(["gen-data", "--n", "2", "--out", "data.mmtd"]) == 0
    capsys.readouterr()
    assert run(["export-obj", "--ckpt", "missing.mmtc", "--data", "data.mmtd",
                "--index", "2", "--out", "meshes"]) == 1
    error = error_line(capsys.readouterr().err)
    assert error["command"] == "export-obj"
    assert error["error"] == "SampleOutOfRange"
    assert not (tmp_path / "meshes").exists()


@pytest.mark.parametrize("corrupt", [
    lambda sidecar: "{not json",
    lambda sidecar: json.dumps({**sidecar, "rig": {"master": 0, "views": [
        {**view, "rotation": [[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]}
        for view in sidecar["rig"]["views"]]}}),
    lambda sidecar: json.dumps({key: value for key, value in sidecar.items() if key != "rig"}),
])
def test_corrupt_rig_sidecar_reports_json(tmp_path, monkeypatch, capsys, corrupt):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "run.cfg").write_text(SMALL_RUN, encoding="utf-8")
    assert run(["gen-data", "--n", "2", "--out", "data.mmtd"]) == 0
    sidecar_file = tmp_path / "data.mmtd.rig.json"
    sidecar = json.loads(sidecar_file.read_text(encoding="utf-8"))
    sidecar_file.write_text(corrupt(sidecar), encoding="utf-8")
    capsys.readouterr()
    assert run(["train", "--config", "run.cfg", "--data", "data.mmtd", "--out", "run"]) == 1
    error = error_line(capsys.readouterr().err)
    assert error["command"] == "train"
    assert error["error"] == "DatasetFormatError"
