"""Tests for the Typer CLI wiring in thermotrack.cli.

Most commands run against tiny generated datasets and a reduced encoder so
the whole gen → train → track → eval chain finishes in seconds.
"""

from __future__ import annotations

import json

import pandas as pd
import pytest
from typer.testing import CliRunner

from thermotrack.cli import app
from thermotrack.io.runlog import RunLog

runner = CliRunner()

REDUCED = """\
encoder.channels=8
encoder.layers=2
encoder.heads=2
encoder.patch=4
encoder.template_edge=8
encoder.search_edge=16
encoder.prefix_len=1
encoder.mlp_ratio=2
encoder.vocab_size=64
encoder.head_stages=1
gamma=1.0
"""


def test_cli_module_imports():
    """Importing thermotrack.cli must not raise."""
    import thermotrack.cli  # noqa: F401


@pytest.mark.parametrize("command", ["gen", "train", "track", "eval", "selftest", "config"])
def test_command_help(command):
    """Every command registers and renders its help."""
    result = runner.invoke(app, [command, "--help"])
    assert result.exit_code == 0, result.output


def test_gen_is_reproducible(tmp_path):
    """Same seed, same bytes on disk."""
    args = ["gen", "-s", "3", "-n", "3", "--edge", "48", "-c", "2"]
    for name in ("a", "b"):
        result = runner.invoke(app, [*args, "-o", str(tmp_path / name)])
        assert result.exit_code == 0, result.output
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.*"))
    assert len(files) == 2 * (2 * 3 + 2)
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_gen_seed_from_environment(tmp_path, monkeypatch):
    args = ["gen", "-n", "2", "--edge", "48"]
    assert runner.invoke(app, [*args, "-s", "7", "-o", str(tmp_path / "flag")]).exit_code == 0
    monkeypatch.setenv("THERMOTRACK_SEED", "7")
    assert runner.invoke(app, [*args, "-o", str(tmp_path / "env")]).exit_code == 0
    for path in sorted((tmp_path / "flag").rglob("*.*")):
        rel = path.relative_to(tmp_path / "flag")
        assert (tmp_path / "env" / rel).read_bytes() == path.read_bytes()


def test_gen_bad_environment_seed(tmp_path, monkeypatch):
    monkeypatch.setenv("THERMOTRACK_SEED", "seven")
    assert runner.invoke(app, ["gen", "-n", "2", "-o", str(tmp_path)]).exit_code == 2


def test_gen_rejects_short_sequences(tmp_path):
    result = runner.invoke(app, ["gen", "-n", "1", "-o", str(tmp_path)])
    assert result.exit_code == 2


def test_track_needs_checkpoint(tmp_path):
    result = runner.invoke(app, ["track", "-d", str(tmp_path)])
    assert result.exit_code == 2


def test_track_missing_checkpoint_file(tmp_path):
    result = runner.invoke(app, ["track", "-k", str(tmp_path / "none.npz")])
    assert result.exit_code == 2


def test_eval_perfect_log(tmp_path):
    """A log whose predictions equal the ground truth scores PR 1 and SR 20/21."""
    boxes = [[0.0, 0.0, 10.0, 10.0], [4.0, 2.0, 10.0, 10.0]]
    log = RunLog(
        header={"sequence": "perfect"},
        frames=[{"frame": t, "pred": b, "gt": b, "gt_alt": None} for t, b in enumerate(boxes)],
    )
    path = log.write(tmp_path / "perfect.jsonl")
    csv = tmp_path / "summary.csv"
    curves = tmp_path / "curves.csv"
    result = runner.invoke(app, ["eval", str(path), "--csv", str(csv), "--curves", str(curves)])
    assert result.exit_code == 0, result.output
    rows = pd.read_csv(csv).set_index("metric")["value"]
    assert rows["PR"] == 1.0
    assert rows["NPR"] == 1.0
    assert rows["SR"] == pytest.approx(20 / 21)
    assert rows["MSR"] == pytest.approx(20 / 21)
    assert set(pd.read_csv(curves)["run"]) == {"perfect"}


def test_eval_missing_log(tmp_path):
    result = runner.invoke(app, ["eval", str(tmp_path / "missing.jsonl")])
    assert result.exit_code == 2


def test_config_show():
    result = runner.invoke(app, ["config", "--show"])
    assert result.exit_code == 0, result.output
    cfg = json.loads(result.stdout)
    assert cfg["gamma"] == 0.85
    assert cfg["encoder"]["fusion_layers"] == [2, 4, 6, 8]


def test_config_file_and_env(tmp_path, monkeypatch):
    path = tmp_path / "desk.cfg"
    path.write_text("gamma=0.7\nencoder.layers=4\n")
    monkeypatch.setenv("THERMOTRACK_SEED", "11")
    result = runner.invoke(app, ["config", "-f", str(path)])
    assert result.exit_code == 0, result.output
    cfg = json.loads(result.stdout)
    assert (cfg["gamma"], cfg["seed"]) == (0.7, 11)
    assert cfg["encoder"]["fusion_layers"] == [1, 2, 3, 4]


def test_config_invalid_value(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("gamma=0\n")
    assert runner.invoke(app, ["config", "-f", str(path)]).exit_code == 2


def test_selftest_single_suite():
    result = runner.invoke(app, ["selftest", "--suite", "losses"])
    assert result.exit_code == 0, result.output


def test_selftest_unknown_suite():
    assert runner.invoke(app, ["selftest", "--suite", "nope"]).exit_code == 2


def test_gen_train_track_eval(tmp_path):
    """The full command chain on one short sequence with a reduced encoder."""
    data, cfg = tmp_path / "data", tmp_path / "reduced.cfg"
    cfg.write_text(REDUCED)
    model, logs = tmp_path / "model.npz", tmp_path / "logs"

    steps = [
        ["gen", "-o", str(data), "-n", "4", "--edge", "48"],
        ["train", "-d", str(data), "-o", str(model), "--config", str(cfg), "--steps", "2"],
        ["track", "-k", str(model), "-d", str(data), "-o", str(logs)],
    ]
    for args in steps:
        result = runner.invoke(app, args)
        assert result.exit_code == 0, result.output
    assert model.with_suffix(".json").exists()
    assert (tmp_path / "model_train.jsonl").exists()

    run_logs = sorted(logs.glob("*.jsonl"))
    assert [p.name for p in run_logs] == ["seq_000.jsonl"]
    assert len(RunLog.read(run_logs[0]).frames) == 4
    result = runner.invoke(app, ["eval", *map(str, run_logs)])
    assert result.exit_code == 0, result.output
