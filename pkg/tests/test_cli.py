import json
import subprocess
import sys

import pytest

from calibench import cli

TINY = {
    "data": {"height": 8, "width": 8, "n_cells": 3, "n_source": 4, "n_target": 4},
    "arch": {"feature_channels": 6, "disc_channels": [6, 8, 1]},
    "train": {"max_iters": 20, "log_every": 10, "iou_window": 5, "icali_start": 0, "n_eval": 2,
              "checkpoint_every": 10},
    "sim": {"n_worlds": 2, "max_steps": 8},
}


@pytest.fixture()
def tiny(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return str(p)


def run(*argv):
    return cli.dispatch([str(a) for a in argv])


def files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_unknown_key_reports_path(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"train": {"lr_sge": 0.1}}))
    assert run("train", "--config", p, "--out", tmp_path / "o") == cli.EXIT_CONFIG
    assert "train.lr_sge" in capsys.readouterr().err


def test_bad_types_and_values(tmp_path, capsys):
    for body, needle in (({"train": {"max_iters": "many"}}, "train.max_iters"),
                         ({"train": {"interval": 0}}, "interval"),
                         ({"data": {"ratios": [1, 0, 0]}}, "data")):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps(body))
        assert run("train", "--config", p, "--out", tmp_path / "o") == cli.EXIT_CONFIG
        assert needle in capsys.readouterr().err
    p.write_text("{not json")
    assert run("plan", "--config", p, "--out", tmp_path / "o") == cli.EXIT_CONFIG


def test_missing_files_are_io_errors(tmp_path):
    assert run("train", "--config", tmp_path / "nope.json") == cli.EXIT_IO
    assert run("eval", "--checkpoint", tmp_path / "nope.ckpt", "--out", tmp_path / "o") == cli.EXIT_IO
    assert run("report", tmp_path, "--out", tmp_path / "r") == cli.EXIT_IO


def test_numeric_abort_exit_code(tmp_path, tiny, monkeypatch):
    def boom(*a, **k):
        raise cli.trainer.NumericAbort("non-finite seg_loss", 3)
    monkeypatch.setattr(cli.trainer, "run", boom)
    assert run("train", "--config", tiny, "--out", tmp_path / "o") == cli.EXIT_NUMERIC


def test_help_lists_every_key():
    out = subprocess.run([sys.executable, "-m", "calibench.cli", "train", "--help"],
                         capture_output=True, text=True, check=True).stdout
    for key, default in cli._flatten(cli.default_config()):
        assert f"{key} = {json.dumps(default)}" in out


def test_shipped_presets_match_defaults():
    for name in ("mild.json", "hard.json"):
        cfg = cli.load_config(name)
        assert cfg["train"] == cli.default_config()["train"]
    assert cli.load_config("mild.json")["data"] == cli.default_config()["data"]
    hard = cli.load_config("hard.json")["data"]
    assert hard["name"] == "hard-shift" and hard["ratio_weights"] is not None


def test_gen_data_train_eval_report_pipeline(tmp_path, tiny):
    assert run("gen-data", "--config", tiny, "--out", tmp_path / "data") == 0
    assert run("train", "--config", tiny, "--data", tmp_path / "data", "--method", "cali",
               "--out", tmp_path / "runs" / "cali", "--quiet") == 0
    assert run("train", "--config", tiny, "--method", "so", "--out", tmp_path / "runs" / "so", "--quiet") == 0
    for name in ("config.json", "metrics.csv", "summary.json", "final.ckpt", "ckpt_000010.ckpt"):
        assert (tmp_path / "runs" / "cali" / name).exists()
    assert run("eval", "--config", tiny, "--checkpoint", tmp_path / "runs" / "cali" / "final.ckpt",
               "--data", tmp_path / "data", "--out", tmp_path / "ev") == 0
    ev = json.loads((tmp_path / "ev" / "eval.json").read_text())
    summ = json.loads((tmp_path / "runs" / "cali" / "summary.json").read_text())
    assert ev["miou"] == pytest.approx(summ["target_miou"])
    assert run("report", tmp_path / "runs", "--out", tmp_path / "rep") == 0
    table = json.loads((tmp_path / "rep" / "table.json").read_text())
    assert [t["method"] for t in table] == ["so", "cali"]
    assert table[1]["target_miou_mean"] == pytest.approx(summ["target_miou"])
    for png in ("miou_curves.png", "discrepancy_curves.png", "final_miou.png"):
        assert (tmp_path / "rep" / png).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_divergence_identical_preset(tmp_path):
    assert run("divergence", "--preset", "identical", "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "divergence.json").read_text())
    assert rep["estimate"] < 0.15 and rep["holds"] is True
    assert run("divergence", "--preset", "mild-shift", "--out", tmp_path / "m") == 0
    assert json.loads((tmp_path / "m" / "divergence.json").read_text())["estimate"] > rep["estimate"]


def test_plan_and_navigate_outputs(tmp_path, tiny):
    assert run("plan", "--config", tiny, "--out", tmp_path / "p") == 0
    plan = json.loads((tmp_path / "p" / "plan.json").read_text())
    assert 0 <= plan["selected"] < len(plan["costs"])
    for pgm in ("mask.pgm", "edf.pgm", "sedf.pgm"):
        assert (tmp_path / "p" / pgm).read_bytes().startswith(b"P5\n64 48\n65535\n")
    assert run("navigate", "--config", tiny, "--dump", "--out", tmp_path / "n") == 0
    summary = json.loads((tmp_path / "n" / "navigate.json").read_text())
    assert summary["episodes"] == 2
    assert len(list((tmp_path / "n" / "episodes").glob("*.json"))) == 2
    assert list((tmp_path / "n" / "dump").rglob("sedf_*.pgm"))


@pytest.mark.parametrize("argv", [
    ["gen-data"], ["train", "--method", "icali", "--quiet"], ["divergence", "--preset", "hard-shift"],
    ["plan"], ["navigate", "--suite", "gap"],
])
def test_subcommands_byte_identical(tmp_path, tiny, argv):
    outs = []
    for k in range(2):
        d = tmp_path / f"r{k}"
        assert run(*argv, "--config", tiny, "--seed", 5, "--out", d) == 0
        outs.append(files(d))
    assert outs[0] == outs[1]
