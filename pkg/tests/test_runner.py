from __future__ import annotations

import json

import pytest

from idealrec.cli import main
from idealrec.runner import ConfigError, ExperimentConfig, StageError, run, validate

TINY = {
    "drift.users": "24", "drift.items": "40", "drift.length": "24", "test.ratio": "9",
    "model.dim": "8", "train.epochs": "2", "mrd.epochs": "1", "dm.epochs": "1", "dm.latent": "8",
    "dm.samples": "3", "policy.lof_reference": "200", "sweep.budgets": "0,0.5,1",
    "policy.list": "always,never,random,ideal,ideal-cl-mu,lof,svdd",
}


def tiny(out, **extra) -> ExperimentConfig:
    return ExperimentConfig.parse("", {**TINY, "out": str(out), **extra})


def test_defaults_validate():
    assert validate(ExperimentConfig()) == []


@pytest.mark.parametrize("key,value,field", [
    ("sweep.budgets", "0,1.5", "sweep.budgets"),
    ("dm.samples", "0", "dm.samples"),
    ("policy.list", "always,psychic", "policy.list"),
    ("sweep.seeds", "", "sweep.seeds"),
    ("sweep.budgets", "0.5,0.1", "sweep.budgets"),
    ("dm.beta", "-1", "dm.beta"),
    ("policy.mrs_score", "gain", "policy.mrs_score"),
])
def test_diagnostics_name_the_field(key, value, field):
    diags = validate(ExperimentConfig.parse("", {key: value}))
    assert diags and any(d.startswith(field) for d in diags)


def test_budget_out_of_range_message():
    assert any("out of [0,1]" in d for d in validate(ExperimentConfig.parse("", {"sweep.budgets": "1.5"})))


def test_mu_strategy_needs_trained_detector():
    cfg = ExperimentConfig.parse("", {"policy.list": "ideal-cl-mu", "mrd.epochs": "0"})
    assert any(d.startswith("mrd.epochs") for d in validate(cfg))
    assert validate(ExperimentConfig.parse("", {"policy.list": "ideal-cl-nu", "mrd.epochs": "0",
                                                "revenue.policy": "ideal-cl-nu"})) == []


def test_parse_rejects_unknown_keys_and_bad_values():
    with pytest.raises(ConfigError, match="unknown config key"):
        ExperimentConfig.parse("model.width = 3")
    with pytest.raises(ConfigError, match="model.dim"):
        ExperimentConfig.parse("model.dim = wide")
    with pytest.raises(ConfigError, match="line 2"):
        ExperimentConfig.parse("model.dim = 4\nnonsense\n")


def test_dump_parse_round_trip():
    cfg = ExperimentConfig.parse("# comment\nmodel.dim = 12  # trailing\nsweep.budgets = 0, 0.25, 1\n")
    assert cfg.model_dim == 12 and cfg.sweep_budgets == (0.0, 0.25, 1.0)
    again = ExperimentConfig.parse(cfg.dump())
    assert again == cfg and again.digest() == cfg.digest()


@pytest.fixture(scope="module")
def tiny_runs(tmp_path_factory):
    a, b = tmp_path_factory.mktemp("a"), tmp_path_factory.mktemp("b")
    return (a, run(tiny(a))), (b, run(tiny(b)))


def test_run_writes_every_artifact_kind(tiny_runs):
    (out, manifest), _ = tiny_runs
    seed_dir = out / "seed-0"
    assert (seed_dir / "bundle.ckpt").exists() and (seed_dir / "mrd_base.ckpt").exists()
    for name in ("mrd_dataset.tsv", "steps.tsv", "revenue.csv"):
        assert (seed_dir / name).stat().st_size > 0
    assert (out / "curves.csv").read_text().startswith("policy,backbone,budget")
    on_disk = json.loads((out / "manifest.json").read_text())
    assert on_disk == manifest
    assert manifest["status"] == "complete" and manifest["seeds"] == [0]
    assert manifest["config_sha256"] == tiny(out).digest()
    assert {"bundle.ckpt", "mrd_base.ckpt"} <= set(manifest["components"]["0"])


def test_identical_config_reproduces_csvs_byte_for_byte(tiny_runs):
    (a, ma), (b, mb) = tiny_runs
    assert (a / "curves.csv").read_bytes() == (b / "curves.csv").read_bytes()
    for name in ("revenue.csv", "steps.tsv", "mrd_dataset.tsv"):
        assert (a / "seed-0" / name).read_bytes() == (b / "seed-0" / name).read_bytes()
    assert ma["components"] == mb["components"] and ma["artifacts"] == mb["artifacts"]


def test_checksums_change_when_upstream_changes(tiny_runs, tmp_path):
    (_, ma), _ = tiny_runs
    m = run(tiny(tmp_path, **{"train.lr": "0.01"}), "train")
    assert m["components"]["0"]["bundle.ckpt"] != ma["components"]["0"]["bundle.ckpt"]
    same = run(tiny(tmp_path / "s"), "train")
    assert same["components"]["0"]["bundle.ckpt"] == ma["components"]["0"]["bundle.ckpt"]


def test_stage_failure_names_stage_and_marks_incomplete(tmp_path):
    bad = tmp_path / "events.tsv"
    bad.write_text("this is not an interaction log\n")
    cfg = ExperimentConfig.parse("", {**TINY, "data.source": "path", "data.path": str(bad), "out": str(tmp_path)})
    with pytest.raises(StageError) as info:
        run(cfg)
    assert info.value.stage == "data"
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["status"] == "incomplete" and manifest["error"]["stage"] == "data"


def _argv(out, cmd="sweep"):
    sets = [a for k, v in TINY.items() if k not in ("sweep.budgets", "policy.list") for a in ("--set", f"{k}={v}")]
    return [cmd, "--out", str(out), "--budget", "0,1", "--policy", "always,never,ideal", *sets]


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["sweep", "--budget", "1.5", "--check"]) == 2
    assert "sweep.budgets" in capsys.readouterr().err
    assert main(["sweep", "--set", "model.width=3"]) == 2
    assert main(["train", "--check"]) == 0
    bad = tmp_path / "bad.tsv"
    bad.write_text("garbage\n")
    assert main(["train", "--out", str(tmp_path / "x"), "--set", "data.source=path", "--set", f"data.path={bad}"]) == 1
    assert "stage 'data'" in capsys.readouterr().err


def test_cli_subcommands_stop_after_their_stage(tmp_path, capsys):
    assert main(_argv(tmp_path / "t", "build-mrd")) == 0
    assert (tmp_path / "t" / "seed-0" / "mrd_dataset.tsv").exists()
    assert not (tmp_path / "t" / "seed-0" / "mrd_base.ckpt").exists()
    assert not (tmp_path / "t" / "curves.csv").exists()


def test_cli_sweep_and_report(tmp_path, capsys):
    assert main(_argv(tmp_path)) == 0
    capsys.readouterr()
    assert main(["report", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "ideal" in text and "always" in text and "spearman" in text
    assert main(["report", str(tmp_path / "missing.csv")]) == 2
