from __future__ import annotations

import json

import pytest

from randnas.cli import build_parser, main, resolve_config
from randnas.pipeline import COMMANDS

TINY = """
pipeline.trials = 2
train.epochs = 2
stage2.epochs = 2
stage3.seeds = 2
select.num_archs = 6
task.n_train = 48
task.n_val = 24
task.n_test = 24
asha.max_resource = 4
asha.eta = 2
asha.budget_epochs = 16
"""

GENOTYPE = '{"family":"single","n":2,"ops":["tanh","relu","sigmoid","identity"],"cells":[[[0,"relu"],[1,"tanh"]]]}'


@pytest.fixture
def tiny(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def test_space_count(capsys):
    assert main(["space", "count", "--set", "space.num_nodes=8"]) == 0
    assert capsys.readouterr().out.strip() == "2642411520"


def test_space_enumerate_and_sample(capsys):
    assert main(["space", "enumerate"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 32
    assert main(["space", "sample", "-n", "3", "--seed", "4"]) == 0
    first = capsys.readouterr().out
    assert main(["space", "sample", "-n", "3", "--seed", "4"]) == 0
    assert capsys.readouterr().out == first
    assert main(["space", "enumerate", "--set", "space.num_nodes=8"]) == 2


def test_eta_config_error_names_key(tiny, capsys):
    tiny.write_text("asha.eta = 1\n")
    assert main(["asha", "--config", str(tiny)]) == 2
    err = capsys.readouterr().err
    assert "asha.eta" in err and "eta must be ≥ 2" in err


def test_unknown_key_and_bad_usage(capsys):
    assert main(["pipeline", "--set", "train.momentum=0.9"]) == 2
    assert "train.momentum" in capsys.readouterr().err
    assert main(["pipeline", "--set", "nonsense"]) == 2
    assert main(["frobnicate"]) == 2


def test_flag_precedence(tiny):
    tiny.write_text("train.lr = 0.2\ntrain.clip = 0.25\n")
    args = build_parser().parse_args(["pipeline", "--config", str(tiny), "--set", "train.lr=0.3", "--seed", "9"])
    cfg = resolve_config(args)
    assert (cfg["train.lr"], cfg["train.clip"], cfg["train.batch_size"], cfg.master_seed) == (0.3, 0.25, 16, 9)


def test_pipeline_twice_identical_manifests_and_reproduce(tiny, capsys):
    assert main(["pipeline", "--config", str(tiny), "--seed", "0", "--out", "a"]) == 0
    assert main(["pipeline", "--config", str(tiny), "--seed", "0", "--out", "b"]) == 0
    assert (tiny.parent / "a/manifest.json").read_bytes() == (tiny.parent / "b/manifest.json").read_bytes()
    capsys.readouterr()
    assert main(["reproduce", "a/manifest.json"]) == 0
    assert "exactly reproducible" in capsys.readouterr().out


def test_reproduce_detects_seed_tampering(tiny, capsys):
    assert main(["pipeline", "--config", str(tiny), "--out", "run"]) == 0
    path = tiny.parent / "run/manifest.json"
    doc = json.loads(path.read_text())
    doc["config"]["seeds.master"] = 3
    path.write_text(json.dumps(doc))
    capsys.readouterr()
    assert main(["reproduce", str(path)]) == 1
    assert "diff: genotype" in capsys.readouterr().out


def test_reproduce_missing_manifest():
    assert main(["reproduce", "does/not/exist.json"]) == 2


def test_never_overwrites_completed_run(tiny):
    assert main(["search-ws", "--config", str(tiny), "--out", "run"]) == 0
    before = (tiny.parent / "run/manifest.json").read_bytes()
    assert main(["search-ws", "--config", str(tiny), "--seed", "5", "--out", "run"]) == 2
    assert (tiny.parent / "run/manifest.json").read_bytes() == before


def test_report_tables(tiny, capsys):
    assert main(["pipeline", "--config", str(tiny), "--out", "run"]) == 0
    capsys.readouterr()
    assert main(["report", "run"]) == 0
    text = capsys.readouterr().out
    assert "Trial 1 | Trial 2 |    Best | Average" in text
    assert "Mean |     Std |    Best" in text
    report = json.loads((tiny.parent / "run/report.json").read_text())["cost"]
    assert report["amortized_seconds_per_arch"] == report["total_search_seconds"] / report["num_archs_evaluated"]
    assert f"/ {report['num_archs_evaluated']} architectures" in text
    assert "verdict: exactly reproducible" in text


def test_report_sweep_table(tiny, capsys):
    assert main(["sweep", "--config", str(tiny), "--setting", "base:", "--setting",
                 "clip:train.clip=0.25", "--out", "sw"]) == 0
    capsys.readouterr()
    assert main(["report", "sw"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split("|")[0].strip() == "Setting"
    assert [ln.split("|")[0].strip() for ln in lines[2:4]] == ["base", "clip"]


def test_report_empty_dir(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["report", str(tmp_path / "empty")]) == 2
    assert main(["report", str(tmp_path / "missing")]) == 2


@pytest.mark.parametrize("command", COMMANDS)
def test_every_command_is_reproducible(tiny, command, capsys):
    extra = {"stage2": ["--arch", GENOTYPE], "stage3": ["--arch", GENOTYPE],
             "sweep": ["--setting", "base:"], "oracle": ["--set", "stage2.epochs=1"]}.get(command, [])
    assert main([command, "--config", str(tiny), "--out", "run", *extra]) == 0
    for name in ("manifest.json", "results.jsonl", "report.json", "report.txt"):
        assert (tiny.parent / "run" / name).is_file()
    assert main(["reproduce", "run"]) == 0, capsys.readouterr().out
