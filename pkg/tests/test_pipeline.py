from __future__ import annotations

import statistics

import pytest

from randnas.config import ConfigError, PipelineConfig, read_config_file
from randnas.numcore import StreamLedger
from randnas.pipeline import (
    amortized_cost,
    execute,
    run_asha_baseline,
    run_given_stage,
    run_pipeline,
    run_stage1,
    run_stage2,
    run_stage3,
    run_sweep,
    search_ws,
    write_outputs,
)
from randnas.reproharness import summarize
from randnas.tasks import make_dataset

TINY = {"pipeline.trials": 3, "train.epochs": 3, "stage2.epochs": 2, "stage3.seeds": 3,
        "select.num_archs": 8, "task.n_train": 64, "task.n_val": 32, "task.n_test": 32,
        "asha.max_resource": 4, "asha.budget_epochs": 24, "asha.eta": 2}


@pytest.fixture(scope="module")
def cfg() -> PipelineConfig:
    return PipelineConfig.default().with_overrides(TINY)


@pytest.fixture(scope="module")
def data(cfg):
    return make_dataset(cfg.task())


# --- stage 1 -----------------------------------------------------------------------


def test_stage1_one_trial(cfg, data):
    out = run_stage1(cfg.space(), data, cfg.with_overrides({"pipeline.trials": 1}), StreamLedger(0))
    assert len(out) == 1


def test_stage1_trials_have_distinct_streams(cfg, data):
    ledger = StreamLedger(cfg.master_seed)
    run_stage1(cfg.space(), data, cfg, ledger)
    samplers = [k for k in ledger.entries if k.endswith("arch-sampler")]
    assert len(samplers) == len(set(samplers)) == cfg["pipeline.trials"]


def test_stage1_rerun_identical(cfg, data):
    a = run_stage1(cfg.space(), data, cfg, StreamLedger(0))
    b = run_stage1(cfg.space(), data, cfg, StreamLedger(0))
    assert [str(r.arch) for r in a] == [str(r.arch) for r in b]


def test_stage1_accounting(cfg, data):
    for r in run_stage1(cfg.space(), data, cfg, StreamLedger(0)):
        assert r.train_log.iterations == r.train_log.sampled_arch_events
        assert r.audit.num_archs == cfg["select.num_archs"]


# --- stage 2 -----------------------------------------------------------------------------


def test_stage2_single_arch(cfg, data):
    arch = run_stage1(cfg.space(), data, cfg, StreamLedger(0))[0].arch
    report, winner, _ = run_stage2([arch], data, cfg, StreamLedger(0))
    assert winner == arch and report.values == [report.best]


def test_stage2_winner_and_permutation_invariance(cfg, data):
    archs = [r.arch for r in run_stage1(cfg.space(), data, cfg.with_overrides({"pipeline.trials": 4}),
                                        StreamLedger(0))]
    report, winner, results = run_stage2(archs, data, cfg, StreamLedger(0))
    assert results[str(winner)][0] == report.best == min(report.values)
    assert report.average == statistics.fmean(report.values)
    for order in ([3, 2, 1, 0], [1, 3, 0, 2]):
        _, w, _ = run_stage2([archs[i] for i in order], data, cfg, StreamLedger(0))
        assert w == winner


def test_stage2_table_layout(cfg, data):
    archs = [r.arch for r in run_stage1(cfg.space(), data, cfg, StreamLedger(0))]
    text = run_stage2(archs, data, cfg, StreamLedger(0))[0].render().splitlines()
    assert [c.strip() for c in text[1].split("|")] == ["Trial 1", "Trial 2", "Trial 3", "Best", "Average"]


# --- stage 3 -------------------------------------------------------------------------------


def test_stage3_single_seed_std_zero(cfg, data):
    arch = run_stage1(cfg.space(), data, cfg, StreamLedger(0))[0].arch
    report = run_stage3(arch, data, cfg.with_overrides({"stage3.seeds": 1}), StreamLedger(0))
    assert report.std == 0.0


def test_stage3_summary_by_hand(cfg, data):
    arch = run_stage1(cfg.space(), data, cfg, StreamLedger(0))[0].arch
    report = run_stage3(arch, data, cfg, StreamLedger(0))
    v = report.values
    mean = sum(v) / len(v)
    assert report.average == pytest.approx(mean, rel=1e-15)
    assert report.std == pytest.approx((sum((x - mean) ** 2 for x in v) / len(v)) ** 0.5, rel=1e-12)
    assert report.best == min(v)
    head = [c.strip() for c in report.render().splitlines()[1].split("|")]
    assert head == ["Seed 1", "Seed 2", "Seed 3", "Mean", "Std", "Best"]


def test_stage3_epochs_mode(cfg, data):
    arch = run_stage1(cfg.space(), data, cfg, StreamLedger(0))[0].arch
    report = run_stage3(arch, data, cfg.with_overrides({"stage3.mode": "epochs"}), StreamLedger(0))
    assert report.labels == ["6 epochs"]


def test_default_stage3_is_ten_seeds():
    assert PipelineConfig.default()["stage3.seeds"] == 10


# --- composite commands ----------------------------------------------------------------------


def test_pipeline_equals_manual_composition(cfg, data):
    out = run_pipeline(cfg, data)
    ledger = StreamLedger(cfg.master_seed)
    s1 = run_stage1(cfg.space(), data, cfg, ledger)
    s2, winner, _ = run_stage2([r.arch for r in s1], data, cfg, ledger)
    s3 = run_stage3(winner, data, cfg, ledger)
    assert out.reports["stage2"]["values"] == s2.values
    assert out.reports["stage3"]["values"] == s3.values
    assert out.genotypes["winner"] == str(winner)
    assert dict(out.ledger.entries) == dict(ledger.entries)


def test_pipeline_manifest_stable(cfg):
    assert run_pipeline(cfg).manifest().text() == run_pipeline(cfg).manifest().text()


def test_ws_cost_counts_sampled_architectures(cfg, data):
    out = search_ws(cfg, data)
    c = out.reports["cost"]
    assert c["num_archs_evaluated"] == cfg["pipeline.trials"] * cfg["select.num_archs"]
    assert c["amortized_seconds_per_arch"] == c["total_search_seconds"] / c["num_archs_evaluated"]


def test_asha_baseline(cfg, data):
    out = run_asha_baseline(cfg, data)
    asha = out.reports["asha"]
    assert asha["best_rung"] == cfg.asha().top_rung
    assert asha["distinct_configs"] > cfg["asha.budget_epochs"] // cfg["asha.max_resource"]
    assert set(out.reports) >= {"stage3", "cost"}
    c = out.reports["cost"]
    assert c["num_archs_evaluated"] == asha["distinct_configs"]
    assert c["amortized_seconds_per_arch"] == c["total_search_seconds"] / c["num_archs_evaluated"]


def test_sweep_rows_follow_input_order(cfg, data):
    settings = [("clip 1.0", {"train.clip": 1.0}), ("clip 0.25", {"train.clip": 0.25})]
    rows, out = run_sweep(cfg, settings, data)
    assert [r.label for r in rows] == ["clip 1.0", "clip 0.25"]
    assert all(len(r.values) == cfg["pipeline.trials"] for r in rows)
    assert rows[0].best == min(rows[0].values)
    assert rows[1].average == summarize(rows[1].values).average
    rows_rev, _ = run_sweep(cfg, settings[::-1], data)
    assert [r.label for r in rows_rev] == ["clip 0.25", "clip 1.0"]


def test_given_stage_commands(cfg):
    winner = execute("pipeline", cfg).genotypes["winner"]
    two = run_given_stage("stage2", cfg.with_overrides({"arch.genotypes": winner}))
    assert two.genotypes["winner"] == winner
    three = run_given_stage("stage3", cfg.with_overrides({"arch.genotypes": winner}))
    assert len(three.reports["stage3"]["values"]) == cfg["stage3.seeds"]
    with pytest.raises(ValueError):
        run_given_stage("stage2", cfg)


def test_oracle_command_ranks_every_architecture(cfg):
    out = execute("oracle", cfg.with_overrides({"stage2.epochs": 1}))
    assert len(out.reports["oracle"]["rows"]) == 32


def test_amortized_cost():
    assert amortized_cost(100.0, 50).amortized_seconds_per_arch == 2.0
    with pytest.raises(ValueError):
        amortized_cost(1.0, 0)


def test_write_outputs_refuses_completed_dir(cfg, tmp_path):
    out = search_ws(cfg)
    target = write_outputs(out, tmp_path / "run")
    before = (target / "manifest.json").read_bytes()
    with pytest.raises(FileExistsError):
        write_outputs(out, target)
    assert (target / "manifest.json").read_bytes() == before
    (tmp_path / "busy").mkdir()
    (tmp_path / "busy" / "notes.txt").write_text("keep")
    with pytest.raises(FileExistsError):
        write_outputs(out, tmp_path / "busy")
    assert sorted(p.name for p in (tmp_path / "busy").iterdir()) == ["notes.txt"]
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".partial")]


# --- configuration --------------------------------------------------------------------------


def test_config_precedence(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# desk\ntrain.lr = 0.2\ntrain.clip = 0.25  # ptb-style\n")
    from_file = read_config_file(path)
    cfg = PipelineConfig.default().with_overrides(from_file).with_overrides({"train.lr": "0.3"})
    assert cfg["train.lr"] == 0.3
    assert cfg["train.clip"] == 0.25
    assert cfg["train.epochs"] == PipelineConfig.default()["train.epochs"]


def test_config_rejections():
    with pytest.raises(ConfigError) as err:
        PipelineConfig.default().with_overrides({"asha.eta": 1})
    assert err.value.key == "asha.eta" and "eta must be ≥ 2" in str(err.value)
    with pytest.raises(ConfigError) as err:
        PipelineConfig.default().with_overrides({"train.momentum": 0.9})
    assert err.value.key == "train.momentum"
    with pytest.raises(ConfigError) as err:
        PipelineConfig.default().with_overrides({"space.ops": "tanh,zero"})
    assert err.value.key == "space.ops"
    with pytest.raises(ConfigError) as err:
        PipelineConfig.default().with_overrides({"stage2.batch_size": 0})
    assert err.value.key == "stage2.batch_size"
    with pytest.raises(ConfigError):
        PipelineConfig.default().with_overrides({"net.proxy_width": 64})


def test_config_flat_round_trip():
    cfg = PipelineConfig.default().with_overrides({"sweep.settings": "a:train.clip=0.25|b:train.lr=0.2"})
    again = PipelineConfig.from_flat(cfg.to_flat())
    assert again.values == cfg.values
    assert cfg["sweep.settings"][1] == {"label": "b", "overrides": {"train.lr": "0.2"}}
