import json
import math

import numpy as np
import pytest

from dgsl import attacks as atk
from dgsl import bench
from dgsl import cli
from dgsl import trainer as tr
from dgsl.config import SEED_ENV, ExperimentConfig, load_config
from dgsl.dyngraph import load_dataset


def rec(scale, seconds, status="ok"):
    return bench.BenchRecord(scale, seconds, 1, "kernelized", 64, 6, status)


# fit ------------------------------------------------------------------------------------------

def test_fit_exact_line():
    r = bench.fit([rec(f, 0.5 + 2.0 * f) for f in (1, 2, 4, 8)])
    assert r.r2 == pytest.approx(1.0)
    assert r.slope == pytest.approx(2.0) and r.intercept == pytest.approx(0.5)


def test_fit_loglog_slope_of_power_laws():
    assert bench.fit([rec(f, 3.0 * f) for f in (1, 2, 4)]).loglog_slope == pytest.approx(1.0)
    assert bench.fit([rec(f, 0.1 * f**2) for f in (1, 2, 4, 8)]).loglog_slope == pytest.approx(2.0)


def test_fit_needs_three_points():
    with pytest.raises(bench.BenchError):
        bench.fit([rec(1, 1.0), rec(2, 2.0), rec(4, math.nan, "budget_exceeded")])


def test_fit_excludes_flagged():
    r = bench.fit([rec(1, 1.0), rec(2, 2.0), rec(3, 3.0), rec(4, math.nan, "budget_exceeded")])
    assert r.n_points == 3 and r.flagged == [4]


@pytest.mark.parametrize(
    "kw", [{"scale_factors": (1, 2)}, {"scale_factors": (1, 4, 2)}, {"axis": "edges"}, {"baseline": "gat"}, {"repeats": 0}, {"budget": 0}]
)
def test_spec_validation(kw):
    with pytest.raises(bench.BenchError):
        bench.BenchSpec(**kw)


# harness ---------------------------------------------------------------------------------------

def test_scaled_problem_shapes():
    base = ExperimentConfig()
    dg, cfg = bench.scaled_problem("length", 3, base)
    assert (dg.n_nodes, dg.T, cfg.train_len) == (64, 14, 12)
    dg, cfg = bench.scaled_problem("nodes", 2, base)
    assert (dg.n_nodes, dg.T, cfg.train_len) == (128, 6, 4)


def test_node_scaling_keeps_degree():
    base = ExperimentConfig()
    deg = [np.mean([s.n_edges for s in bench.scaled_problem("nodes", f, base)[0].snapshots]) / (64 * f) for f in (1, 4)]
    assert deg[1] == pytest.approx(deg[0], rel=0.15)


def test_run_bench_small():
    records, report = bench.run_bench(bench.BenchSpec("length", (1, 2, 3), repeats=1))
    assert [r.status for r in records] == ["ok"] * 3
    assert all(r.seconds > 0 and r.peak_rss_bytes > 0 for r in records)
    assert report.n_points == 3


def test_timed_region_is_the_step_only(monkeypatch):
    calls = []
    monkeypatch.setattr(tr.Trainer, "step", lambda self, epoch: calls.append(epoch) or {})
    assert bench.time_epoch(object.__new__(tr.Trainer), 3, 10.0) > 0
    assert calls == [0, 1, 2, 3]  # one warm-up then the timed repeats


def test_budget_exceeded_skips_larger_scales(monkeypatch):
    monkeypatch.setattr(bench, "time_epoch", lambda trainer, repeats, budget: None if trainer.dg.T > 10 else 0.01)
    with pytest.raises(bench.BenchError, match="flagged"):
        bench.run_bench(bench.BenchSpec("length", (1, 2, 3, 4), repeats=1))
    records = []
    monkeypatch.setattr(bench, "fit", lambda r: None)
    bench.run_bench(bench.BenchSpec("length", (1, 2, 3, 4), repeats=1), log=records.append)
    assert [r.status for r in records] == ["ok", "ok", "budget_exceeded", "skipped"]


def test_csv_round_trip(tmp_path):
    rows = [rec(1.0, 0.25), rec(2.0, math.nan, "budget_exceeded")]
    bench.write_csv(rows, tmp_path / "b.csv")
    back = bench.read_csv(tmp_path / "b.csv")
    assert back[0] == rows[0]
    assert math.isnan(back[1].seconds) and back[1].status == "budget_exceeded"


# CLI ---------------------------------------------------------------------------------------------

@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv(SEED_ENV, raising=False)
    assert cli.main(["generate", "--out", "d.json", "--nodes", "24", "--communities", "3", "--T", "5", "--seed", "1"]) == 0
    cfg = {"hidden_dim": 8, "state_dim": 4, "n_features": 16, "max_epochs": 4, "train_len": 3, "val_len": 1, "test_len": 1}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    return tmp_path


def test_cli_train_writes_readable_artifacts(workspace):
    assert cli.main(["train", "--config", "c.json", "--data", "d.json", "--seed", "7", "--out", "r"]) == 0
    hist = cli.read_metrics(workspace / "r" / "metrics.jsonl")
    assert [h["epoch"] for h in hist] == [1, 2, 3, 4]
    state = tr.load_checkpoint(workspace / "r" / "checkpoint.json")
    assert state.cfg == load_config(workspace / "r" / "config.json")
    assert state.cfg.seed == 7


def test_cli_train_is_deterministic(workspace):
    for out in ("a", "b"):
        assert cli.main(["train", "--config", "c.json", "--data", "d.json", "--seed", "7", "--out", out]) == 0
    assert (workspace / "a" / "metrics.jsonl").read_text() == (workspace / "b" / "metrics.jsonl").read_text()


def test_cli_seed_precedence(workspace, monkeypatch):
    monkeypatch.setenv(SEED_ENV, "5")
    assert cli.resolve_config("c.json").seed == 5
    assert cli.resolve_config("c.json", seed=7).seed == 7
    monkeypatch.delenv(SEED_ENV)
    assert cli.resolve_config("c.json").seed == 0


def test_cli_run_dir_named_by_hash(workspace):
    assert cli.main(["train", "--config", "c.json", "--data", "d.json"]) == 0
    (run,) = (workspace / "runs").iterdir()
    assert run.name.startswith(load_config("c.json").hash() + "-")
    assert {p.name for p in run.iterdir()} >= {"config.json", "metrics.jsonl", "checkpoint.json"}


def test_cli_eval_and_mismatch(workspace, capsys):
    assert cli.main(["train", "--config", "c.json", "--data", "d.json", "--out", "r"]) == 0
    capsys.readouterr()
    assert cli.main(["eval", "--checkpoint", "r/checkpoint.json", "--data", "d.json", "--weights", "w.csv"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert 0 <= out["auc"] <= 1
    assert (workspace / "w.csv").read_text().startswith("layer,t,kind,u,v,weight")
    assert cli.main(["generate", "--out", "other.json", "--nodes", "20", "--T", "5"]) == 0
    assert cli.main(["eval", "--checkpoint", "r/checkpoint.json", "--data", "other.json"]) == 1
    assert "expects N=24" in capsys.readouterr().err


def test_cli_attack_manifest_replays(workspace):
    args = ["attack", "--data", "d.json", "--kind", "feature", "--lambda-attack", "0.5", "--seed", "3"]
    assert cli.main(args + ["--out", "a.json", "--manifest", "m.json"]) == 0
    clean, attacked = load_dataset("d.json"), load_dataset("a.json")
    replay = atk.apply_manifest(clean, atk.Manifest.load("m.json"))
    assert np.array_equal(replay.features(), attacked.features())
    args = ["attack", "--data", "d.json", "--kind", "structure", "--removed-type", "1", "--config", "c.json"]
    assert cli.main(args + ["--out", "s.json", "--manifest", "sm.json"]) == 0
    assert not any(np.any(s.edges[:, 2] == 1) for s in load_dataset("s.json").snapshots[:4])


def test_cli_usage_errors(workspace):
    assert cli.main(["bogus"]) == 2
    assert cli.main(["train", "--data", "d.json", "--nope"]) == 2
    assert cli.main([]) == 2
    assert cli.main(["attack", "--data", "d.json", "--kind", "structure", "--out", "x", "--manifest", "y"]) == 2


def test_cli_domain_errors(workspace):
    (workspace / "bad.json").write_text('{"lamda": 1}')
    assert cli.main(["train", "--config", "bad.json", "--data", "d.json"]) == 1
    assert cli.main(["train", "--data", "missing.json"]) == 1
    assert cli.main(["bench", "--factors", "1,2"]) == 1


def test_cli_bench_outputs(workspace):
    assert cli.main(["bench", "--factors", "1,2,3", "--repeats", "1", "--out", "b"]) == 0
    assert len(bench.read_csv(workspace / "b" / "bench.csv")) == 3
    fit = json.loads((workspace / "b" / "fit.json").read_text())
    assert fit["n_points"] == 3 and fit["spec"]["axis"] == "length"


def test_cli_selfcheck_failure_exit(monkeypatch, capsys):
    from dgsl import checks

    monkeypatch.setattr(checks, "run_all", lambda fast=False: [checks.Check("x", 2.0, 1.0, False)])
    assert cli.main(["selfcheck"]) == 1
    assert "FAIL x" in capsys.readouterr().out
