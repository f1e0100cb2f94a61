import csv
import json
import math

import numpy as np
import pytest

from causal_transfer.bandit import RunResult
from causal_transfer.harness import (PRESETS, StageError, aggregate, cmd_bounds, cmd_cluster,
                                     cmd_example1, cmd_gen_expert, cmd_pipeline, cmd_run,
                                     format_example1, load_config)


def small(tmp_path, preset="two-track", **kw):
    d = dict(PRESETS[preset])
    d.update({"n_trajectories": 40, "trials": 2, "out": str(tmp_path / "out")})
    d["bandit"] = dict(d["bandit"], horizon_episodes=30)
    d.update(kw)
    return load_config(d)


def fake_run(method, returns):
    r = np.asarray(returns, dtype=float)
    return RunResult(method, np.zeros(r.size, int), r, None, None, None, None, None, 0, False, 0)


class TestAggregate:
    def test_hand_values(self):
        agg = aggregate([fake_run("m", [0.0]), fake_run("m", [2.0])])
        assert agg.mean["m"].tolist() == [1.0]
        assert agg.std["m"][0] == pytest.approx(math.sqrt(2.0))

    def test_identical_runs(self):
        agg = aggregate([fake_run("m", [1.0, 2.0])] * 3)
        assert agg.std["m"].tolist() == [0.0, 0.0]

    def test_single_trial_has_zero_std(self):
        agg = aggregate([fake_run("a", [1.0, 5.0]), fake_run("b", [0.0, 0.0])])
        assert agg.std["a"].tolist() == [0.0, 0.0]

    def test_mismatched_horizons(self):
        with pytest.raises(ValueError):
            aggregate([fake_run("m", [0.0]), fake_run("m", [0.0, 1.0])])

    def test_final_quartile_summaries(self):
        agg = aggregate([fake_run("m", [0, 0, 0, 4.0]), fake_run("m", [0, 0, 0, 2.0])])
        assert agg.terminal_mean("m") == 3.0
        assert agg.terminal_std("m") == pytest.approx(math.sqrt(2.0))

    def test_csv_columns(self, tmp_path):
        agg = aggregate([fake_run("a", [1.0]), fake_run("b", [2.0])])
        agg.to_csv(tmp_path / "c.csv")
        header = (tmp_path / "c.csv").read_text().splitlines()[0]
        assert header == "episode,a_mean,a_std,b_mean,b_std"


class TestConfig:
    def test_presets_load(self):
        for name in PRESETS:
            assert load_config(name).trials >= 1

    def test_json_file_with_base_preset(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"preset": "two-track", "trials": 3}))
        cfg = load_config(str(p), master_seed=7)
        assert cfg.trials == 3 and cfg.master_seed == 7 and cfg.n_trajectories == 300

    @pytest.mark.parametrize("bad", [
        {"n_trajectories": 0}, {"trials": 0}, {"bogus": 1}, {"basis": "pixels"},
        {"statistics": "bayes"}, {"bound_rule": "tight"}, {"bandit": {"horizon": 5}},
    ])
    def test_rejections(self, bad):
        d = dict(PRESETS["two-track"])
        d.update(bad)
        with pytest.raises(ValueError):
            load_config(d)

    def test_missing_file(self):
        with pytest.raises(FileNotFoundError):
            load_config("/nonexistent/config.json")


def test_gen_expert_record_count_and_determinism(tmp_path):
    cfg = load_config("two-track", out=str(tmp_path / "a"))
    cmd_gen_expert(cfg)
    first = (tmp_path / "a" / "dataset.jsonl").read_bytes()
    assert len(first.splitlines()) == 300
    cmd_gen_expert(cfg)
    assert (tmp_path / "a" / "dataset.jsonl").read_bytes() == first
    assert not (tmp_path / "a" / "dataset.oracle.jsonl").exists()


def test_example1_pipeline_bounds_file(tmp_path):
    cfg = small(tmp_path, "example1")
    cmd_pipeline(cfg)
    with open(tmp_path / "out" / "bounds.csv", newline="") as fh:
        rows = {(r["rule"], int(r["arm"])): r for r in csv.DictReader(fh)}
    assert float(rows["natural", 0]["l"]) == 5.5 and float(rows["natural", 0]["h"]) == 10.5
    assert float(rows["natural", 1]["l"]) == 2.35 and float(rows["natural", 1]["h"]) == 7.35
    assert float(rows["expert-optimal", 0]["h"]) == float(rows["expert-optimal", 1]["h"]) == 6.85


def test_pipeline_outputs(tmp_path):
    cfg = small(tmp_path, trials=1)
    res = cmd_pipeline(cfg, with_oracle=True)
    out = tmp_path / "out"
    for name in ["dataset.jsonl", "dataset.oracle.jsonl", "labeled.csv", "basis.json",
                 "bounds.csv", "curves.csv", "summary.json"]:
        assert (out / name).exists(), name
    assert len(list((out / "runs").iterdir())) == 3
    assert all(np.all(res["curves"].std[m] == 0) for m in res["curves"].methods)
    assert res["summary"]["oracle"]["ranking_contradicts"] in (True, False)


def test_pipeline_byte_reproducible(tmp_path):
    files = []
    for name in ("a", "b"):
        cfg = small(tmp_path, out=str(tmp_path / name))
        cmd_pipeline(cfg)
        files.append({p.relative_to(tmp_path / name): p.read_bytes()
                      for p in sorted((tmp_path / name).rglob("*")) if p.is_file()})
    assert files[0] == files[1]


def test_parallel_trials_match_serial(tmp_path):
    a = small(tmp_path, out=str(tmp_path / "a"))
    b = small(tmp_path, out=str(tmp_path / "b"), n_jobs=2)
    cmd_pipeline(a)
    cmd_pipeline(b)
    assert (tmp_path / "a" / "curves.csv").read_bytes() == (tmp_path / "b" / "curves.csv").read_bytes()


def test_stages_reproduce_pipeline(tmp_path):
    whole = small(tmp_path, out=str(tmp_path / "whole"))
    staged = small(tmp_path, out=str(tmp_path / "staged"))
    cmd_pipeline(whole)
    cmd_gen_expert(staged)
    cmd_cluster(staged)
    cmd_bounds(staged)
    cmd_run(staged)
    for name in ["dataset.jsonl", "labeled.csv", "basis.json", "bounds.csv", "curves.csv"]:
        assert (tmp_path / "whole" / name).read_bytes() == (tmp_path / "staged" / name).read_bytes()


def test_stage_errors_are_labelled(tmp_path):
    cfg = small(tmp_path)
    with pytest.raises(StageError, match=r"\[bounds\]"):
        cmd_bounds(cfg)
    with pytest.raises(StageError, match=r"\[cluster\]"):
        cmd_cluster(cfg)


def test_actions_basis_needs_a_bandit(tmp_path):
    cfg = small(tmp_path, basis="actions")
    cmd_gen_expert(cfg)
    with pytest.raises(StageError, match="bandit"):
        cmd_cluster(cfg)


def test_example1_report(tmp_path):
    rep = cmd_example1(str(tmp_path))
    assert rep["do_values"] == [6.0, 6.5]
    assert rep["observational_means"] == [10.0, 3.7]
    assert rep["direct_imitation_probs"] == [0.5, 0.5]
    assert rep["selection"]["empirical_best"] == 0
    assert rep["selection"]["do_optimal"] == 1
    assert "do-optimal arm: 1" in format_example1(rep)
    assert (tmp_path / "example1.csv").exists()
