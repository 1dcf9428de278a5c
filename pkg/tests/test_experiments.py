import csv
import io
import json
import logging
import math

import numpy as np
import pytest

from lowrank_bnb.experiments import (
    CELL_KEYS,
    CSV_FIELDS,
    ExperimentConfig,
    geometric_mean,
    run_experiment,
    run_instance,
    summarize,
    write_rows,
)

HEADER = ("n,m,k,p,gamma,seed,mode,disjunction,order,q,shor,presolve,root_gap,final_gap,nodes,root_time_s,"
          "total_time_s,mse_altmin,mse_bnb,mse_improvement_pct,termination")


def tiny_config(tmp_path, **kw):
    base = dict(n=[4], k=[1], p=[3.0], gamma=[20.0], rate="kn", instances=2, eps=1e-2, time_limit_s=30.0)
    base.update(kw)
    return ExperimentConfig(out_csv=str(tmp_path / "out.csv"), **base)


def row(**kw):
    out = {k: "" for k in CSV_FIELDS}
    out.update(n=10, m=10, k=1, p=2.0, gamma=20.0, seed=0, mode="noisy", disjunction="eig", order="best", q=2,
               shor="none", presolve=0, root_gap=0.1, final_gap=1e-4, nodes=5, root_time_s=0.5, total_time_s=2.0,
               mse_altmin=1.0, mse_bnb=0.5, mse_improvement_pct=50.0, termination="gap_closed")
    out.update(kw)
    return out


def test_csv_header_is_exact(tmp_path):
    path = tmp_path / "rows.csv"
    write_rows([row()], path)
    assert path.read_text().splitlines()[0] == HEADER
    assert ",".join(CSV_FIELDS) == HEADER


def test_seed_scheme_and_cells():
    cfg = ExperimentConfig(n=[4, 6], k=[1, 2], instances=3, base_seed=100)
    jobs = cfg.jobs()
    assert len(jobs) == 4 * 3
    assert [s for _, s in jobs[:6]] == [100, 101, 102, 101, 102, 103]
    assert all(cell["m"] == cell["n"] for cell, _ in jobs)


def test_config_rejects_unknown_keys_and_bad_values(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"n": [4], "bogus": 1}))
    with pytest.raises(ValueError):
        ExperimentConfig.from_json(path)
    with pytest.raises(ValueError):
        ExperimentConfig(order="random")
    cfg = ExperimentConfig(n=[5], instances=2)
    cfg.to_json(path)
    assert ExperimentConfig.from_json(path) == cfg


def test_replay_gives_identical_csv(tmp_path):
    cfg = tiny_config(tmp_path, root_only=True)
    run_experiment(cfg, tmp_path / "a.csv")
    run_experiment(cfg, tmp_path / "b.csv")
    a, b = (tmp_path / "a.csv").read_text(), (tmp_path / "b.csv").read_text()
    # timings differ between runs; everything else is byte-identical
    strip = lambda text: [[v for k, v in r.items() if not k.endswith("_time_s")]  # noqa: E731
                          for r in csv.DictReader(io.StringIO(text))]
    assert strip(a) == strip(b)
    assert a.splitlines()[0] == HEADER


def test_run_instance_row_fields(tmp_path):
    cfg = tiny_config(tmp_path)
    r = run_instance(cfg, cfg.instance_cells()[0], 2)
    assert set(r) == set(CSV_FIELDS)
    assert r["termination"] == "gap_closed"
    assert r["final_gap"] <= 1e-2
    expected = 100 * (r["mse_altmin"] - r["mse_bnb"]) / r["mse_altmin"]
    assert r["mse_improvement_pct"] == pytest.approx(expected)


def test_failures_become_error_rows(tmp_path):
    cfg = tiny_config(tmp_path)
    r = run_instance(cfg, {"n": 4, "m": 4, "k": 9, "p": 1.0, "gamma": 20.0}, 0)
    assert r["termination"] == "error"
    assert math.isnan(r["final_gap"])


def test_geometric_mean_examples():
    assert geometric_mean([0.25]) == pytest.approx(0.25)
    assert geometric_mean([1e-2, 1e-4]) == pytest.approx(1e-3)
    assert geometric_mean([0.0, 1.0]) == pytest.approx(1e-6)
    assert math.isnan(geometric_mean([]))


def csv_text(rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def test_summarize_single_and_pair():
    out = summarize(csv_text([row()]))
    assert len(out) == 1 and out[0]["root_gap"] == pytest.approx(0.1) and out[0]["instances"] == 1
    out = summarize(csv_text([row(final_gap=1e-2), row(seed=1, final_gap=1e-4)]))
    assert out[0]["final_gap"] == pytest.approx(1e-3)


def test_summarize_skips_malformed_rows(caplog):
    text = csv_text([row(), row(seed=1, root_gap="oops"), row(seed=2, termination="error")])
    text += "10,10\n"
    with caplog.at_level(logging.WARNING):
        out = summarize(text)
    assert out[0]["instances"] == 1
    assert sum("skipping row" in rec.message for rec in caplog.records) == 3


def test_summarize_matches_independent_aggregation():
    rng = np.random.default_rng(0)
    rows = []
    for i in range(100):
        rows.append(row(n=[10, 20][i % 2], order=["best", "depth"][(i // 2) % 2], seed=i,
                        root_gap=float(10 ** rng.uniform(-5, -1)), final_gap=float(rng.choice([0.0, 1e-3, 1e-5])),
                        nodes=int(rng.integers(1, 500)), root_time_s=float(rng.uniform(0.1, 2)),
                        total_time_s=float(rng.uniform(1, 600)), mse_improvement_pct=float(rng.uniform(-5, 30))))
    out = {(e["n"], e["order"]): e for e in summarize(csv_text(rows))}
    assert len(out) == 4
    for (n, order), entry in out.items():
        members = [r for r in rows if str(r["n"]) == n and r["order"] == order]
        assert entry["instances"] == len(members) == 25
        for metric in ("root_gap", "final_gap", "nodes", "total_time_s"):
            logs = [math.log(max(float(r[metric]), 1e-12)) for r in members]
            assert entry[metric] == pytest.approx(math.exp(sum(logs) / len(logs)), rel=1e-12)
        assert entry["mse_improvement_pct"] == pytest.approx(
            sum(r["mse_improvement_pct"] for r in members) / len(members), rel=1e-12)
    assert set(CELL_KEYS) <= set(next(iter(out.values())))


def test_summarize_rejects_foreign_header():
    with pytest.raises(ValueError):
        summarize("a,b\n1,2\n")
