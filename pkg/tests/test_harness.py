import csv
import json
import math

import numpy as np
import pytest

from evoprobe.harness import (
    ConfigError,
    ExperimentConfig,
    ablation_report,
    apply_overrides,
    checkpoint_mse,
    curve_export,
    read_trace,
    run_matrix,
    step_curve,
    summarize,
)
from evoprobe.harness import runner
from evoprobe.harness.cli import main
from evoprobe.harness.runner import TRACE_COLUMNS, TraceError, _write_csv
from evoprobe.stub_server import StubScoreServer, cosine_score


def halfspace_dict(**kw):
    d = {
        "schema_version": 1,
        "oracle": {"type": "halfspace", "name": "hs", "w": {"basis": 0, "n": 100}, "b": 1.0, "shape": [10, 10, 1]},
        "criterion": {"type": "impersonate"},
        "original": {"fill": 0.0, "n": 100},
        "init": {"mode": "given", "point": {"basis": 0, "n": 100, "scale": 2.0}},
        "method": "evolutionary",
        "evo": {"search_shape": [5, 5, 1], "k": 5},
        "budgets": [100, 500],
        "seeds": [0, 1, 2],
    }
    d.update(kw)
    return d


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# -- config -----------------------------------------------------------------


def test_validation_collects_every_problem():
    d = halfspace_dict(method="genetic", seeds=[], budgets=[500, 100], workers=0)
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_dict(d)
    text = "\n".join(info.value.problems)
    assert len(info.value.problems) >= 4
    for fragment in ("genetic", "seeds", "increasing", "workers"):
        assert fragment in text


@pytest.mark.parametrize(
    "patch",
    [
        {"oracle": {"type": "hyperbola"}},
        {"criterion": {"type": "confuse"}},
        {"evo": {"k": 5, "k_fraction": 0.1}},
        {"evo": {"warp": 3}},
        {"boundary": {"orth_step": -1.0}},
        {"schema_version": 2},
        {"extra": 1},
        {"original": {"fill": 0.0, "n": 99}},
        {"m_sweep": [[20, 20, 1]]},
    ],
)
def test_invalid_configs(patch):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(halfspace_dict(**patch))


def test_round_trip():
    cfg = ExperimentConfig.from_dict(halfspace_dict(m_sweep=[[2, 2, 1]], boundary={"orth_step": 0.05}))
    again = ExperimentConfig.from_dict(json.loads(cfg.dumps()))
    assert again.dumps() == cfg.dumps()
    assert again.methods == ["evolutionary"] and again.T == 500


def test_overrides_parse_json_values():
    d = apply_overrides(halfspace_dict(), ["evo.k=7", "oracle.name=other", "seeds=[4,5]"])
    assert d["evo"]["k"] == 7 and d["oracle"]["name"] == "other" and d["seeds"] == [4, 5]
    with pytest.raises(ConfigError):
        apply_overrides({}, ["no-equals"])


def test_k_fraction_resolves_against_search_grid():
    cfg = ExperimentConfig.from_dict(halfspace_dict(evo={"search_shape": [5, 5, 1], "k_fraction": 0.2}))
    assert cfg.evo_params(n=100).k == 5


def test_example_configs_load():
    from pathlib import Path

    for p in sorted(Path(__file__).resolve().parent.parent.joinpath("configs").glob("*.json")):
        ExperimentConfig.load(p)


# -- matrix -----------------------------------------------------------------


def test_matrix_outputs(tmp_path):
    cfg = ExperimentConfig.from_dict(halfspace_dict())
    res = run_matrix(cfg, tmp_path / "a")
    assert res.ok
    traces = sorted(p.name for p in (tmp_path / "a" / "traces").iterdir())
    assert traces == [f"evolutionary__seed{s}.csv" for s in (0, 1, 2)]
    rows = read_csv(tmp_path / "a" / "summary.csv")
    assert [(r["method"], r["budget"], r["runs"]) for r in rows] == [("evolutionary", "100", "3"), ("evolutionary", "500", "3")]
    assert float(rows[1]["median_mse"]) <= float(rows[0]["median_mse"])
    timing = read_csv(tmp_path / "a" / "timing.csv")
    assert len(timing) == 3 and all(r["status"] == "completed" for r in timing)
    assert "wall" not in (tmp_path / "a" / "summary.csv").read_text()


def test_rerun_is_byte_identical(tmp_path):
    cfg = ExperimentConfig.from_dict(halfspace_dict(method=["evolutionary", "boundary", "unbiased-es"]))
    run_matrix(cfg, tmp_path / "a")
    run_matrix(cfg, tmp_path / "b")
    for rel in ["summary.csv"] + [f"traces/{m}__seed{s}.csv" for m in cfg.methods for s in cfg.seeds]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_threaded_workers_match_serial(tmp_path):
    d = halfspace_dict(method=["evolutionary", "boundary"])
    run_matrix(ExperimentConfig.from_dict(d), tmp_path / "serial")
    run_matrix(ExperimentConfig.from_dict(dict(d, workers=3)), tmp_path / "threads")
    assert (tmp_path / "serial" / "summary.csv").read_bytes() == (tmp_path / "threads" / "summary.csv").read_bytes()


def test_trace_layout_and_invariants(tmp_path):
    cfg = ExperimentConfig.from_dict(halfspace_dict(seeds=[0]))
    run_matrix(cfg, tmp_path)
    rows = read_trace(tmp_path / "traces" / "evolutionary__seed0.csv")
    first = rows[0]
    assert first[0] == 1 and first[3] is True and math.isnan(first[4]) and first[5] == 0.1
    assert first[1] == 2.0 and first[2] == pytest.approx(4.0 / 100)
    assert [r[0] for r in rows] == list(range(1, 502))  # one init query, then T = 500 trials
    info = json.loads((tmp_path / "runs" / "evolutionary__seed0.json").read_text())
    assert info["status"] == "completed" and info["queries_used"] == 501
    assert all(v is True for v in info["invariants"].values())
    mse = [r[2] for r in rows]
    assert all(b <= a for a, b in zip(mse, mse[1:]))


def test_checkpoints_are_non_increasing(tmp_path):
    cfg = ExperimentConfig.from_dict(halfspace_dict(budgets=[1, 50, 100, 200, 500], method=["evolutionary", "boundary"]))
    run_matrix(cfg, tmp_path)
    for m in cfg.methods:
        med = [float(r["median_mse"]) for r in read_csv(tmp_path / "summary.csv") if r["method"] == m]
        assert all(b <= a for a, b in zip(med, med[1:]))


def test_disabled_cma_keeps_identity_covariance(tmp_path):
    cfg = ExperimentConfig.from_dict(halfspace_dict(evo={"search_shape": [5, 5, 1], "k": 5, "cma_enabled": False}))
    run_matrix(cfg, tmp_path)
    for s in cfg.seeds:
        info = json.loads((tmp_path / "runs" / f"evolutionary__seed{s}.json").read_text())
        assert info["C_diag"] == [1.0] * 25
        assert info["invariants"]["C_identity"] is True


def test_summary_recomputes_from_traces(tmp_path):
    cfg = ExperimentConfig.from_dict(halfspace_dict(method=["evolutionary", "unbiased-es"]))
    res = run_matrix(cfg, tmp_path)
    before = (tmp_path / "summary.csv").read_bytes()
    (tmp_path / "summary.csv").unlink()
    again = summarize(tmp_path, cfg.methods, cfg.budgets, "hs")
    assert (tmp_path / "summary.csv").read_bytes() == before
    assert again == res.summary
    for row in again:
        vals = [checkpoint_mse(read_trace(tmp_path / "traces" / f"{row['method']}__seed{s}.csv"), row["budget"])
                for s in cfg.seeds]
        assert row["mean_mse"] == pytest.approx(np.mean(vals), rel=1e-15)
        assert row["std_mse"] == pytest.approx(np.std(vals), rel=1e-12, abs=1e-300)


def test_failed_cell_does_not_stop_the_matrix(tmp_path, monkeypatch):
    def broken(oracle, criterion, original, params, T, init, rng, sink=None):
        from evoprobe.evo_attack import TraceRecord

        for q in (2, 3):
            sink(TraceRecord(q, 1.0, 0.01, False, 0.0, 0.1))
        raise RuntimeError("oracle went away")

    monkeypatch.setattr(runner, "run_boundary", broken)
    cfg = ExperimentConfig.from_dict(halfspace_dict(method=["boundary", "evolutionary"]))
    res = run_matrix(cfg, tmp_path)
    assert not res.ok
    assert [c.status for c in res.cells] == ["failed"] * 3 + ["completed"] * 3
    assert "oracle went away" in res.cells[0].error
    assert len(read_trace(tmp_path / "traces" / "boundary__seed0.partial.csv")) == 2
    rows = {(r["method"], r["budget"]): r for r in read_csv(tmp_path / "summary.csv")}
    assert rows[("boundary", "100")]["runs"] == "0" and rows[("evolutionary", "100")]["runs"] == "3"
    assert main(["matrix", "--config", _dump(tmp_path, halfspace_dict(method="boundary", seeds=[0])),
                 "--output-dir", str(tmp_path / "cli")]) == 1


# -- traces and curves ------------------------------------------------------


def _write_trace(path, rows):
    _write_csv(path, TRACE_COLUMNS, rows)


def test_step_curve_semantics(tmp_path):
    rows = [(1, 1.0, 1.0, True, math.nan, 0.1)]
    for q in range(2, 13):
        if q == 3:
            rows.append((q, math.sqrt(0.5), 0.5, True, 0.01, 0.1))
        elif q == 10:
            rows.append((q, math.sqrt(0.2), 0.2, True, 0.01, 0.1))
        else:
            rows.append((q, rows[-1][1], rows[-1][2], False, 0.01, 0.1))
    _write_trace(tmp_path / "traces" / "evolutionary__seed0.csv", rows)
    _write_trace(tmp_path / "traces" / "evolutionary__seed1.csv", rows)
    _write_trace(tmp_path / "traces" / "boundary__seed0.csv", rows[:1])
    assert step_curve(read_trace(tmp_path / "traces" / "evolutionary__seed0.csv")) == [(1, 1.0), (3, 0.5), (10, 0.2)]
    assert [checkpoint_mse(rows, b) for b in (0, 1, 2, 3, 9, 10, 100)] == [1.0, 1.0, 1.0, 0.5, 0.5, 0.2, 0.2]
    curve_export(tmp_path)
    curves = tmp_path / "curves"
    seed0 = read_csv(curves / "evolutionary__seed0.csv")
    assert [(int(r["query_index"]), float(r["mse"])) for r in seed0] == [(1, 1.0), (3, 0.5), (10, 0.2)]
    mean = read_csv(curves / "evolutionary__mean.csv")
    assert [(int(r["query_index"]), float(r["mean_mse"])) for r in mean] == [(1, 1.0), (3, 0.5), (10, 0.2)]
    flat = read_csv(curves / "boundary__seed0.csv")
    assert [(int(r["query_index"]), float(r["mse"])) for r in flat] == [(1, 1.0)]


def test_mean_curve_on_union_grid(tmp_path):
    a = [(1, 1.0, 1.0, True, math.nan, 0.1), (2, 0.5, 0.25, True, 0.01, 0.1)]
    b = [(1, 1.0, 1.0, True, math.nan, 0.1), (2, 1.0, 1.0, False, 0.01, 0.1), (3, 0.1, 0.01, True, 0.01, 0.1)]
    _write_trace(tmp_path / "traces" / "m__seed0.csv", a)
    _write_trace(tmp_path / "traces" / "m__seed1.csv", b)
    curve_export(tmp_path)
    mean = read_csv(tmp_path / "curves" / "m__mean.csv")
    assert [(int(r["query_index"]), float(r["mean_mse"])) for r in mean] == [(1, 1.0), (2, 0.625), (3, 0.13)]


@pytest.mark.parametrize(
    "content",
    ["", "a,b\n1,2\n", ",".join(TRACE_COLUMNS) + "\n", ",".join(TRACE_COLUMNS) + "\n1,x,0,1,nan,0\n",
     ",".join(TRACE_COLUMNS) + "\n1,1,1,2,nan,0\n"],
)
def test_malformed_traces(tmp_path, content):
    p = tmp_path / "t.csv"
    p.write_text(content)
    with pytest.raises(TraceError):
        read_trace(p)
    with pytest.raises(TraceError):
        read_trace(tmp_path / "missing.csv")


# -- ablation ---------------------------------------------------------------


def test_single_seed_ablation_is_flagged(tmp_path):
    cfg = ExperimentConfig.from_dict(halfspace_dict(seeds=[0], budgets=[200], m_sweep=[[2, 2, 1]]))
    report = ablation_report(cfg, tmp_path)
    names = [r["setting"] for r in report.rows]
    assert names == ["no-cma-no-scs", "cma-no-scs", "cma-scs-covariance", "cma-scs-uniform", "m=2x2x1"]
    assert all(r["runs"] == 1 and r["low_confidence"] == "yes" for r in report.rows)
    assert report.row("cma-scs-covariance")["full_wins"] == 0
    assert len(read_csv(tmp_path / "ablation.csv")) == 5
    assert len(read_csv(tmp_path / "ablation_timing.csv")) == 5
    no_cma = json.loads((tmp_path / "ablation" / "no-cma-no-scs" / "runs" / "evolutionary__seed0.json").read_text())
    assert no_cma["invariants"]["C_identity"] is True


def test_ablation_needs_coordinate_selection(tmp_path):
    cfg = ExperimentConfig.from_dict(halfspace_dict(evo={"search_shape": [5, 5, 1], "k": 25}))
    with pytest.raises(ConfigError):
        ablation_report(cfg, tmp_path)


# -- remote through the harness ---------------------------------------------


def test_remote_oracle_matrix(tmp_path):
    n = 16
    ref = np.random.default_rng(1).uniform(0, 1, n)
    with StubScoreServer(cosine_score(ref)) as srv:
        d = halfspace_dict(
            oracle={"type": "remote", "name": "stub", "shape": [4, 4, 1],
                    "remote": {"endpoint_url": srv.url, "threshold": 60.0, "rate_limit": 2000.0}},
            original={"fill": 0.0, "n": n},
            init={"mode": "random-uniform"},
            evo={"search_shape": [2, 2, 1], "k": 2},
            budgets=[20, 60],
            seeds=[0, 1],
            workers=2,
        )
        res = run_matrix(ExperimentConfig.from_dict(d), tmp_path)
        sent = len(srv.log)
    assert res.ok, [c.error or c.invariants for c in res.cells]
    infos = [json.loads((tmp_path / "runs" / f"evolutionary__seed{s}.json").read_text()) for s in (0, 1)]
    used = [i["queries_used"] for i in infos]
    assert all(i["queries_used"] == i["init_queries"] + 60 for i in infos)
    assert sent <= sum(used)
    assert res.cells[0].invariants["final_adversarial"] == "skipped"


# -- cli --------------------------------------------------------------------


def _dump(tmp_path, d):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(d))
    return str(p)


def test_cli_exit_codes(tmp_path, capsys):
    good = _dump(tmp_path, halfspace_dict(seeds=[0]))
    assert main(["matrix", "--config", good, "--output-dir", str(tmp_path / "m")]) == 0
    assert (tmp_path / "m" / "summary.csv").is_file()
    assert main(["attack", "--config", good, "--output-dir", str(tmp_path / "a"), "--seeds", "3"]) == 0
    assert (tmp_path / "a" / "traces" / "evolutionary__seed3.csv").is_file()
    assert main(["curves", str(tmp_path / "m")]) == 0
    assert main(["matrix", "--config", good, "--set", "evo.k=0"]) == 2
    assert main(["matrix", "--config", good, "--method", "nope"]) == 2
    assert main(["matrix", "--config", str(tmp_path / "absent.json")]) == 2
    assert main(["curves", str(tmp_path / "empty")]) == 1
    out = tmp_path / "t1.csv"
    assert main(["verify-theorem1", "--n", "10", "--sigma", "0.1", "--samples", "10000", "--out", str(out)]) == 0
    assert read_csv(out)[0]["holds"] == "1"
    capsys.readouterr()
