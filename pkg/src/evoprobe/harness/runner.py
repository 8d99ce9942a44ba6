"""Experiment execution: the method x seed matrix, ablations and curves.

Layout of a run directory::

    config.json              normalized config
    traces/<method>__seed<s>.csv      one row per query, after an initial row
    runs/<method>__seed<s>.json       status, invariant checks, final state
    summary.csv              distortion statistics per method and budget
    timing.csv               wall time per cell (kept apart so summaries are reproducible)

Summary numbers are recomputed from the trace files alone.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..baselines import run_boundary, run_unbiased_es
from ..core import INF
from ..evo_attack import TraceRecord, run as run_evo
from .config import ConfigError, ExperimentConfig, build_criterion, build_init, build_oracle, build_original

TRACE_COLUMNS = ("query_index", "l2", "mse", "accepted", "sigma", "mu")
SUMMARY_COLUMNS = ("method", "oracle", "budget", "runs", "mean_mse", "median_mse", "std_mse", "max_mse")
ABLATION_SETTINGS = {
    "no-cma-no-scs": dict(cma_enabled=False, scs_enabled=False),
    "cma-no-scs": dict(cma_enabled=True, scs_enabled=False),
    "cma-scs-covariance": dict(cma_enabled=True, scs_enabled=True, scs_weighting="covariance"),
    "cma-scs-uniform": dict(cma_enabled=True, scs_enabled=True, scs_weighting="uniform"),
}
FULL_SETTING = "cma-scs-covariance"
LOW_CONFIDENCE_RUNS = 5
_TRACE_NAME = re.compile(r"^(?P<method>.+)__seed(?P<seed>-?\d+)\.csv$")


class TraceError(ValueError):
    """Missing or malformed trace file."""


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) if not isinstance(v, str) else v for v in r])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())


# -- traces -----------------------------------------------------------------


def trace_rows(initial_l2: float, init_queries: int, n: int, mu0: float, records: Sequence[TraceRecord]) -> List[tuple]:
    """Rows of a trace file: the starting point first, then one row per trial."""
    rows = []
    if initial_l2 < INF:
        rows.append((init_queries, initial_l2, initial_l2 ** 2 / n, True, math.nan, mu0))
    rows += [(r.query_index, r.l2, r.mse, r.accepted, r.sigma, r.mu) for r in records]
    return rows


def read_trace(path) -> List[tuple]:
    path = Path(path)
    if not path.is_file():
        raise TraceError(f"missing trace {path}")
    try:
        with path.open(newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header is None or tuple(header) != TRACE_COLUMNS:
                raise TraceError(f"{path}: bad header {header}")
            rows = []
            for line_no, r in enumerate(reader, start=2):
                if len(r) != len(TRACE_COLUMNS) or r[3] not in ("0", "1"):
                    raise TraceError(f"{path}:{line_no}: malformed row")
                rows.append((int(r[0]), float(r[1]), float(r[2]), r[3] == "1", float(r[4]), float(r[5])))
    except (ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, TraceError):
            raise
        raise TraceError(f"{path}: {exc}") from None
    if not rows:
        raise TraceError(f"{path}: no rows")
    return rows


def checkpoint_mse(rows: Sequence[tuple], budget: int) -> float:
    """MSE of the current point after ``budget`` queries.

    The current point is the one held by the last row at or before the
    checkpoint; a checkpoint earlier than the first row reads the first row.
    """
    value = rows[0][2]
    for r in rows:
        if r[0] > budget:
            break
        value = r[2]
    return value


def step_curve(rows: Sequence[tuple]) -> List[Tuple[int, float]]:
    """Change points ``(query_index, mse)`` of the distortion step function."""
    curve = [(rows[0][0], rows[0][2])]
    for q, _, m, acc, _, _ in rows[1:]:
        if acc and m != curve[-1][1]:
            curve.append((q, m))
    return curve


def curve_value(curve: Sequence[Tuple[int, float]], q: int) -> float:
    value = curve[0][1]
    for cq, m in curve:
        if cq > q:
            break
        value = m
    return value


# -- one cell ---------------------------------------------------------------


@dataclass
class CellResult:
    method: str
    seed: int
    status: str
    final_mse: float = math.nan
    wall_time: float = 0.0
    invariants: Dict[str, object] = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.status == "completed" and all(v is not False for v in self.invariants.values())


def cell_name(method: str, seed: int) -> str:
    return f"{method}__seed{seed}"


def _check_invariants(rows, records, init_queries, ledger_count, oracle_calls, method, evo_params, state, final_ok):
    inv = {}
    l2 = [r[1] for r in rows]
    inv["monotone_l2"] = all(b <= a for a, b in zip(l2, l2[1:]))
    strict = method != "boundary"
    acc_ok = True
    prev = rows[0][1] if rows else INF
    for r in rows[1:]:
        if r[3]:
            acc_ok &= (r[1] < prev) if strict else (r[1] <= prev)
            prev = r[1]
        else:
            acc_ok &= r[1] == prev
    inv["accepted_improve"] = bool(acc_ok)
    expected = list(range(init_queries + 1, init_queries + len(records) + 1))
    inv["query_accounting"] = (
        [r.query_index for r in records] == expected
        and ledger_count == init_queries + len(records)
        and oracle_calls == ledger_count
    )
    inv["final_adversarial"] = final_ok
    if method in ("evolutionary", "unbiased-es") and records:
        sf = evo_params.sigma_factor if evo_params is not None else 0.01
        ratio_ok = True
        prev = rows[0][1]
        for r in rows[1:]:
            ratio_ok &= abs(r[4] - sf * prev) <= 1e-12 * max(1.0, sf * prev)
            prev = r[1]
        inv["sigma_ratio"] = bool(ratio_ok)
    if state is not None and evo_params is not None and not evo_params.cma_enabled:
        inv["C_identity"] = bool(np.all(state.C_diag == 1.0))
    if state is not None:
        inv["C_positive"] = bool(np.all(state.C_diag > 0))
    return inv


def run_cell(
    cfg: ExperimentConfig,
    method: str,
    seed: int,
    run_dir,
    *,
    evo_overrides: Optional[dict] = None,
    gate=None,
) -> CellResult:
    """Run one (method, seed) cell and persist its trace and run record.

    Failures are captured in the result; whatever trace exists is written
    to ``<name>.partial.csv``.
    """
    run_dir = Path(run_dir)
    name = cell_name(method, seed)
    records: List[TraceRecord] = []
    info = {"method": method, "seed": seed}
    t0 = time.perf_counter()
    oracle = None
    try:
        oracle = build_oracle(cfg.oracle, cfg.base_dir, gate=gate)
        criterion = build_criterion(cfg.criterion)
        original = build_original(cfg.original, oracle.n, cfg.base_dir)
        init = build_init(cfg.init, oracle.n, cfg.base_dir)
        rng = np.random.default_rng(seed)
        state = None
        params = None
        if method == "evolutionary":
            params = cfg.evo_params(n=oracle.n, **(evo_overrides or {}))
            final, trace, state = run_evo(oracle, criterion, original, params, init, rng, sink=records.append, return_state=True)
            mu0 = params.mu_init
        elif method == "unbiased-es":
            params = cfg.evo_params(n=oracle.n)
            final, trace = run_unbiased_es(
                oracle, criterion, original, cfg.T, init, rng,
                sigma_factor=params.sigma_factor, clamp_to_bounds=params.clamp_to_bounds, sink=records.append,
            )
            mu0 = 0.0
        elif method == "boundary":
            bp = cfg.boundary_params()
            final, trace = run_boundary(oracle, criterion, original, bp, cfg.T, init, rng, sink=records.append)
            mu0 = bp.toward_step
        else:
            raise ConfigError([f"unknown method {method!r}"])
        rows = trace_rows(trace.initial_l2, trace.init_queries, oracle.n, mu0, trace.records)
        if hasattr(oracle, "config"):
            final_ok = "skipped"  # re-querying a remote oracle would cost a request
        else:
            final_ok = bool(criterion.is_adversarial(oracle.predict(final.values)))
        ledger_count = rows[-1][0] if rows else 0
        inv = _check_invariants(
            rows, trace.records, trace.init_queries, ledger_count, oracle.calls, method, params, state, final_ok,
        )
        if hasattr(oracle, "config") and not oracle.config.count_cache_hits:
            inv["query_accounting"] = "skipped"  # uncharged cache hits break the one-query-per-row count
        _write_csv(run_dir / "traces" / f"{name}.csv", TRACE_COLUMNS, rows)
        info.update(
            status="completed",
            initial_l2=trace.initial_l2,
            initial_mse=trace.initial_mse,
            init_queries=trace.init_queries,
            queries_used=ledger_count,
            final_l2=rows[-1][1],
            final_mse=rows[-1][2],
            invariants=inv,
        )
        if state is not None:
            info["final_mu"] = state.mu
            info["C_diag"] = [float(c) for c in state.C_diag]
        result = CellResult(method, seed, "completed", rows[-1][2], invariants=inv)
    except Exception as exc:  # a failed cell must not stop the matrix
        if records:
            rows = [(r.query_index, r.l2, r.mse, r.accepted, r.sigma, r.mu) for r in records]
            _write_csv(run_dir / "traces" / f"{name}.partial.csv", TRACE_COLUMNS, rows)
        info.update(status="failed", error=f"{type(exc).__name__}: {exc}", partial_rows=len(records))
        result = CellResult(method, seed, "failed", error=info["error"])
    finally:
        if oracle is not None and hasattr(oracle, "close"):
            oracle.close()
    result.wall_time = time.perf_counter() - t0
    path = run_dir / "runs" / f"{name}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(info, indent=2, sort_keys=True, allow_nan=True) + "\n")
    return result


# -- matrix -----------------------------------------------------------------


@dataclass
class MatrixResult:
    run_dir: Path
    cells: List[CellResult]
    summary: List[dict]

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.cells)


def _shared_gate(cfg: ExperimentConfig):
    if cfg.oracle.get("type") != "remote":
        return None
    from ..remote import RateGate, RemoteOracleConfig

    return RateGate(RemoteOracleConfig.from_dict(cfg.oracle["remote"]).rate_limit)


def _run_cells(cfg, jobs, run_dir, evo_overrides=None) -> List[CellResult]:
    gate = _shared_gate(cfg)

    def one(job):
        method, seed = job
        return run_cell(cfg, method, seed, run_dir, evo_overrides=evo_overrides, gate=gate)

    if cfg.workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(one, jobs))
    return [one(j) for j in jobs]


def oracle_label(cfg: ExperimentConfig) -> str:
    return str(cfg.oracle.get("name", cfg.oracle.get("type")))


def run_matrix(cfg: ExperimentConfig, run_dir=None) -> MatrixResult:
    run_dir = Path(run_dir if run_dir is not None else cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.dumps())
    jobs = [(m, s) for m in cfg.methods for s in cfg.seeds]
    cells = _run_cells(cfg, jobs, run_dir)
    summary = summarize(run_dir, cfg.methods, cfg.budgets, oracle_label(cfg))
    _write_csv(
        run_dir / "timing.csv",
        ("method", "seed", "status", "wall_time_s"),
        [(c.method, c.seed, c.status, c.wall_time) for c in cells],
    )
    return MatrixResult(run_dir, cells, summary)


def _trace_files(run_dir: Path) -> Dict[str, Dict[int, Path]]:
    out: Dict[str, Dict[int, Path]] = {}
    tdir = run_dir / "traces"
    if not tdir.is_dir():
        raise TraceError(f"no traces directory in {run_dir}")
    for p in sorted(tdir.iterdir()):
        m = _TRACE_NAME.match(p.name)
        if m and not p.name.endswith(".partial.csv"):
            out.setdefault(m["method"], {})[int(m["seed"])] = p
    return out


def summarize(run_dir, methods: Sequence[str], budgets: Sequence[int], oracle: str) -> List[dict]:
    """Distortion statistics per method and checkpoint, from completed traces only."""
    run_dir = Path(run_dir)
    files = _trace_files(run_dir) if (run_dir / "traces").is_dir() else {}
    rows = []
    for method in methods:
        traces = [read_trace(p) for _, p in sorted(files.get(method, {}).items())]
        for b in budgets:
            vals = np.array([checkpoint_mse(t, b) for t in traces])
            if vals.size:
                stats = (float(vals.mean()), float(np.median(vals)), float(vals.std()), float(vals.max()))
            else:
                stats = (math.nan,) * 4
            rows.append(dict(zip(SUMMARY_COLUMNS, (method, oracle, b, int(vals.size)) + stats)))
    _write_csv(run_dir / "summary.csv", SUMMARY_COLUMNS, [tuple(r.values()) for r in rows])
    return rows


# -- ablation ---------------------------------------------------------------


@dataclass
class AblationReport:
    rows: List[dict]
    finals: Dict[str, Dict[int, float]]
    run_dir: Path

    def row(self, setting: str) -> dict:
        return next(r for r in self.rows if r["setting"] == setting)

    def paired_wins(self, better: str, worse: str) -> int:
        a, b = self.finals[better], self.finals[worse]
        return sum(1 for s in a if s in b and a[s] < b[s])


ABLATION_COLUMNS = ("setting", "runs", "median_final_mse", "mean_final_mse", "full_wins", "low_confidence")


def _sweep_k(cfg: ExperimentConfig, n: int, m: int) -> int:
    if "k_fraction" in cfg.evo:
        frac = cfg.evo["k_fraction"]
    elif cfg.evo.get("k") is not None:
        frac = cfg.evo["k"] / cfg.evo.get("m", n)
    else:
        frac = 1 / 20
    return max(1, min(m, int(round(frac * m))))


def ablation_report(cfg: ExperimentConfig, run_dir=None) -> AblationReport:
    """Run the four CMA/SCS settings and the ``m_sweep`` with the evolutionary method.

    ``full_wins`` counts the seeds where CMA+SCS with covariance weighting ends
    strictly below the row's setting.
    """
    run_dir = Path(run_dir if run_dir is not None else cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.dumps())
    oracle = build_oracle(cfg.oracle, cfg.base_dir)
    n, grid = oracle.n, oracle.shape
    if hasattr(oracle, "close"):
        oracle.close()
    _, m, k = cfg.evo_params(n=n).resolve(n, grid)
    if k >= m:
        raise ConfigError([f"ablation needs k < m for coordinate selection (k={k}, m={m})"])

    settings: Dict[str, dict] = dict(ABLATION_SETTINGS)
    for shape in cfg.m_sweep:
        ms = math.prod(shape)
        label = "m=" + "x".join(str(s) for s in shape)
        settings[label] = dict(search_shape=tuple(shape), m=ms, k=_sweep_k(cfg, n, ms))

    finals: Dict[str, Dict[int, float]] = {}
    timing = []
    for setting, overrides in settings.items():
        sub = run_dir / "ablation" / setting
        cells = _run_cells(cfg, [("evolutionary", s) for s in cfg.seeds], sub, evo_overrides=overrides)
        finals[setting] = {c.seed: c.final_mse for c in cells if c.status == "completed"}
        timing += [(setting, c.seed, c.status, c.wall_time) for c in cells]

    rows = []
    full = finals[FULL_SETTING]
    for setting, vals in finals.items():
        arr = np.array([vals[s] for s in sorted(vals)])
        wins = sum(1 for s in vals if s in full and full[s] < vals[s])
        rows.append(dict(zip(ABLATION_COLUMNS, (
            setting,
            int(arr.size),
            float(np.median(arr)) if arr.size else math.nan,
            float(arr.mean()) if arr.size else math.nan,
            wins,
            "yes" if arr.size < LOW_CONFIDENCE_RUNS else "no",
        ))))
    _write_csv(run_dir / "ablation.csv", ABLATION_COLUMNS, [tuple(r.values()) for r in rows])
    _write_csv(run_dir / "ablation_timing.csv", ("setting", "seed", "status", "wall_time_s"), timing)
    return AblationReport(rows, finals, run_dir)


# -- curves -----------------------------------------------------------------


def curve_export(run_dir) -> List[Path]:
    """Write per-run step curves and a per-method mean curve under ``curves/``.

    The mean curve is evaluated on the union of all change points of the
    method's runs; before its first row a run contributes its initial MSE.
    """
    run_dir = Path(run_dir)
    files = _trace_files(run_dir)
    if not files:
        raise TraceError(f"no trace files in {run_dir / 'traces'}")
    out_dir = run_dir / "curves"
    written = []
    for method, by_seed in sorted(files.items()):
        curves = {}
        for seed, p in sorted(by_seed.items()):
            curves[seed] = step_curve(read_trace(p))
            path = out_dir / f"{method}__seed{seed}.csv"
            _write_csv(path, ("query_index", "mse"), curves[seed])
            written.append(path)
        grid = sorted({q for c in curves.values() for q, _ in c})
        mean = [(q, float(np.mean([curve_value(c, q) for c in curves.values()]))) for q in grid]
        path = out_dir / f"{method}__mean.csv"
        _write_csv(path, ("query_index", "mean_mse"), mean)
        written.append(path)
    return written
