"""Experiment grids, per-instance CSV rows and geometric-mean summaries."""
from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import json
import logging
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .disjunctions import default_pieces
from .bnb import DisjunctionMode, NodeOrder, SolverConfig, solve
from .instance import Mode, generate_instance, mse_all_entries, num_observed_for_rate
from .relaxations import ShorPolicy

log = logging.getLogger(__name__)

CSV_FIELDS = (
    "n", "m", "k", "p", "gamma", "seed", "mode", "disjunction", "order", "q", "shor", "presolve",
    "root_gap", "final_gap", "nodes", "root_time_s", "total_time_s", "mse_altmin", "mse_bnb",
    "mse_improvement_pct", "termination",
)
CELL_KEYS = ("n", "m", "k", "p", "gamma", "mode", "disjunction", "order", "q", "shor", "presolve")
SUMMARY_METRICS = ("root_gap", "final_gap", "nodes", "root_time_s", "total_time_s", "mse_improvement_pct")
GAP_FLOOR = 1e-12


@dataclass
class ExperimentConfig:
    """A grid of instance parameters crossed with one solver configuration.

    ``m`` defaults to ``n`` in every cell.  Seeds are ``base_seed + cell index
    + replicate index``, where cells enumerate the instance grid only, so two
    configurations differing only in solver fields see the same instances.
    """

    n: list[int] = field(default_factory=lambda: [10])
    m: list[int] | None = None
    k: list[int] = field(default_factory=lambda: [1])
    p: list[float] = field(default_factory=lambda: [2.0])
    gamma: list[float] = field(default_factory=lambda: [20.0])
    rate: str = "knlogn"
    noise_eps: float = 0.1
    instances: int = 20
    mode: str = "noisy"
    base_seed: int = 0
    disjunction: str = "eig"
    order: str = "best"
    pieces: int | None = None
    shor: str = "none"
    presolve: bool = False
    node_altmin: bool = True
    eps: float = 1e-4
    time_limit_s: float = 600.0
    root_only: bool = False
    cell_workers: int = 1
    out_csv: str = "results.csv"

    def __post_init__(self) -> None:
        Mode(self.mode)
        DisjunctionMode(self.disjunction)
        NodeOrder(self.order)
        ShorPolicy(self.shor)
        if self.instances < 1:
            raise ValueError("instances must be positive")
        if self.mode == Mode.BASIS_PURSUIT.value and any(g != 1.0 for g in self.gamma):
            self.gamma = [1.0]

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        data = json.loads(Path(path).read_text())
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2) + "\n")

    def instance_cells(self) -> list[dict]:
        cells = []
        for n, k, p, gamma in itertools.product(self.n, self.k, self.p, self.gamma):
            for m in (self.m or [n]):
                cells.append({"n": n, "m": m, "k": k, "p": p, "gamma": gamma})
        return cells

    def jobs(self) -> list[tuple[dict, int]]:
        return [(cell, self.base_seed + idx + rep)
                for idx, cell in enumerate(self.instance_cells()) for rep in range(self.instances)]

    def solver_config(self, seed: int) -> SolverConfig:
        return SolverConfig(
            disjunction=self.disjunction, pieces=self.pieces, order=self.order, eps=self.eps,
            time_limit_s=self.time_limit_s, use_node_altmin=self.node_altmin, shor=self.shor,
            presolve=self.presolve, seed=seed, node_limit=1 if self.root_only else None,
        )


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else ("inf" if value > 0 else "-inf" if value < 0 else "nan")
    return str(value)


def run_instance(config: ExperimentConfig, cell: dict, seed: int) -> dict:
    """Solve one instance and return its CSV row (``termination=error`` on failure)."""
    solver = config.solver_config(seed)
    row = {**cell, "seed": seed, "mode": config.mode, "disjunction": config.disjunction,
           "order": config.order, "q": solver.pieces or "default", "shor": config.shor,
           "presolve": int(config.presolve)}
    try:
        num = num_observed_for_rate(cell["n"], cell["k"], cell["p"], config.rate, m=cell["m"])
        noise = config.noise_eps if config.mode == Mode.NOISY.value else 0.0
        inst = generate_instance(cell["n"], cell["m"], cell["k"], cell["gamma"], noise, num, seed, mode=config.mode)
        row["q"] = solver.pieces or default_pieces(inst.n, inst.k)
        report = solve(inst, solver)
        mse_alt = mse_bnb = math.nan
        if report.initial_incumbent is not None:
            mse_alt = mse_all_entries(inst, report.initial_incumbent.X)
        if report.incumbent is not None:
            mse_bnb = mse_all_entries(inst, report.incumbent.X)
        improvement = 100.0 * (mse_alt - mse_bnb) / mse_alt if mse_alt > 0 else math.nan
        row.update(root_gap=report.root_gap, final_gap=report.gap, nodes=report.nodes,
                   root_time_s=report.root_time, total_time_s=report.total_time, mse_altmin=mse_alt,
                   mse_bnb=mse_bnb, mse_improvement_pct=improvement, termination=report.termination.value)
    except Exception:  # recorded per row; the grid keeps going
        log.error("instance %s seed %d failed:\n%s", cell, seed, traceback.format_exc())
        row.update(root_gap=math.nan, final_gap=math.nan, nodes=0, root_time_s=math.nan, total_time_s=math.nan,
                   mse_altmin=math.nan, mse_bnb=math.nan, mse_improvement_pct=math.nan, termination="error")
    return row


def _run_job(args):
    config, cell, seed = args
    return run_instance(config, cell, seed)


def run_experiment(config: ExperimentConfig, out_csv: str | Path | None = None) -> list[dict]:
    """Run every (cell, replicate) and write the CSV; rows keep grid order."""
    jobs = [(config, cell, seed) for cell, seed in config.jobs()]
    if config.cell_workers > 1:
        with ProcessPoolExecutor(config.cell_workers) as pool:
            rows = list(pool.map(_run_job, jobs))
    else:
        rows = [_run_job(job) for job in jobs]
    write_rows(rows, out_csv or config.out_csv)
    return rows


def write_rows(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: _fmt(row[key]) for key in CSV_FIELDS})


def geometric_mean(values, floor: float = GAP_FLOOR) -> float:
    arr = np.maximum(np.asarray(list(values), dtype=float), floor)
    if arr.size == 0:
        return math.nan
    return float(np.exp(np.mean(np.log(arr))))


def summarize(path_or_text: str | Path, metrics=SUMMARY_METRICS) -> list[dict]:
    """Per-cell geometric means of the numeric metrics.

    Rows that are malformed, or whose termination is ``error``, are skipped
    with a warning.  Non-positive values are floored at ``1e-12`` before the
    logarithm, and non-finite values are left out of a metric's mean.
    """
    text = str(path_or_text)
    if isinstance(path_or_text, Path) or "\n" not in text:
        text = Path(path_or_text).read_text()
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or any(k not in reader.fieldnames for k in CELL_KEYS):
        raise ValueError("CSV header does not match the experiment schema")
    groups: dict[tuple, dict[str, list[float]]] = {}
    counts: dict[tuple, int] = {}
    for lineno, row in enumerate(reader, start=2):
        try:
            if None in row or any(row.get(k) in (None, "") for k in CELL_KEYS):
                raise ValueError("missing fields")
            if row.get("termination") == "error":
                raise ValueError("instance failed")
            parsed = {mtr: float(row[mtr]) for mtr in metrics}
        except (ValueError, TypeError, KeyError) as exc:
            log.warning("skipping row %d: %s", lineno, exc)
            continue
        key = tuple(row[k] for k in CELL_KEYS)
        bucket = groups.setdefault(key, {mtr: [] for mtr in metrics})
        counts[key] = counts.get(key, 0) + 1
        for mtr, val in parsed.items():
            if math.isfinite(val):
                bucket[mtr].append(val)
    out = []
    for key, bucket in groups.items():
        entry = dict(zip(CELL_KEYS, key))
        entry["instances"] = counts[key]
        for mtr in metrics:
            if mtr == "mse_improvement_pct":
                # percentages can be negative; report the arithmetic mean
                entry[mtr] = float(np.mean(bucket[mtr])) if bucket[mtr] else math.nan
            else:
                entry[mtr] = geometric_mean(bucket[mtr]) if bucket[mtr] else math.nan
        out.append(entry)
    return out


def write_summary(summary: list[dict], path: str | Path) -> None:
    fields = list(CELL_KEYS) + ["instances"] + list(SUMMARY_METRICS)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for entry in summary:
            writer.writerow({k: _fmt(entry[k]) for k in fields if k in entry})
