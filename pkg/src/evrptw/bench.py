"""Benchmark harness: run methods over a suite, aggregate per cell, render tables and plots.

Every reported cost comes from a fresh replay of the returned routes; solver
self-reports are never aggregated. Runtimes cover the solve call only.
"""

from __future__ import annotations

import csv
import io
import json
import subprocess
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence
from xml.sax.saxutils import escape

from . import __version__
from .baselines import VNSConfig, exact_solve, greedy_construct, vns_solve
from .instancegen import SuiteEntry
from .model import FULL, ConstraintSet, Instance, Solution, make_solution
from .policy import greedy_solution, load_checkpoint

LEARNED = ("ppo", "cbdrl")
METHODS = ("exact", "vns", "greedy") + LEARNED
TABLE_METHODS_ORDER = {m: i for i, m in enumerate(METHODS)}
ROUTE_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


class BenchmarkError(RuntimeError):
    pass


def gap_percent(j_rl: float, j_base: float) -> float:
    """Relative cost excess over the baseline in percent, unrounded."""
    if not j_base > 0:
        raise ValueError(f"baseline cost must be positive, got {j_base}")
    return (j_rl - j_base) / j_base * 100.0


@dataclass
class InstanceRun:
    label: str
    class_code: str
    seed: int
    method: str
    solution: Solution
    elapsed: float
    certified: bool
    timed_out: bool


@dataclass
class MethodCell:
    method: str
    n_instances: int
    n_feasible: int
    distance: float | None  # means over feasible instances
    fleet: float | None
    cost: float | None
    gap: float | None
    success: float
    runtime: float
    incomplete: bool  # some instance hit the time limit
    certified: bool  # every instance certified optimal (exact only)


@dataclass
class CellResult:
    label: str
    methods: dict[str, MethodCell] = field(default_factory=dict)
    baseline: str | None = None


# -- solving -----------------------------------------------------------------


Solver = Callable[[Instance, ConstraintSet, float, int], tuple[Solution, bool, bool]]


def _exact(instance, constraints, limit, seed):
    res = exact_solve(instance, constraints, time_limit_s=limit)
    return res.solution, res.certified, not res.certified


def _vns(instance, constraints, limit, seed):
    sol = vns_solve(instance, constraints, VNSConfig(time_limit_s=limit, seed=seed))
    return sol, False, bool(sol.meta.get("timed_out", False))


def _greedy(instance, constraints, limit, seed):
    return greedy_construct(instance, constraints), False, False


def _learned(policy) -> Solver:
    def solve(instance, constraints, limit, seed):
        return greedy_solution(instance, policy, constraints, multistart=None), False, False
    return solve


def make_solvers(methods: Sequence[str], checkpoints: dict[str, str | Path] | None = None) -> dict[str, Solver]:
    checkpoints = checkpoints or {}
    out: dict[str, Solver] = {}
    for m in methods:
        if m == "exact":
            out[m] = _exact
        elif m == "vns":
            out[m] = _vns
        elif m == "greedy":
            out[m] = _greedy
        elif m in LEARNED:
            if m not in checkpoints:
                raise BenchmarkError(f"method {m!r} needs a checkpoint")
            policy, _ = load_checkpoint(checkpoints[m])
            policy.eval()
            out[m] = _learned(policy)
        else:
            raise BenchmarkError(f"unknown method {m!r}; expected one of {METHODS}")
    return out


def solve_entry(entry: SuiteEntry, method: str, solver: Solver, constraints: ConstraintSet,
                time_limit_s: float, seed: int) -> InstanceRun:
    t0 = time.perf_counter()
    sol, certified, timed_out = solver(entry.instance, constraints, time_limit_s, seed)
    elapsed = time.perf_counter() - t0
    if elapsed > time_limit_s:
        timed_out = True
    checked = make_solution(entry.instance, sol.routes, constraints, method=method)
    if sol.feasible and not checked.feasible:
        raise BenchmarkError(f"{method} returned an infeasible solution marked feasible on {entry.label}")
    return InstanceRun(entry.label, entry.class_code, entry.instance.seed, method, checked,
                       elapsed, certified, timed_out)


# -- aggregation ---------------------------------------------------------------


def _mean(xs: list[float]) -> float | None:
    return sum(xs) / len(xs) if xs else None


def summarize(runs: Sequence[InstanceRun]) -> MethodCell:
    feas = [r.solution for r in runs if r.solution.feasible]
    return MethodCell(
        method=runs[0].method,
        n_instances=len(runs),
        n_feasible=len(feas),
        distance=_mean([s.total_distance for s in feas]),
        fleet=_mean([float(s.fleet_size) for s in feas]),
        cost=_mean([s.cost for s in feas]),
        gap=None,
        success=100.0 * len(feas) / len(runs),
        runtime=sum(r.elapsed for r in runs) / len(runs),
        incomplete=any(r.timed_out for r in runs),
        certified=bool(runs) and all(r.certified for r in runs),
    )


def choose_baseline(cell: CellResult) -> str | None:
    """Exact when certified on the whole cell, else a complete VNS, else the best complete method."""
    ms = cell.methods
    ex = ms.get("exact")
    if ex is not None and ex.certified and ex.cost is not None:
        return "exact"
    vns = ms.get("vns")
    if vns is not None and not vns.incomplete and vns.cost is not None:
        return "vns"
    done = [m for m in ms.values() if not m.incomplete and m.cost is not None]
    if not done:
        return None
    return min(done, key=lambda m: (m.cost, TABLE_METHODS_ORDER.get(m.method, len(METHODS)))).method


def _paired_gap(runs: Sequence[InstanceRun], base_runs: Sequence[InstanceRun]) -> float | None:
    """Gap of mean J over the instances both methods solved feasibly."""
    base = {(r.class_code, r.seed): r.solution.cost for r in base_runs if r.solution.feasible}
    pairs = [(r.solution.cost, base[(r.class_code, r.seed)]) for r in runs
             if r.solution.feasible and (r.class_code, r.seed) in base]
    if not pairs:
        return None
    return gap_percent(sum(p[0] for p in pairs) / len(pairs), sum(p[1] for p in pairs) / len(pairs))


def aggregate(runs: Iterable[InstanceRun]) -> list[CellResult]:
    grouped: dict[str, dict[str, list[InstanceRun]]] = {}
    for r in runs:
        grouped.setdefault(r.label, {}).setdefault(r.method, []).append(r)
    cells = []
    for label, by_method in grouped.items():
        cell = CellResult(label, {m: summarize(rs) for m, rs in by_method.items()})
        cell.baseline = choose_baseline(cell)
        if cell.baseline is not None:
            for name, m in cell.methods.items():
                if m.cost is not None and not m.incomplete:
                    m.gap = _paired_gap(by_method[name], by_method[cell.baseline])
        cells.append(cell)
    return cells


def run_benchmark(
    suite: Sequence[SuiteEntry],
    methods: Sequence[str],
    time_limit_s: float = 600.0,
    seed: int = 0,
    checkpoints: dict[str, str | Path] | None = None,
    constraints: ConstraintSet = FULL,
    progress: Callable[[InstanceRun], None] | None = None,
) -> tuple[list[CellResult], list[InstanceRun]]:
    """Solve every suite entry with every method; returns per-cell results and the raw runs."""
    solvers = make_solvers(methods, checkpoints)
    runs = []
    for entry in suite:
        for m in methods:
            run = solve_entry(entry, m, solvers[m], constraints, time_limit_s, seed)
            runs.append(run)
            if progress is not None:
                progress(run)
    return aggregate(runs), runs


def eval_checkpoint(
    checkpoint: str | Path,
    suite: Sequence[SuiteEntry],
    method: str = "cbdrl",
    time_limit_s: float = 600.0,
    constraints: ConstraintSet = FULL,
) -> list[CellResult]:
    """Zero-shot greedy multistart evaluation of one checkpoint across the suite's cells."""
    if method not in LEARNED:
        raise BenchmarkError(f"learned method must be one of {LEARNED}")
    cells, _ = run_benchmark(suite, [method], time_limit_s, 0, {method: checkpoint}, constraints)
    return cells


# -- rendering -------------------------------------------------------------------


def _methods_of(results: Sequence[CellResult]) -> list[str]:
    seen = {m for c in results for m in c.methods}
    return sorted(seen, key=lambda m: (TABLE_METHODS_ORDER.get(m, len(METHODS)), m))


def _fmt(x: float | None, digits: int) -> str:
    return "-" if x is None else f"{x:.{digits}f}"


def _best_cost(cell: CellResult) -> float | None:
    costs = [m.cost for m in cell.methods.values() if m.cost is not None and not m.incomplete]
    return min(costs) if costs else None


def _table1_rows(results, methods, bold):
    header = ["Instance"] + [f"{m} {col}" for m in methods for col in ("D", "K", "J", "gap%")]
    rows = []
    for cell in results:
        row = [cell.label]
        best = _best_cost(cell)
        for name in methods:
            m = cell.methods.get(name)
            if m is None or m.incomplete or m.cost is None:
                row += ["-"] * 4
                continue
            j = _fmt(m.cost, 1)
            if bold and best is not None and abs(m.cost - best) <= 1e-9:
                j = f"**{j}**"
            row += [_fmt(m.distance, 2), _fmt(m.fleet, 2), j, _fmt(m.gap, 1)]
        rows.append(row)
    return header, rows


def _table2_rows(results, methods, bold):
    header = ["Model"] + [f"{c.label} {col}" for c in results for col in ("Succ.", "Time")]
    best_succ = {c.label: max((m.success for m in c.methods.values() if not m.incomplete), default=None)
                 for c in results}
    rows = []
    for name in methods:
        row = [name]
        for cell in results:
            m = cell.methods.get(name)
            if m is None or m.incomplete:
                row += ["-", "-"]
                continue
            succ = f"{m.success:.1f}%"
            if bold and best_succ[cell.label] is not None and m.success == best_succ[cell.label]:
                succ = f"**{succ}**"
            row += [succ, f"{m.runtime:.2f}s"]
        rows.append(row)
    return header, rows


def _render_text(header, rows) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(str(x).ljust(w) for x, w in zip(r, widths)).rstrip() for r in [header, *rows]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _render_markdown(header, rows) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines)


CSV_FIELDS = ("label", "method", "n_instances", "n_feasible", "distance", "fleet", "cost", "gap",
              "success", "runtime", "incomplete", "certified", "baseline")


def emit_tables(results: Sequence[CellResult], fmt: str = "text") -> str:
    """Cost table (D, K, J, gap%) and feasibility table (Succ., Time).

    ``csv`` emits one long table with every field at full precision instead.
    """
    methods = _methods_of(results)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for cell in results:
            for name in methods:
                m = cell.methods.get(name)
                if m is None:
                    continue
                w.writerow([cell.label, m.method, m.n_instances, m.n_feasible,
                            *("" if v is None else repr(v) for v in (m.distance, m.fleet, m.cost, m.gap)),
                            repr(m.success), repr(m.runtime), int(m.incomplete), int(m.certified),
                            cell.baseline or ""])
        return buf.getvalue()
    if fmt not in ("text", "markdown"):
        raise ValueError(f"unknown table format {fmt!r}")
    bold = fmt == "markdown"
    render = _render_markdown if bold else _render_text
    t1 = render(*_table1_rows(results, methods, bold))
    t2 = render(*_table2_rows(results, methods, bold))
    return f"{t1}\n\n{t2}\n"


def parse_csv(text: str) -> list[dict]:
    """Inverse of the csv table: typed rows."""
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        rec: dict = {"label": row["label"], "method": row["method"], "baseline": row["baseline"] or None}
        for k in ("n_instances", "n_feasible"):
            rec[k] = int(row[k])
        for k in ("distance", "fleet", "cost", "gap"):
            rec[k] = float(row[k]) if row[k] else None
        rec["success"] = float(row["success"])
        rec["runtime"] = float(row["runtime"])
        rec["incomplete"] = bool(int(row["incomplete"]))
        rec["certified"] = bool(int(row["certified"]))
        out.append(rec)
    return out


def emit_route_svg(instance: Instance, solution: Solution, path: str | Path | None = None,
                   size: int = 480) -> str:
    """Standalone SVG: depot square, customer circles, station triangles, one colour per route."""
    pad = 20
    xs = [n.x for n in instance.nodes]
    ys = [n.y for n in instance.nodes]
    lo_x, lo_y = min(xs), min(ys)
    span = max(max(xs) - lo_x, max(ys) - lo_y, 1e-9)

    def at(i: int) -> tuple[float, float]:
        n = instance.nodes[i]
        px = pad + (n.x - lo_x) / span * (size - 2 * pad)
        py = size - pad - (n.y - lo_y) / span * (size - 2 * pad)
        return round(px, 2), round(py, 2)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 40}" '
             f'viewBox="0 0 {size} {size + 40}">',
             f'<rect width="{size}" height="{size + 40}" fill="white"/>']
    routes = [r for r in solution.routes if len(r) > 2]
    for k, route in enumerate(routes):
        pts = " ".join(f"{x},{y}" for x, y in map(at, route))
        color = ROUTE_COLORS[k % len(ROUTE_COLORS)]
        parts.append(f'<polyline class="route" points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
    for i in range(instance.n_nodes):
        x, y = at(i)
        if i == 0:
            parts.append(f'<rect class="depot" x="{x - 6}" y="{y - 6}" width="12" height="12" fill="black"/>')
        elif instance.is_customer(i):
            parts.append(f'<circle class="customer" cx="{x}" cy="{y}" r="4" fill="white" stroke="black"/>')
        else:
            tri = f"{x},{y - 7} {x - 6},{y + 5} {x + 6},{y + 5}"
            parts.append(f'<polygon class="station" points="{tri}" fill="#2ca02c" stroke="black"/>')
    legend = (f"J={solution.cost:.2f} K={solution.fleet_size} D={solution.total_distance:.3f}"
              + ("" if solution.feasible else " (infeasible)"))
    parts.append(f'<text x="{pad}" y="{size + 25}" font-family="sans-serif" font-size="14">{escape(legend)}</text>')
    parts.append("</svg>")
    svg = "\n".join(parts) + "\n"
    if path is not None:
        Path(path).write_text(svg)
    return svg


# -- run directory -----------------------------------------------------------------


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             timeout=5, cwd=Path(__file__).parent)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_run(out_dir: str | Path, results: Sequence[CellResult], runs: Sequence[InstanceRun],
              config: dict) -> Path:
    """Tables, per-instance rows and a manifest under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for fmt, ext in (("text", "txt"), ("markdown", "md"), ("csv", "csv")):
        (out / f"tables.{ext}").write_text(emit_tables(results, fmt))
    rows = [{"label": r.label, "class": r.class_code, "seed": r.seed, "method": r.method,
             "feasible": r.solution.feasible, "cost": r.solution.cost if r.solution.feasible else None,
             "distance": r.solution.total_distance, "fleet": r.solution.fleet_size,
             "elapsed": r.elapsed, "certified": r.certified, "timed_out": r.timed_out} for r in runs]
    (out / "instances.json").write_text(json.dumps(rows, indent=1))
    manifest = {"config": config, "version": version_string(),
                "cells": [{"label": c.label, "baseline": c.baseline,
                           "methods": {k: asdict(v) for k, v in c.methods.items()}} for c in results]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str))
    return out
