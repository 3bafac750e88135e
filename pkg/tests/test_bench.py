import json
import math
import xml.etree.ElementTree as ET

import pytest

from builders import make_instance
from evrptw import bench as B
from evrptw.baselines import exact_solve
from evrptw.instancegen import CLASS_CODES, GenConfig, benchmark_suite, generate
from evrptw.model import FULL, make_solution
from evrptw.policy import PolicyDims, init_params, save_checkpoint

TINY = PolicyDims(hidden=8, heads=2, layers=1)


def test_gap_percent_examples():
    assert round(B.gap_percent(122.0, 115.2), 1) == 5.9
    assert round(B.gap_percent(217.3, 207.2), 1) == 4.9
    assert B.gap_percent(100.0, 100.0) == 0.0
    assert B.gap_percent(90.0, 100.0) == pytest.approx(-10.0)
    for bad in (0.0, -1.0, math.nan):
        with pytest.raises(ValueError):
            B.gap_percent(1.0, bad)


def _cell(**methods):
    cell = B.CellResult("C5S2")
    for name, (cost, incomplete, certified) in methods.items():
        cell.methods[name] = B.MethodCell(name, 1, int(cost is not None), None, None, cost, None,
                                          100.0 if cost is not None else 0.0, 0.1, incomplete, certified)
    return cell


def test_choose_baseline():
    assert B.choose_baseline(_cell(exact=(100.0, False, True), vns=(99.0, False, False))) == "exact"
    assert B.choose_baseline(_cell(exact=(100.0, True, False), vns=(101.0, False, False))) == "vns"
    assert B.choose_baseline(_cell(exact=(100.0, True, False), vns=(101.0, True, False),
                                   greedy=(120.0, False, False), ppo=(110.0, False, False))) == "ppo"
    assert B.choose_baseline(_cell(exact=(None, True, False))) is None


def _runs(inst, method, routes, certified=False, timed_out=False):
    sol = make_solution(inst, routes, FULL, method=method)
    return B.InstanceRun("C2S0", "R", inst.seed, method, sol, 0.01, certified, timed_out)


def test_aggregate_pairs_gaps_and_marks_timeouts():
    inst = make_instance([(0.3, 0.5), (0.7, 0.5)])
    runs = [_runs(inst, "exact", [(0, 1, 2, 0)], certified=True),
            _runs(inst, "greedy", [(0, 1, 0), (0, 2, 0)]),
            _runs(inst, "vns", [(0, 1, 2, 0)], timed_out=True)]
    (cell,) = B.aggregate(runs)
    assert cell.baseline == "exact"
    assert cell.methods["exact"].gap == 0.0
    assert cell.methods["greedy"].gap == pytest.approx((200.8 - 100.8) / 100.8 * 100)
    assert cell.methods["vns"].incomplete and cell.methods["vns"].gap is None
    text = B.emit_tables([cell])
    vns_cols = [line for line in text.splitlines() if line.startswith("vns")]
    assert vns_cols and set(vns_cols[0].split()[1:]) == {"-"}
    # columns follow exact, vns, greedy
    assert text.splitlines()[2].split()[5:9] == ["-"] * 4


def test_empty_results_render_headers_only():
    text = B.emit_tables([])
    t1, t2 = text.strip().split("\n\n")
    assert t1.splitlines()[0].strip() == "Instance" and len(t1.splitlines()) == 2
    assert t2.splitlines()[0].strip() == "Model" and len(t2.splitlines()) == 2
    assert B.emit_tables([], "csv").strip() == ",".join(B.CSV_FIELDS)


def test_one_cell_gives_one_row():
    inst = make_instance([(0.3, 0.5)])
    (cell,) = B.aggregate([_runs(inst, "exact", [(0, 1, 0)], certified=True)])
    t1 = B.emit_tables([cell]).split("\n\n")[0]
    assert len(t1.splitlines()) == 3
    md = B.emit_tables([cell], "markdown")
    assert "**100.4**" in md and "**100.0%**" in md
    with pytest.raises(ValueError):
        B.emit_tables([cell], "html")


def test_csv_round_trip():
    inst = make_instance([(0.3, 0.5), (0.7, 0.5)])
    runs = [_runs(inst, "exact", [(0, 1, 2, 0)], certified=True),
            _runs(inst, "greedy", [(0, 1, 0), (0, 2, 0)])]
    cells = B.aggregate(runs)
    rows = B.parse_csv(B.emit_tables(cells, "csv"))
    assert [(r["label"], r["method"]) for r in rows] == [("C2S0", "exact"), ("C2S0", "greedy")]
    for r in rows:
        m = cells[0].methods[r["method"]]
        assert (r["cost"], r["gap"], r["success"], r["certified"], r["baseline"]) == (
            m.cost, m.gap, m.success, m.certified, "exact")


def test_route_svg_is_valid_xml(tmp_path):
    inst = generate(GenConfig(6, 2, "R", seed=0))
    sol = make_solution(inst, [(0, 1, 2, 3, 0), (0, 4, 5, 6, 0)], FULL)
    svg = B.emit_route_svg(inst, sol, tmp_path / "r.svg")
    root = ET.fromstring((tmp_path / "r.svg").read_text())
    ns = "{http://www.w3.org/2000/svg}"
    assert len(root.findall(f"{ns}polyline")) == 2
    assert len(root.findall(f"{ns}circle")) == 6 and len(root.findall(f"{ns}polygon")) == 2
    assert svg.count('class="depot"') == 1
    empty = ET.fromstring(B.emit_route_svg(inst, make_solution(inst, [], FULL)))
    assert empty.findall(f"{ns}polyline") == []
    assert "infeasible" in "".join(empty.itertext())


def test_run_benchmark_small_suite():
    suite = benchmark_suite(((5, 2),), ("R", "Ct"), 2, seed=1)
    cells, runs = B.run_benchmark(suite, ["exact", "vns", "greedy"], time_limit_s=60)
    assert len(runs) == 12 and len(cells) == 1
    cell = cells[0]
    assert cell.label == "C5S2" and cell.baseline == "exact"
    assert cell.methods["exact"].gap == 0.0 and cell.methods["exact"].certified
    assert cell.methods["vns"].gap >= -1e-9 and cell.methods["greedy"].gap >= -1e-9
    for r in runs:
        if r.method == "exact":
            assert r.solution.cost == pytest.approx(exact_solve(
                next(e.instance for e in suite if e.instance.seed == r.seed and e.class_code == r.class_code),
                FULL).solution.cost)


def test_unknown_method_and_missing_checkpoint():
    with pytest.raises(B.BenchmarkError):
        B.make_solvers(["lkh"])
    with pytest.raises(B.BenchmarkError):
        B.make_solvers(["cbdrl"])
    with pytest.raises(B.BenchmarkError):
        B.eval_checkpoint("x.pt", [], method="vns")


def test_write_run(tmp_path):
    suite = benchmark_suite(((5, 2),), ("Rm",), 1, seed=2)
    cells, runs = B.run_benchmark(suite, ["exact", "greedy"], time_limit_s=60)
    out = B.write_run(tmp_path / "run", cells, runs, {"seed": 2, "methods": ["exact", "greedy"]})
    for name in ("tables.txt", "tables.md", "tables.csv", "instances.json", "manifest.json"):
        assert (out / name).exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 2 and manifest["version"]
    assert manifest["cells"][0]["baseline"] == "exact"
    assert len(json.loads((out / "instances.json").read_text())) == 2


def test_eval_checkpoint_is_deterministic_and_size_agnostic(tmp_path):
    path = tmp_path / "p.pt"
    save_checkpoint(init_params(0, TINY), path)
    suite = benchmark_suite(((5, 2),), CLASS_CODES[:3], 1, seed=0)
    a = B.eval_checkpoint(path, suite)
    b = B.eval_checkpoint(path, suite)
    assert [(m.cost, m.n_feasible) for m in a[0].methods.values()] == [
        (m.cost, m.n_feasible) for m in b[0].methods.values()]
    big = benchmark_suite(((100, 12),), ("R",), 1, seed=0)
    (cell,) = B.eval_checkpoint(path, big, method="ppo")
    assert cell.label == "C100S12" and cell.methods["ppo"].n_instances == 1
