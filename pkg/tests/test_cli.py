import json

import pytest

from evrptw.cli import main
from evrptw.model import read_instance, read_solution
from evrptw.policy import PolicyDims, init_params, save_checkpoint


def _gen(tmp_path, n=5, m=2, cls="R", count=2):
    out = tmp_path / "inst"
    assert main(["gen", "--n", str(n), "--m", str(m), "--class", cls, "--count", str(count),
                 "--seed", "3", "--out", str(out)]) == 0
    return out


def test_gen_writes_instances(tmp_path, capsys):
    out = _gen(tmp_path)
    files = sorted(out.glob("*.json"))
    assert len(files) == 2 and all(f.name.startswith("R5S2_") for f in files)
    assert capsys.readouterr().out.count(".json") == 2
    assert read_instance(files[0]).n_customers == 5
    all_classes = _gen(tmp_path / "all", cls="all", count=1)
    assert len(list(all_classes.glob("*.json"))) == 9


def test_solve_and_plot(tmp_path):
    inst = sorted(_gen(tmp_path).glob("*.json"))[0]
    sol_path = tmp_path / "sol.json"
    trace = tmp_path / "trace.jsonl"
    assert main(["solve", str(inst), "--method", "exact", "--out", str(sol_path), "--trace", str(trace)]) == 0
    sol = read_solution(sol_path)
    assert sol.feasible and sol.meta["certified"]
    assert json.loads(trace.read_text().splitlines()[-1])["terminal"]
    for method in ("vns", "greedy"):
        assert main(["solve", str(inst), "--method", method, "--phase", "b", "--out", str(tmp_path / "x.json")]) == 0
    svg = tmp_path / "r.svg"
    assert main(["plot", "--instance", str(inst), "--solution", str(sol_path), "--out", str(svg)]) == 0
    assert svg.read_text().startswith("<svg")


def test_solve_with_policy_checkpoint(tmp_path):
    inst = sorted(_gen(tmp_path).glob("*.json"))[0]
    ckpt = tmp_path / "p.pt"
    save_checkpoint(init_params(0, PolicyDims(hidden=8, heads=2, layers=1)), ckpt)
    code = main(["solve", str(inst), "--method", "policy", "--checkpoint", str(ckpt),
                 "--out", str(tmp_path / "s.json")])
    assert code in (0, 2)
    with pytest.raises(SystemExit):
        main(["solve", str(inst), "--method", "policy"])
    with pytest.raises(SystemExit):
        main(["solve", str(inst), "--phase", "D"])


def test_bench_writes_a_run_directory(tmp_path, capsys):
    suite = _gen(tmp_path)
    out = tmp_path / "run"
    assert main(["bench", "--suite", str(suite), "--methods", "exact,greedy", "--time-limit", "30",
                 "--out", str(out)]) == 0
    assert "C5S2" in capsys.readouterr().out
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["methods"] == ["exact", "greedy"] and len(manifest["config"]["instances"]) == 2
    with pytest.raises(SystemExit):
        main(["bench", "--suite", str(tmp_path / "missing"), "--out", str(out)])


def test_train_smoke(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("ppo:\n  instances_per_epoch: 2\n  batch_instances: 2\n  minibatch_instances: 1\n"
                   "  update_epochs: 1\n  multistart: 1\nschedule:\n  boundary_ab: 1\n  boundary_bc: 2\n"
                   "gen:\n  n_customers: 3\n  n_stations: 1\npolicy:\n  hidden: 8\n  heads: 2\n  layers: 1\n"
                   "epochs: 3\nseed: 1\n")
    out = tmp_path / "train"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    rows = json.loads((out / "journal.json").read_text())
    assert [r["phase"] for r in rows] == ["A", "B", "C"]
    assert (out / "final.pt").exists() and (out / "config.json").exists()
    flat = tmp_path / "flat"
    assert main(["train", "--config", str(cfg), "--out", str(flat), "--no-curriculum", "--epochs", "2"]) == 0
    assert [r["phase"] for r in json.loads((flat / "journal.json").read_text())] == ["C", "C"]
