"""Command-line entry point: ``evrptw {gen,solve,train,bench,plot}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import curriculum as cur
from . import env as E
from .baselines import VNSConfig, exact_solve, greedy_construct, vns_solve
from .bench import METHODS, emit_route_svg, emit_tables, run_benchmark, write_run
from .instancegen import CLASS_CODES, ClassSpec, GenConfig, SuiteEntry, cell_seeds, generate, instance_filename, size_label
from .model import make_solution, read_instance, read_solution, write_instance, write_solution


def _phase(name: str) -> cur.PhaseId:
    try:
        return cur.PhaseId[name.upper()]
    except KeyError:
        raise argparse.ArgumentTypeError(f"phase must be A, B or C, got {name!r}") from None


def cmd_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    codes = CLASS_CODES if args.cls == "all" else (args.cls,)
    for code in codes:
        for s in cell_seeds(args.seed, args.n, args.m, code, args.count):
            inst = generate(GenConfig(args.n, args.m, ClassSpec.from_code(code), seed=s))
            path = out / instance_filename(inst)
            write_instance(inst, path)
            print(path)
    return 0


def _trace(instance, constraints, solution, path) -> None:
    with E.TraceWriter(path) as tw:
        E.replay(instance, constraints, solution.routes, trace=tw)


def cmd_solve(args) -> int:
    inst = read_instance(args.instance)
    constraints = cur.constraint_set(args.phase)
    if args.method == "exact":
        res = exact_solve(inst, constraints, time_limit_s=args.time_limit)
        sol = res.solution
        sol.meta.update(certified=res.certified, nodes=res.nodes)
    elif args.method == "vns":
        sol = vns_solve(inst, constraints, VNSConfig(time_limit_s=args.time_limit, seed=args.seed))
    elif args.method == "greedy":
        sol = greedy_construct(inst, constraints)
    else:
        from .policy import greedy_solution, load_checkpoint

        if args.checkpoint is None:
            raise SystemExit("--method policy needs --checkpoint")
        policy, _ = load_checkpoint(args.checkpoint)
        sol = greedy_solution(inst, policy, constraints, multistart=None)
    sol = make_solution(inst, sol.routes, constraints, method=args.method, **{
        k: v for k, v in sol.meta.items() if k != "method"})
    text = write_solution(sol, args.out)
    if args.out is None:
        print(text)
    if args.trace:
        _trace(inst, constraints, sol, args.trace)
    print(f"J={sol.cost:.4f} K={sol.fleet_size} D={sol.total_distance:.4f} feasible={sol.feasible}",
          file=sys.stderr)
    return 0 if sol.feasible else 2


def cmd_train(args) -> int:
    from .ppo import load_train_config, train
    from .policy import PolicyDims
    from .ppo import PPOConfig

    if args.config:
        cfg = load_train_config(args.config)
    else:
        cfg = {"config": PPOConfig(), "schedule": cur.Schedule(), "gen_config": GenConfig(),
               "dims": PolicyDims(), "epochs": 30, "seed": 0}
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.epochs is not None:
        cfg["epochs"] = args.epochs
    if args.no_curriculum:
        cfg["schedule"] = cur.NO_CURRICULUM
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(
        {k: (asdict(v) if hasattr(v, "__dataclass_fields__") else v) for k, v in cfg.items()},
        indent=1, sort_keys=True, default=str))
    _, journal = train(out_dir=out, resume=args.resume, **cfg)
    last = journal.records[-1] if journal.records else None
    if last is not None:
        print(f"epoch {last.epoch} [{last.phase}] cost={last.mean_cost:.3f} feas={last.feasibility_rate:.3f}")
    return 0


def _load_suite(directory: str | Path) -> list[SuiteEntry]:
    paths = sorted(Path(directory).glob("*.json"))
    if not paths:
        raise SystemExit(f"no instance files in {directory}")
    out = []
    for p in paths:
        inst = read_instance(p)
        out.append(SuiteEntry(size_label(inst.n_customers, inst.n_stations), inst.class_label, inst))
    out.sort(key=lambda e: (e.instance.n_customers, e.instance.n_stations, e.class_code, e.instance.seed))
    return out


def cmd_bench(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    suite = _load_suite(args.suite)
    checkpoints = {}
    for spec in args.checkpoint or []:
        name, _, path = spec.rpartition("=")
        for m in ([name] if name else [m for m in methods if m in ("ppo", "cbdrl")]):
            checkpoints[m] = path
    constraints = cur.constraint_set(args.phase)
    cells, runs = run_benchmark(suite, methods, args.time_limit, args.seed, checkpoints, constraints)
    config = {"suite": str(args.suite), "methods": methods, "time_limit_s": args.time_limit,
              "seed": args.seed, "phase": args.phase.name, "checkpoints": checkpoints,
              "instances": [(e.label, e.class_code, e.instance.seed) for e in suite]}
    write_run(args.out, cells, runs, config)
    print(emit_tables(cells, "text"))
    return 0


def cmd_plot(args) -> int:
    inst = read_instance(args.instance)
    sol = read_solution(args.solution)
    emit_route_svg(inst, sol, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evrptw", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write generated instances as JSON")
    g.add_argument("--n", type=int, required=True, help="customers")
    g.add_argument("--m", type=int, required=True, help="charging stations")
    g.add_argument("--class", dest="cls", default="all", choices=("all",) + CLASS_CODES)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=1, help="instances per class")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("solve", help="solve one instance file")
    s.add_argument("instance")
    s.add_argument("--method", choices=("exact", "vns", "greedy", "policy"), default="exact")
    s.add_argument("--phase", type=_phase, default=cur.PhaseId.C)
    s.add_argument("--time-limit", type=float, default=600.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--checkpoint", help="policy checkpoint for --method policy")
    s.add_argument("--out", help="solution JSON path (stdout if omitted)")
    s.add_argument("--trace", help="write a JSON-lines replay of the solution's episode")
    s.set_defaults(func=cmd_solve)

    t = sub.add_parser("train", help="curriculum PPO training")
    t.add_argument("--config", help="YAML training config")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--no-curriculum", action="store_true", help="train on the full constraint set throughout")
    t.add_argument("--resume", help="checkpoint written by a previous run")
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bench", help="benchmark methods over an instance directory")
    b.add_argument("--suite", required=True)
    b.add_argument("--methods", default="exact,vns", help=f"comma list from {','.join(METHODS)}")
    b.add_argument("--checkpoint", action="append", help="FILE or METHOD=FILE for learned methods")
    b.add_argument("--time-limit", type=float, default=600.0)
    b.add_argument("--phase", type=_phase, default=cur.PhaseId.C)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    pl = sub.add_parser("plot", help="render a solution as SVG")
    pl.add_argument("--instance", required=True)
    pl.add_argument("--solution", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
