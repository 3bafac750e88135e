"""Depth-first branch and bound over mask-legal constructions.

Search runs directly on :mod:`evrptw.env` transitions so every explored
solution is one the policy could also build. Pruning:

* bound: cost so far + fleet lower bound on the remaining demand + MST over
  the unserved customers, the depot and the current node;
* label dominance at equal (served set, position): earlier clock, more charge,
  less load, fewer station stops and lower cost dominate;
* symmetry: each new route must serve the lowest-numbered unserved customer.

Children are expanded in ascending node id, so among equal-cost optima the
first one found is the lexicographically smallest route sequence.
"""

from __future__ import annotations

import math
import sys
import time
from dataclasses import dataclass

from .. import env as E
from ..model import ConstraintSet, Instance, Solution, make_solution

TIE_TOL = 1e-10


@dataclass
class ExactResult:
    solution: Solution
    certified: bool  # search exhausted within the time limit
    infeasible: bool  # certified and no solution exists
    nodes: int
    elapsed: float


class _Timeout(Exception):
    pass


def _mst(points: list[int], d) -> float:
    if len(points) <= 1:
        return 0.0
    best = {p: d[points[0]][p] for p in points[1:]}
    total = 0.0
    while best:
        p = min(best, key=best.get)
        total += best.pop(p)
        row = d[p]
        for q in best:
            if row[q] < best[q]:
                best[q] = row[q]
    return total


class _Search:
    def __init__(self, instance: Instance, constraints: ConstraintSet, time_limit: float, max_stations: int | None):
        self.inst = instance
        self.cons = constraints
        self.deadline = time.perf_counter() + time_limit
        self.max_stations = math.inf if max_stations is None else max_stations
        self.best = math.inf
        self.best_actions: list[int] | None = None
        self.nodes = 0
        self.labels: dict[tuple, list[tuple]] = {}
        self.mst_cache: dict[tuple, float] = {}
        self.full = sum(1 << c for c in instance.customers)

    def bound(self, s: E.EnvState) -> float:
        inst = self.inst
        lam = inst.fleet_penalty
        pending = lam if s.served_in_route else 0.0
        if s.visited == self.full:
            return pending + inst.dist_list[s.position][0]
        rem = [c for c in inst.customers if not s.visited >> c & 1]
        demand = sum(inst.nodes[c].demand for c in rem)
        spare = inst.capacity - s.load_used if s.served_in_route else 0
        extra = math.ceil(max(0, demand - spare) / inst.capacity)
        key = (s.visited, s.position)
        tree = self.mst_cache.get(key)
        if tree is None:
            pts = rem + [0] + ([s.position] if s.position != 0 else [])
            tree = self.mst_cache[key] = _mst(pts, inst.dist_list)
        return pending + lam * extra + tree

    def dominated(self, s: E.EnvState, cost: float, n_st: int, satisfied: bool) -> bool:
        clock = s.clock if self.cons.time_windows else 0.0
        battery = s.battery if self.cons.battery else 0.0
        label = (clock, battery, s.load_used, cost, n_st)
        key = (s.visited, s.position, satisfied)
        bucket = self.labels.setdefault(key, [])
        for c, b, l, k, n in bucket:
            if c <= clock and b >= battery and l <= s.load_used and k <= cost and n <= n_st:
                return True
        bucket[:] = [x for x in bucket
                     if not (clock <= x[0] and battery >= x[1] and s.load_used <= x[2]
                             and cost <= x[3] and n_st <= x[4])]
        bucket.append(label)
        return False

    def run(self, s: E.EnvState, cost: float, n_st: int, required: int, actions: list[int]) -> None:
        self.nodes += 1
        if self.nodes & 255 == 0 and time.perf_counter() > self.deadline:
            raise _Timeout
        if s.terminal:
            if cost < self.best - TIE_TOL:
                self.best = cost
                self.best_actions = list(actions)
            return
        if cost + self.bound(s) >= self.best - TIE_TOL:
            return
        if s.position == 0 and s.served_in_route == 0:
            required = min(c for c in self.inst.customers if not s.visited >> c & 1)
        satisfied = bool(s.visited >> required & 1)
        if self.dominated(s, cost, n_st, satisfied):
            return
        for a in E.legal_actions(s):
            if a == 0 and not satisfied:
                continue
            station = self.inst.is_station(a)
            if station and n_st >= self.max_stations:
                continue
            nxt, out = E.step(s, a)
            actions.append(a)
            self.run(nxt, cost - out.reward, 0 if a == 0 else n_st + station, required, actions)
            actions.pop()


def exact_solve(
    instance: Instance,
    constraints: ConstraintSet,
    time_limit_s: float = 600.0,
    max_stations_per_route: int | None = None,
) -> ExactResult:
    """Certified optimum when the search finishes in time, else the best incumbent.

    ``max_stations_per_route`` optionally caps station stops per route; by
    default only the structural rule applies (a stop must follow a customer).
    """
    t0 = time.perf_counter()
    search = _Search(instance, constraints, time_limit_s, max_stations_per_route)
    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 20 * instance.n_nodes + 1000))
    certified = True
    try:
        search.run(E.reset(instance, constraints), 0.0, 0, 1, [])
    except _Timeout:
        certified = False
    finally:
        sys.setrecursionlimit(limit)
    elapsed = time.perf_counter() - t0

    if search.best_actions is None:
        sol = make_solution(instance, [], constraints, method="exact")
        return ExactResult(sol, certified, certified, search.nodes, elapsed)
    state, _ = E.run_episode(instance, constraints, search.best_actions)
    sol = make_solution(instance, state.routes, constraints, method="exact", certified=certified)
    if not sol.feasible:
        raise AssertionError("branch and bound produced a solution the validator rejects")
    return ExactResult(sol, certified, False, search.nodes, elapsed)

