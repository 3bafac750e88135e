"""Variable neighbourhood search with simulated-annealing acceptance.

The search walks a penalised objective (cost + weight * total violation) so
shaking may pass through infeasible solutions; only candidates that the
validator accepts can become the incumbent. Routes follow the same structural
rules as the environment: a station stop must directly follow a customer and
an optional ``max_stations_per_route`` caps the stops per route.
"""

from __future__ import annotations

import math
import random
import time
from dataclasses import dataclass
from typing import Iterator

from ..model import VIOLATION_TOL, ConstraintSet, Instance, NodeKind, Solution, make_solution
from .greedy import greedy_construct

NEIGHBORHOODS = ("relocate", "swap", "two-opt", "station-insert", "station-remove")

Routes = tuple[tuple[int, ...], ...]  # inner node sequences, depot implicit


@dataclass(frozen=True)
class VNSConfig:
    neighborhoods: tuple[str, ...] = NEIGHBORHOODS
    max_shake: int = 5
    temperature_factor: float = 0.05
    cooling: float = 0.99
    max_iterations: int = 300
    time_limit_s: float = 600.0
    seed: int = 0
    penalty: float = 1e5
    max_stations_per_route: int | None = None

    def __post_init__(self):
        if self.time_limit_s <= 0:
            raise ValueError("time limit must be positive")
        unknown = set(self.neighborhoods) - set(NEIGHBORHOODS)
        if unknown:
            raise ValueError(f"unknown neighbourhoods {sorted(unknown)}")


class _Evaluator:
    """Penalised evaluation with per-route caches.

    Moves never drop or duplicate customers, so a solution's cost and
    violation are sums over its routes plus the fleet term.
    """

    def __init__(self, inst: Instance, cons: ConstraintSet, cfg: VNSConfig):
        self.inst = inst
        self.cons = cons
        self.cfg = cfg
        self.route_cache: dict[tuple[int, ...], tuple[float, float]] = {}
        self.placed: dict[tuple[int, ...], tuple[int, ...]] = {}

    def normalize(self, routes, cap: bool = True) -> Routes:
        inst = self.inst
        limit = self.cfg.max_stations_per_route
        out = []
        for r in routes:
            clean = []
            for v in r:
                if inst.is_station(v):
                    if not self.cons.battery or not clean or not inst.is_customer(clean[-1]):
                        continue
                clean.append(v)
            if cap and limit is not None and sum(inst.is_station(v) for v in clean) > limit:
                return ()
            if any(inst.is_customer(v) for v in clean):
                out.append(tuple(clean))
        return tuple(out)

    def route(self, r: tuple[int, ...]) -> tuple[float, float]:
        """(distance, violation) of one route, coverage aside; same arithmetic as the validator."""
        hit = self.route_cache.get(r)
        if hit is not None:
            return hit
        inst = self.inst
        d = inst.dist_list
        nodes = inst.nodes
        q = inst.battery_capacity
        bat_on, tw_on = self.cons.battery, self.cons.time_windows
        clock, battery, load, dist, viol = 0.0, q, 0, 0.0, 0.0
        prev = 0
        for cur in (*r, 0):
            node = nodes[cur]
            dist += d[prev][cur]
            clock = clock + d[prev][cur] / inst.speed
            if bat_on:
                battery = battery - inst.consume_rate * d[prev][cur]
                if battery < -VIOLATION_TOL:
                    viol += -battery
            if node.kind is NodeKind.CUSTOMER:
                if tw_on:
                    if clock > node.tw_close + VIOLATION_TOL:
                        viol += clock - node.tw_close
                    clock = max(clock, node.tw_open)
                clock = clock + node.service_time
                load += node.demand
            elif node.kind is NodeKind.STATION:
                clock = clock + (q - battery) / inst.recharge_rate
                battery = q
            elif tw_on and clock > inst.horizon + VIOLATION_TOL:
                viol += clock - inst.horizon
            prev = cur
        if load > inst.capacity:
            viol += load - inst.capacity
        hit = self.route_cache[r] = (dist, viol)
        return hit

    def __call__(self, routes: Routes) -> tuple[float, float]:
        """(cost, total violation) of an already-normalised solution."""
        cost = self.inst.fleet_penalty * len(routes)
        viol = 0.0
        for r in routes:
            d, v = self.route(r)
            cost += d
            viol += v
        return cost, viol

    def score(self, routes: Routes) -> float:
        cost, viol = self(routes)
        return cost + self.cfg.penalty * viol

    def _route_score(self, r: tuple[int, ...]) -> float:
        d, v = self.route(r)
        return d + self.cfg.penalty * v

    def place(self, customers: tuple[int, ...]) -> tuple[int, ...]:
        """Station stops for a customer order: cheapest feasible placement.

        When windows rule every placement out, the cheapest battery-feasible one
        is kept and the search pays for the lateness through the penalty.
        """
        hit = self.placed.get(customers)
        if hit is not None:
            return hit
        best = customers
        if self.route(best)[1] > 0:
            best = (self._label_placement(customers, self.cons.time_windows)
                    or self._label_placement(customers, False) or customers)
        self.placed[customers] = best
        return best

    def _label_placement(self, customers: tuple[int, ...], tw_on: bool) -> tuple[int, ...] | None:
        """Exact over placements: at most one stop after each customer, labels pruned by dominance.

        Capacity does not depend on placement, so only battery, windows and
        the horizon are checked here; ``None`` when no placement satisfies them.
        """
        inst = self.inst
        d = inst.dist_list
        nodes = inst.nodes
        q = inst.battery_capacity
        limit = self.cfg.max_stations_per_route
        tol = VIOLATION_TOL

        def move(label, a, b):
            dist, battery, clock, n_st, trail = label
            battery = battery - inst.consume_rate * d[a][b]
            if battery < -tol:
                return None
            clock = clock + d[a][b] / inst.speed
            node = nodes[b]
            if node.kind is NodeKind.CUSTOMER:
                if tw_on:
                    if clock > node.tw_close + tol:
                        return None
                    clock = max(clock, node.tw_open)
                clock = clock + node.service_time
            elif node.kind is NodeKind.STATION:
                clock = clock + (q - battery) / inst.recharge_rate
                battery = q
                n_st += 1
                if limit is not None and n_st > limit:
                    return None
            elif tw_on and clock > inst.horizon + tol:
                return None
            return (dist + d[a][b], battery, clock if tw_on else 0.0, n_st, trail + (b,))

        def prune(labels):
            labels.sort(key=lambda x: (x[0], -x[1], x[2], x[3], x[4]))
            kept = []
            for lab in labels:
                if not any(k[1] >= lab[1] and k[2] <= lab[2] and k[3] <= lab[3] for k in kept):
                    kept.append(lab)
            return kept

        first = move((0.0, q, 0.0, 0, ()), 0, customers[0])
        labels = [first] if first else []
        for here, nxt in zip(customers, (*customers[1:], 0)):
            out = []
            for lab in labels:
                cand = move(lab, here, nxt)
                if cand:
                    out.append(cand)
                for s in inst.stations:
                    mid = move(lab, here, s)
                    cand = mid and move(mid, s, nxt)
                    if cand:
                        out.append(cand)
            labels = prune(out)
            if not labels:
                return None
        return labels[0][4][:-1]

    def repair(self, routes: Routes, fresh: set[int] | None = None) -> Routes:
        """Re-place station stops on infeasible routes and on the routes in ``fresh``."""
        if not self.cons.battery:
            return routes
        out = []
        for i, r in enumerate(routes):
            if (fresh is not None and i in fresh) or self.route(r)[1] > 0:
                r = self.place(tuple(v for v in r if self.inst.is_customer(v)))
            out.append(r)
        return tuple(out)


def _moves(name: str, routes: Routes, inst: Instance) -> Iterator[Routes]:
    """All neighbours of ``routes`` in neighbourhood ``name``, deterministic order."""
    R = len(routes)
    if name == "relocate":
        for a in range(R):
            for i, v in enumerate(routes[a]):
                if not inst.is_customer(v):
                    continue
                src = routes[a][:i] + routes[a][i + 1:]
                for b in range(R + 1):
                    base = list(routes)
                    base[a] = src
                    if b == R:
                        yield tuple(base) + ((v,),)
                        continue
                    tgt = base[b]
                    for j in range(len(tgt) + 1):
                        if b == a and j == i:
                            continue
                        nb = list(base)
                        nb[b] = tgt[:j] + (v,) + tgt[j:]
                        yield tuple(nb)
    elif name == "swap":
        cells = [(a, i) for a in range(R) for i, v in enumerate(routes[a]) if inst.is_customer(v)]
        for x in range(len(cells)):
            for y in range(x + 1, len(cells)):
                (a, i), (b, j) = cells[x], cells[y]
                nb = [list(r) for r in routes]
                nb[a][i], nb[b][j] = nb[b][j], nb[a][i]
                yield tuple(tuple(r) for r in nb)
    elif name == "two-opt":
        for a in range(R):
            r = routes[a]
            for i in range(len(r)):
                for j in range(i + 2, len(r) + 1):
                    yield routes[:a] + (r[:i] + r[i:j][::-1] + r[j:],) + routes[a + 1:]
        # tail exchange between two routes
        for a in range(R):
            for b in range(a + 1, R):
                ra, rb = routes[a], routes[b]
                for i in range(len(ra) + 1):
                    for j in range(len(rb) + 1):
                        if (i, j) in ((0, 0), (len(ra), len(rb))):
                            continue
                        nb = list(routes)
                        nb[a] = ra[:i] + rb[j:]
                        nb[b] = rb[:j] + ra[i:]
                        yield tuple(nb)
    elif name == "station-insert":
        for a in range(R):
            r = routes[a]
            for pos in range(1, len(r) + 1):
                if not inst.is_customer(r[pos - 1]):
                    continue
                for s in inst.stations:
                    yield routes[:a] + (r[:pos] + (s,) + r[pos:],) + routes[a + 1:]
    elif name == "station-remove":
        for a in range(R):
            r = routes[a]
            for pos, v in enumerate(r):
                if inst.is_station(v):
                    yield routes[:a] + (r[:pos] + r[pos + 1:],) + routes[a + 1:]


class VNS:
    def __init__(self, instance: Instance, constraints: ConstraintSet, config: VNSConfig = VNSConfig()):
        self.inst = instance
        self.cons = constraints
        self.cfg = config
        self.ev = _Evaluator(instance, constraints, config)
        self.rng = random.Random(config.seed)
        self.hoods = [h for h in config.neighborhoods
                      if constraints.battery or not h.startswith("station")]
        self.deadline = math.inf
        self.timed_out = False

    def _prepare(self, name: str, routes, before: Routes = ()) -> Routes:
        nb = self.ev.normalize(routes)
        if not nb or not self.cons.battery or name == "station-insert":
            return nb
        if name == "station-remove":
            # the route that lost a stop gets its stops re-placed: a station move
            return self.ev.repair(nb)
        kept = set(before)
        return self.ev.repair(nb, {i for i, r in enumerate(nb) if r not in kept})

    def _candidates(self, name: str, routes: Routes) -> Iterator[Routes]:
        for nb in _moves(name, routes, self.inst):
            nb = self._prepare(name, nb, routes)
            if nb:
                yield nb

    def local_search(self, routes: Routes) -> Routes:
        """First-improvement descent cycling through the neighbourhood order."""
        current = self.ev.score(routes)
        k = 0
        while k < len(self.hoods):
            if time.perf_counter() > self.deadline:
                self.timed_out = True
                break
            for nb in self._candidates(self.hoods[k], routes):
                s = self.ev.score(nb)
                if s < current - 1e-12:
                    routes, current = nb, s
                    k = 0
                    break
            else:
                k += 1
        return routes

    def shake(self, routes: Routes, k: int) -> Routes:
        """``k`` random moves; only the drawn neighbour is normalised and repaired."""
        name = self.hoods[(k - 1) % len(self.hoods)]
        for _ in range(k):
            for hood in (name, "relocate"):
                options = list(_moves(hood, routes, self.inst))
                self.rng.shuffle(options)
                nb = next((x for x in (self._prepare(hood, o, routes) for o in options) if x), None)
                if nb:
                    routes = nb
                    break
        return routes

    def solve(self, initial: Solution | None = None) -> Solution:
        t0 = time.perf_counter()
        self.deadline = t0 + self.cfg.time_limit_s
        init = initial if initial is not None else greedy_construct(self.inst, self.cons)
        # a start that breaks the station cap normalises to nothing
        routes = self.ev.normalize([r[1:-1] for r in init.routes]) if init.feasible else ()
        if not routes:
            # search from repaired singletons; only feasible candidates become the incumbent
            routes = self.ev.repair(self.ev.normalize([(c,) for c in self.inst.customers]))

        cost, viol = self.ev(routes)
        best, best_cost = (routes, cost) if viol == 0 else (None, math.inf)
        current, current_score = routes, self.ev.score(routes)
        temp = self.cfg.temperature_factor * cost
        k = 1
        for it in range(self.cfg.max_iterations):
            if time.perf_counter() > self.deadline:
                self.timed_out = True
                break
            cand = self.local_search(self.shake(current, k))
            cost, viol = self.ev(cand)
            score = self.ev.score(cand)
            if viol == 0 and (cost < best_cost - 1e-12 or (abs(cost - best_cost) <= 1e-12 and cand < best)):
                best, best_cost = cand, cost
            if score < current_score - 1e-12:
                current, current_score, k = cand, score, 1
            else:
                if temp > 0 and self.rng.random() < math.exp(-(score - current_score) / temp):
                    current, current_score = cand, score
                k = k + 1 if k < self.cfg.max_shake else 1
            temp *= self.cfg.cooling
        elapsed = time.perf_counter() - t0
        if best is None:
            # no candidate met every rule (including the station cap): report an empty, infeasible answer
            return make_solution(self.inst, [], self.cons, method="vns", no_incumbent=True,
                                 timed_out=self.timed_out, elapsed=elapsed)
        sol = make_solution(self.inst, [(0, *r, 0) for r in best], self.cons, method="vns",
                            timed_out=self.timed_out, elapsed=elapsed)
        if not sol.feasible:
            raise AssertionError("VNS incumbent rejected by the validator")
        return sol


def vns_solve(instance: Instance, constraints: ConstraintSet, config: VNSConfig = VNSConfig()) -> Solution:
    return VNS(instance, constraints, config).solve()
