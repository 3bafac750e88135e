"""Core EVRPTW domain types, the cost function and an independent route validator.

The validator (:func:`check_solution`) replays routes from scratch and does not
share code with :mod:`evrptw.env`; the two are cross-checked in the test suite.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

INSTANCE_FORMAT = "evrptw-instance/1"
SOLUTION_FORMAT = "evrptw-solution/1"

CLASS_CODES = ("C", "Cm", "Ct", "R", "Rm", "Rt", "RC", "RCm", "RCt")

# Violations smaller than this are float noise, not constraint breaches.
VIOLATION_TOL = 1e-9


class NodeKind(str, enum.Enum):
    DEPOT = "depot"
    CUSTOMER = "customer"
    STATION = "station"


class InvalidRouteError(ValueError):
    """A route references an unknown node or is not depot-anchored."""


@dataclass(frozen=True)
class Node:
    id: int
    kind: NodeKind
    x: float
    y: float
    demand: int = 0
    service_time: float = 0.0
    tw_open: float = 0.0
    tw_close: float = math.inf

    def __post_init__(self):
        if self.tw_open > self.tw_close:
            raise ValueError(f"node {self.id}: tw_open > tw_close")
        if self.kind is not NodeKind.CUSTOMER and (self.demand != 0 or self.service_time != 0):
            raise ValueError(f"node {self.id}: only customers carry demand/service time")
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise ValueError(f"node {self.id}: coordinates outside the unit square")
        if self.demand < 0 or self.service_time < 0:
            raise ValueError(f"node {self.id}: negative demand or service time")


@dataclass(frozen=True)
class ConstraintSet:
    """Which feasibility rules are active. Capacity is always on."""

    capacity: bool = True
    battery: bool = True
    time_windows: bool = True

    def __post_init__(self):
        if not self.capacity:
            raise ValueError("capacity constraint cannot be disabled")
        if self.time_windows and not self.battery:
            raise ValueError("time windows require the battery constraint (nested phases)")

    def __le__(self, other: "ConstraintSet") -> bool:
        return (self.battery <= other.battery) and (self.time_windows <= other.time_windows)


FULL = ConstraintSet(capacity=True, battery=True, time_windows=True)


@dataclass(frozen=True)
class Instance:
    nodes: tuple[Node, ...]
    n_customers: int
    n_stations: int
    capacity: int
    battery_capacity: float
    consume_rate: float
    recharge_rate: float
    speed: float
    horizon: float
    fleet_penalty: float
    class_label: str = "R"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        if len(self.nodes) != 1 + self.n_customers + self.n_stations:
            raise ValueError("node count does not match n_customers + n_stations + 1")
        for i, node in enumerate(self.nodes):
            if node.id != i:
                raise ValueError(f"node at position {i} has id {node.id}")
            expected = (
                NodeKind.DEPOT if i == 0
                else NodeKind.CUSTOMER if i <= self.n_customers
                else NodeKind.STATION
            )
            if node.kind is not expected:
                raise ValueError(f"node {i} should be a {expected.value}")
        if self.capacity <= 0 or self.battery_capacity <= 0:
            raise ValueError("capacity and battery_capacity must be positive")
        if min(self.consume_rate, self.recharge_rate, self.speed, self.horizon) <= 0:
            raise ValueError("rates, speed and horizon must be positive")
        if self.fleet_penalty < 0:
            raise ValueError("fleet_penalty must be non-negative")
        if self.class_label not in CLASS_CODES:
            raise ValueError(f"unknown class label {self.class_label!r}")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def customers(self) -> range:
        return range(1, self.n_customers + 1)

    @property
    def stations(self) -> range:
        return range(self.n_customers + 1, self.n_nodes)

    def kind(self, i: int) -> NodeKind:
        return self.nodes[i].kind

    def is_customer(self, i: int) -> bool:
        return 1 <= i <= self.n_customers

    def is_station(self, i: int) -> bool:
        return i > self.n_customers

    @cached_property
    def coords(self) -> np.ndarray:
        return np.array([[n.x, n.y] for n in self.nodes], dtype=np.float64)

    @cached_property
    def dist(self) -> np.ndarray:
        c = self.coords
        diff = c[:, None, :] - c[None, :, :]
        d = np.sqrt((diff ** 2).sum(-1))
        d.setflags(write=False)
        return d

    @cached_property
    def dist_list(self) -> list[list[float]]:
        # Python floats for scalar-heavy inner loops.
        return self.dist.tolist()

    def travel_time(self, i: int, j: int) -> float:
        return self.dist_list[i][j] / self.speed

    @cached_property
    def escape_dist(self) -> list[float]:
        """Distance from each node to its nearest other charge point (depot or station)."""
        points = [0, *self.stations]
        d = self.dist_list
        return [min((d[i][p] for p in points if p != i), default=math.inf) for i in range(self.n_nodes)]

    @property
    def total_demand(self) -> int:
        return sum(self.nodes[i].demand for i in self.customers)

    def fleet_lower_bound(self) -> int:
        return math.ceil(self.total_demand / self.capacity)


@dataclass(frozen=True)
class Violation:
    kind: str  # capacity | battery | time_window | horizon | coverage
    route: int  # -1 when not tied to one route
    node: int
    magnitude: float


@dataclass(frozen=True)
class FeasibilityReport:
    feasible: bool
    violations: tuple[Violation, ...]
    arrival_times: tuple[tuple[float, ...], ...]
    battery_levels: tuple[tuple[float, ...], ...]


@dataclass(frozen=True)
class Solution:
    routes: tuple[tuple[int, ...], ...]
    arrival_times: tuple[tuple[float, ...], ...]
    battery_levels: tuple[tuple[float, ...], ...]
    total_distance: float
    fleet_size: int
    cost: float
    feasible: bool
    violations: tuple[Violation, ...] = ()
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def is_empty(self) -> bool:
        return self.fleet_size == 0


def _check_route_ids(instance: Instance, routes: Iterable[Sequence[int]]) -> list[tuple[int, ...]]:
    out = []
    n = instance.n_nodes
    for r, route in enumerate(routes):
        route = tuple(int(v) for v in route)
        if len(route) < 2 or route[0] != 0 or route[-1] != 0:
            raise InvalidRouteError(f"route {r} must start and end at the depot: {route}")
        for v in route:
            if not 0 <= v < n:
                raise InvalidRouteError(f"route {r} references unknown node id {v}")
        if 0 in route[1:-1]:
            raise InvalidRouteError(f"route {r} revisits the depot mid-route")
        out.append(route)
    return out


def route_distance(instance: Instance, route: Sequence[int]) -> float:
    d = instance.dist_list
    return sum(d[a][b] for a, b in zip(route[:-1], route[1:]))


def objective(routes: Iterable[Sequence[int]], instance: Instance) -> float:
    """Total distance plus the fleet penalty for every route that serves a customer."""
    routes = _check_route_ids(instance, routes)
    total = 0.0
    for route in routes:
        if any(instance.is_customer(v) for v in route):
            total += route_distance(instance, route) + instance.fleet_penalty
    return total


def replay_routes(
    instance: Instance, routes: Iterable[Sequence[int]], constraints: ConstraintSet
) -> FeasibilityReport:
    """Simulate every route as an independent vehicle and collect violations.

    Each vehicle leaves the depot at time 0 with a full battery and an empty
    load. Battery is only drawn down when the battery rule is active, waiting
    for a window to open only happens when time windows are active, and a
    station always recharges to full at ``recharge_rate``.
    """
    routes = _check_route_ids(instance, routes)
    d = instance.dist_list
    nodes = instance.nodes
    qbat = instance.battery_capacity
    violations: list[Violation] = []
    all_arrivals = []
    all_battery = []
    seen: dict[int, int] = {}

    for r, route in enumerate(routes):
        clock = 0.0
        battery = qbat
        load = 0
        arrivals = [0.0]
        levels = [battery]
        for prev, cur in zip(route[:-1], route[1:]):
            node = nodes[cur]
            clock = clock + d[prev][cur] / instance.speed
            if constraints.battery:
                battery = battery - instance.consume_rate * d[prev][cur]
            arrivals.append(clock)
            levels.append(battery)
            if constraints.battery and battery < -VIOLATION_TOL:
                violations.append(Violation("battery", r, cur, -battery))
            if node.kind is NodeKind.CUSTOMER:
                seen[cur] = seen.get(cur, 0) + 1
                if constraints.time_windows:
                    if clock > node.tw_close + VIOLATION_TOL:
                        violations.append(Violation("time_window", r, cur, clock - node.tw_close))
                    clock = max(clock, node.tw_open)
                clock = clock + node.service_time
                load += node.demand
            elif node.kind is NodeKind.STATION:
                clock = clock + (qbat - battery) / instance.recharge_rate
                battery = qbat
            elif constraints.time_windows and clock > instance.horizon + VIOLATION_TOL:
                violations.append(Violation("horizon", r, cur, clock - instance.horizon))
        if load > instance.capacity:
            violations.append(Violation("capacity", r, -1, float(load - instance.capacity)))
        all_arrivals.append(tuple(arrivals))
        all_battery.append(tuple(levels))

    for c in instance.customers:
        count = seen.get(c, 0)
        if count != 1:
            violations.append(Violation("coverage", -1, c, float(abs(count - 1) if count else 1)))

    return FeasibilityReport(
        feasible=not violations,
        violations=tuple(violations),
        arrival_times=tuple(all_arrivals),
        battery_levels=tuple(all_battery),
    )


def check_solution(
    instance: Instance, solution: Solution | Sequence[Sequence[int]], constraints: ConstraintSet
) -> FeasibilityReport:
    routes = solution.routes if isinstance(solution, Solution) else solution
    return replay_routes(instance, routes, constraints)


def make_solution(
    instance: Instance, routes: Iterable[Sequence[int]], constraints: ConstraintSet, **meta
) -> Solution:
    """Build a :class:`Solution` whose schedule and verdict come from a fresh replay."""
    routes = tuple(_check_route_ids(instance, routes))
    report = replay_routes(instance, routes, constraints)
    used = [r for r in routes if any(instance.is_customer(v) for v in r)]
    dist = sum(route_distance(instance, r) for r in used)
    return Solution(
        routes=routes,
        arrival_times=report.arrival_times,
        battery_levels=report.battery_levels,
        total_distance=dist,
        fleet_size=len(used),
        cost=objective(routes, instance),
        feasible=report.feasible,
        violations=report.violations,
        meta=dict(meta),
    )


def validate_instance(instance: Instance) -> list[Violation]:
    """Check demand <= capacity, battery reachability and window/horizon fit.

    A customer counts as battery-reachable when some path
    ``depot -> [station a] -> i -> [station b] -> depot`` has every leg between
    charges within ``battery_capacity``.
    """
    out: list[Violation] = []
    d = instance.dist_list
    r = instance.consume_rate
    qbat = instance.battery_capacity
    charge_points = [0, *instance.stations]
    tol = VIOLATION_TOL
    usable = [a for a in charge_points if r * d[0][a] <= qbat + tol]
    for i in instance.customers:
        node = instance.nodes[i]
        if node.demand > instance.capacity:
            out.append(Violation("capacity", -1, i, float(node.demand - instance.capacity)))
        best = min(r * (d[a][i] + d[i][b]) for a in usable for b in usable)
        if best > qbat + tol:
            out.append(Violation("battery", -1, i, best - qbat))
        latest = node.tw_close + node.service_time + instance.travel_time(i, 0)
        if latest > instance.horizon + tol:
            out.append(Violation("time_window", -1, i, latest - instance.horizon))
    return out


# -- serialization -----------------------------------------------------------------


def instance_to_dict(instance: Instance) -> dict:
    return {
        "format": INSTANCE_FORMAT,
        "n_customers": instance.n_customers,
        "n_stations": instance.n_stations,
        "capacity": instance.capacity,
        "battery_capacity": instance.battery_capacity,
        "consume_rate": instance.consume_rate,
        "recharge_rate": instance.recharge_rate,
        "speed": instance.speed,
        "horizon": instance.horizon,
        "fleet_penalty": instance.fleet_penalty,
        "class_label": instance.class_label,
        "seed": instance.seed,
        "nodes": [
            {
                "id": n.id,
                "kind": n.kind.value,
                "x": n.x,
                "y": n.y,
                "demand": n.demand,
                "service_time": n.service_time,
                "tw_open": n.tw_open,
                "tw_close": n.tw_close,
            }
            for n in instance.nodes
        ],
    }


def instance_from_dict(data: dict) -> Instance:
    if data.get("format") != INSTANCE_FORMAT:
        raise ValueError(f"unsupported instance format {data.get('format')!r}")
    nodes = tuple(
        Node(
            id=n["id"],
            kind=NodeKind(n["kind"]),
            x=n["x"],
            y=n["y"],
            demand=n["demand"],
            service_time=n["service_time"],
            tw_open=n["tw_open"],
            tw_close=n["tw_close"],
        )
        for n in data["nodes"]
    )
    return Instance(
        nodes=nodes,
        n_customers=data["n_customers"],
        n_stations=data["n_stations"],
        capacity=data["capacity"],
        battery_capacity=data["battery_capacity"],
        consume_rate=data["consume_rate"],
        recharge_rate=data["recharge_rate"],
        speed=data["speed"],
        horizon=data["horizon"],
        fleet_penalty=data["fleet_penalty"],
        class_label=data["class_label"],
        seed=data["seed"],
    )


def solution_to_dict(solution: Solution) -> dict:
    return {
        "format": SOLUTION_FORMAT,
        "routes": [list(r) for r in solution.routes],
        "arrival_times": [list(a) for a in solution.arrival_times],
        "battery_levels": [list(b) for b in solution.battery_levels],
        "total_distance": solution.total_distance,
        "fleet_size": solution.fleet_size,
        "cost": solution.cost,
        "feasible": solution.feasible,
        "violations": [
            {"kind": v.kind, "route": v.route, "node": v.node, "magnitude": v.magnitude}
            for v in solution.violations
        ],
        "meta": solution.meta,
    }


def solution_from_dict(data: dict) -> Solution:
    if data.get("format") != SOLUTION_FORMAT:
        raise ValueError(f"unsupported solution format {data.get('format')!r}")
    return Solution(
        routes=tuple(tuple(r) for r in data["routes"]),
        arrival_times=tuple(tuple(a) for a in data["arrival_times"]),
        battery_levels=tuple(tuple(b) for b in data["battery_levels"]),
        total_distance=data["total_distance"],
        fleet_size=data["fleet_size"],
        cost=data["cost"],
        feasible=data["feasible"],
        violations=tuple(Violation(**v) for v in data["violations"]),
        meta=data.get("meta", {}),
    )


def _dump(obj: dict, path: str | Path | None) -> str:
    # allow_nan keeps the inf default window readable as Infinity.
    text = json.dumps(obj, indent=1, sort_keys=True)
    if path is not None:
        Path(path).write_text(text)
    return text


def write_instance(instance: Instance, path: str | Path | None = None) -> str:
    return _dump(instance_to_dict(instance), path)


def read_instance(source: str | Path) -> Instance:
    text = Path(source).read_text() if not str(source).lstrip().startswith("{") else str(source)
    return instance_from_dict(json.loads(text))


def write_solution(solution: Solution, path: str | Path | None = None) -> str:
    return _dump(solution_to_dict(solution), path)


def read_solution(source: str | Path) -> Solution:
    text = Path(source).read_text() if not str(source).lstrip().startswith("{") else str(source)
    return solution_from_dict(json.loads(text))
