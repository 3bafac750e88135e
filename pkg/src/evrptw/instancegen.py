"""Seeded generator for the nine spatial/temporal instance classes.

Randomness comes from numpy's PCG64 seeded through ``SeedSequence`` with one
substream per entity (cluster centres, each customer, each station), so adding
stations never perturbs customer draws and results are platform independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
import numpy as np

from . import env as E
from .model import CLASS_CODES, FULL, Instance, Node, NodeKind, Violation, validate_instance

DEPOT_XY = (0.5, 0.5)
SERVICE_TIME = 0.05
DEMAND_RANGE = (1, 9)
N_CLUSTERS = 3
CLUSTER_SIGMA = 0.07
MAX_RETRIES = 200

DEFAULT_LADDER = ((5, 2), (10, 3), (20, 3), (30, 4), (40, 5), (50, 6), (100, 12))

# substream tags
_CENTERS, _CUSTOMER, _STATION, _WINDOW = 1, 2, 3, 4

TIGHTNESS_WIDTH = {"wide": 1.0, "medium": 0.4, "tight": 0.15}


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClassSpec:
    code: str
    spatial: str
    tightness: str

    @classmethod
    def from_code(cls, code: str) -> "ClassSpec":
        if code not in CLASS_CODES:
            raise ValueError(f"unknown class code {code!r}; expected one of {CLASS_CODES}")
        if code.endswith("m"):
            tightness, prefix = "medium", code[:-1]
        elif code.endswith("t"):
            tightness, prefix = "tight", code[:-1]
        else:
            tightness, prefix = "wide", code
        spatial = {"C": "clustered", "R": "random", "RC": "mixed"}[prefix]
        return cls(code, spatial, tightness)


@dataclass(frozen=True)
class GenConfig:
    n_customers: int = 10
    n_stations: int = 3
    class_spec: ClassSpec = field(default_factory=lambda: ClassSpec.from_code("R"))
    seed: int = 0
    capacity: int = 30
    battery_capacity: float = 1.0
    consume_rate: float = 1.0
    recharge_rate: float = 5.0
    speed: float = 1.0
    horizon: float = 4.0
    fleet_penalty: float = 100.0

    def __post_init__(self):
        if isinstance(self.class_spec, str):
            object.__setattr__(self, "class_spec", ClassSpec.from_code(self.class_spec))
        if self.n_customers < 1 or self.n_stations < 1:
            raise ValueError("need at least one customer and one station")


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def _time_window(rng, cfg: GenConfig, t_out: float, t_back: float) -> tuple[float, float]:
    lo = t_out
    hi = cfg.horizon - t_back - SERVICE_TIME
    width = TIGHTNESS_WIDTH[cfg.class_spec.tightness] * cfg.horizon
    if hi - lo <= width:
        return lo, max(lo, hi)
    # centre drawn so the full width fits inside [lo, hi]
    centre = rng.uniform(lo + width / 2, hi - width / 2)
    return centre - width / 2, centre + width / 2


def _place_customer(rng, cfg: GenConfig, index: int, centers: np.ndarray) -> tuple[float, float]:
    spatial = cfg.class_spec.spatial
    clustered = spatial == "clustered" or (spatial == "mixed" and index < cfg.n_customers // 2)
    if clustered:
        c = centers[rng.integers(len(centers))]
        x, y = np.clip(c + rng.normal(0.0, CLUSTER_SIGMA, size=2), 0.0, 1.0)
    else:
        x, y = rng.uniform(0.0, 1.0, size=2)
    return float(x), float(y)


def _build(cfg, cust_xy, demands, station_xy) -> Instance:
    d0 = [math.dist(DEPOT_XY, xy) for xy in cust_xy]
    nodes = [Node(0, NodeKind.DEPOT, *DEPOT_XY, tw_open=0.0, tw_close=cfg.horizon)]
    for i, (xy, q) in enumerate(zip(cust_xy, demands)):
        t = d0[i] / cfg.speed
        e, l = _time_window(_rng(cfg.seed, _WINDOW, i), cfg, t, t)
        nodes.append(Node(i + 1, NodeKind.CUSTOMER, *xy, demand=q, service_time=SERVICE_TIME, tw_open=e, tw_close=l))
    for j, xy in enumerate(station_xy):
        nodes.append(Node(1 + cfg.n_customers + j, NodeKind.STATION, *xy, tw_open=0.0, tw_close=cfg.horizon))
    return Instance(
        nodes=tuple(nodes),
        n_customers=cfg.n_customers,
        n_stations=cfg.n_stations,
        capacity=cfg.capacity,
        battery_capacity=cfg.battery_capacity,
        consume_rate=cfg.consume_rate,
        recharge_rate=cfg.recharge_rate,
        speed=cfg.speed,
        horizon=cfg.horizon,
        fleet_penalty=cfg.fleet_penalty,
        class_label=cfg.class_spec.code,
        seed=cfg.seed,
    )


def unservable_alone(instance: Instance) -> list[Violation]:
    """Customers that no single vehicle can serve under the full constraint set.

    The environment never moves from the depot straight to a station (the
    battery is full there), so the station-assisted reachability accepted by
    ``validate_instance`` does not by itself guarantee a feasible instance.
    A mask-legal ``depot -> i -> [station] -> depot`` route for every ``i`` does.
    """
    out = []
    for i in instance.customers:
        s = E.reset(instance, FULL, start_customer=i)
        ok = E.is_allowed(s, i)
        if ok:
            s, _ = E.step(s, i)
            ok = E.is_allowed(s, 0) or any(
                E.is_allowed(E.step(s, st)[0], 0) for st in instance.stations if E.is_allowed(s, st))
        if not ok:
            out.append(Violation("singleton", -1, i, 1.0))
    return out


def generate(cfg: GenConfig) -> Instance:
    """Sample a valid instance; offending customers are redrawn from their own substream.

    Valid means ``validate_instance`` finds nothing and every customer can be
    served by a vehicle of its own, so every instance is feasible in every phase.
    """
    centers = _rng(cfg.seed, _CENTERS).uniform(0.0, 1.0, size=(N_CLUSTERS, 2))
    station_xy = [tuple(map(float, _rng(cfg.seed, _STATION, j).uniform(0.0, 1.0, size=2)))
                  for j in range(cfg.n_stations)]
    rngs = [_rng(cfg.seed, _CUSTOMER, i) for i in range(cfg.n_customers)]
    lo, hi = DEMAND_RANGE
    cust_xy = []
    demands = []
    for i, rng in enumerate(rngs):
        cust_xy.append(_place_customer(rng, cfg, i, centers))
        demands.append(int(rng.integers(lo, hi + 1)))

    last = None
    for _ in range(MAX_RETRIES):
        inst = _build(cfg, cust_xy, demands, station_xy)
        bad = validate_instance(inst) or unservable_alone(inst)
        if not bad:
            return inst
        last = bad
        for v in bad:
            i = v.node - 1
            if v.kind == "capacity":
                demands[i] = int(rngs[i].integers(lo, hi + 1))
            else:
                cust_xy[i] = _place_customer(rngs[i], cfg, i, centers)
    kinds = sorted({v.kind for v in last})
    raise GenerationError(f"retry budget exhausted; failing checks: {', '.join(kinds)}")


def size_label(n_customers: int, n_stations: int) -> str:
    return f"C{n_customers}S{n_stations}"


def instance_filename(instance: Instance) -> str:
    return f"{instance.class_label}{instance.n_customers}S{instance.n_stations}_{instance.seed}.json"


def cell_seeds(seed: int, n: int, m: int, code: str, count: int) -> list[int]:
    ss = np.random.SeedSequence(seed, spawn_key=(n, m, CLASS_CODES.index(code)))
    return [int(s) for s in ss.generate_state(count, dtype=np.uint64)] if count else []


@dataclass(frozen=True)
class SuiteEntry:
    label: str
    class_code: str
    instance: Instance


def benchmark_suite(
    sizes=DEFAULT_LADDER,
    classes=CLASS_CODES,
    instances_per_cell: int = 100,
    seed: int = 0,
    **overrides,
) -> list[SuiteEntry]:
    out = []
    for n, m in sizes:
        for code in classes:
            spec = ClassSpec.from_code(code)
            for s in cell_seeds(seed, n, m, code, instances_per_cell):
                cfg = GenConfig(n_customers=n, n_stations=m, class_spec=spec, seed=s, **overrides)
                out.append(SuiteEntry(size_label(n, m), code, generate(cfg)))
    return out
