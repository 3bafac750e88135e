"""EVRPTW episode dynamics: action masks, transitions and per-step rewards.

States are immutable; :func:`step` returns a fresh state, so a prefix can be
shared by many branches (multi-start decoding, tree search).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import ConstraintSet, Instance, Solution, make_solution

INFEASIBLE_PENALTY_FACTOR = 2.0


class IllegalActionError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvState:
    instance: Instance
    constraints: ConstraintSet
    position: int = 0
    load_used: int = 0
    battery: float = 0.0
    clock: float = 0.0
    visited: int = 0  # bitmask, bit c set once customer c is served
    fleet_count: int = 0
    served_in_route: int = 0
    current_route: tuple[int, ...] = (0,)
    current_arrivals: tuple[float, ...] = (0.0,)
    current_battery: tuple[float, ...] = ()
    finished_routes: tuple[tuple[int, ...], ...] = ()
    finished_arrivals: tuple[tuple[float, ...], ...] = ()
    finished_battery: tuple[tuple[float, ...], ...] = ()
    start_customer: int | None = None
    terminal: bool = False
    infeasible: bool = False

    @property
    def n_visited(self) -> int:
        return self.visited.bit_count()

    @property
    def n_unvisited(self) -> int:
        return self.instance.n_customers - self.visited.bit_count()

    @property
    def all_served(self) -> bool:
        return self.visited.bit_count() == self.instance.n_customers

    def is_visited(self, c: int) -> bool:
        return bool(self.visited >> c & 1)

    @property
    def routes(self) -> tuple[tuple[int, ...], ...]:
        """Finished routes plus the open one closed at the depot (if it went anywhere)."""
        if len(self.current_route) > 1:
            return self.finished_routes + (self.current_route + (0,),)
        return self.finished_routes


@dataclass(frozen=True)
class StepOutcome:
    reward: float
    terminal: bool
    info: dict


def reset(instance: Instance, constraints: ConstraintSet, start_customer: int | None = None) -> EnvState:
    if start_customer is not None and not instance.is_customer(start_customer):
        raise ValueError(f"start_customer {start_customer} is not a customer id")
    q = instance.battery_capacity
    return EnvState(
        instance=instance,
        constraints=constraints,
        battery=q,
        current_battery=(q,),
        start_customer=start_customer,
    )


def _forced_start(state: EnvState) -> bool:
    return state.start_customer is not None and state.fleet_count == 0 and len(state.current_route) == 1 \
        and not state.finished_routes


def is_allowed(state: EnvState, j: int) -> bool:
    """Single-action version of :func:`feasible_actions`."""
    inst = state.instance
    pos = state.position
    if j == pos or state.terminal:
        return False
    c = state.constraints
    d = inst.dist_list[pos][j]
    if _forced_start(state):
        if j != state.start_customer:
            return False
    if inst.is_customer(j):
        if state.visited >> j & 1:
            return False
        node = inst.nodes[j]
        if state.load_used + node.demand > inst.capacity:
            return False
        if c.battery:
            left = state.battery - inst.consume_rate * d
            if left < 0 or left - inst.consume_rate * inst.escape_dist[j] < 0:
                return False
        if c.time_windows:
            arrive = state.clock + d / inst.speed
            if arrive > node.tw_close:
                return False
            if max(arrive, node.tw_open) + node.service_time + inst.travel_time(j, 0) > inst.horizon:
                return False
        return True
    if inst.is_station(j):
        if not c.battery or state.battery >= inst.battery_capacity:
            return False
        left = state.battery - inst.consume_rate * d
        if left < 0:
            return False
        if c.time_windows:
            ready = state.clock + d / inst.speed + (inst.battery_capacity - left) / inst.recharge_rate
            if ready + inst.travel_time(j, 0) > inst.horizon:
                return False
        return True
    # depot
    if state.served_in_route == 0:
        return False
    if c.battery and state.battery - inst.consume_rate * d < 0:
        return False
    if c.time_windows and state.clock + d / inst.speed > inst.horizon:
        return False
    return True


def legal_actions(state: EnvState) -> list[int]:
    if state.terminal:
        return []
    inst = state.instance
    if _forced_start(state):
        return [j for j in (state.start_customer,) if is_allowed(state, j)]
    out = [j for j in range(inst.n_nodes) if is_allowed(state, j)]
    return out


def feasible_actions(state: EnvState) -> np.ndarray:
    """Boolean mask over node ids. An all-false mask signals a dead end."""
    mask = np.zeros(state.instance.n_nodes, dtype=bool)
    mask[legal_actions(state)] = True
    return mask


def step(state: EnvState, action: int) -> tuple[EnvState, StepOutcome]:
    if not is_allowed(state, action):
        raise IllegalActionError(f"action {action} is masked out at node {state.position}")
    inst = state.instance
    c = state.constraints
    d = inst.dist_list[state.position][action]
    clock = state.clock + d / inst.speed
    battery = state.battery - inst.consume_rate * d if c.battery else state.battery
    route = state.current_route + (action,)
    arrivals = state.current_arrivals + (clock,)
    levels = state.current_battery + (battery,)
    reward = -d
    info: dict = {}

    if inst.is_customer(action):
        node = inst.nodes[action]
        if c.time_windows:
            clock = max(clock, node.tw_open)
        new = replace(
            state,
            position=action,
            clock=clock + node.service_time,
            battery=battery,
            load_used=state.load_used + node.demand,
            visited=state.visited | (1 << action),
            served_in_route=state.served_in_route + 1,
            current_route=route,
            current_arrivals=arrivals,
            current_battery=levels,
        )
    elif inst.is_station(action):
        qbat = inst.battery_capacity
        new = replace(
            state,
            position=action,
            clock=clock + (qbat - battery) / inst.recharge_rate,
            battery=qbat,
            current_route=route,
            current_arrivals=arrivals,
            current_battery=levels,
        )
    else:
        reward -= inst.fleet_penalty
        info["closed_route"] = route
        qbat = inst.battery_capacity
        new = replace(
            state,
            position=0,
            clock=0.0,
            battery=qbat,
            load_used=0,
            fleet_count=state.fleet_count + 1,
            served_in_route=0,
            current_route=(0,),
            current_arrivals=(0.0,),
            current_battery=(qbat,),
            finished_routes=state.finished_routes + (route,),
            finished_arrivals=state.finished_arrivals + (arrivals,),
            finished_battery=state.finished_battery + (levels,),
        )
        if new.all_served:
            new = replace(new, terminal=True)
    return new, StepOutcome(reward=reward, terminal=new.terminal, info=info)


def mark_infeasible(state: EnvState) -> tuple[EnvState, StepOutcome]:
    """Terminate a dead-end episode with a penalty per unserved customer.

    The vehicle is stuck, so the customers on its open route never reach the
    depot either: they count as unserved and their visited bits are cleared.
    """
    if state.terminal:
        raise RuntimeError("episode already terminal")
    open_route = [v for v in state.current_route if state.instance.is_customer(v)]
    unserved = state.n_unvisited + len(open_route)
    if unserved == 0 or legal_actions(state):
        raise RuntimeError("mark_infeasible requires a dead end with unserved customers")
    penalty = INFEASIBLE_PENALTY_FACTOR * state.instance.fleet_penalty * unserved
    visited = state.visited
    for v in open_route:
        visited &= ~(1 << v)
    new = replace(state, terminal=True, infeasible=True, visited=visited)
    return new, StepOutcome(reward=-penalty, terminal=True, info={"unserved": unserved})


def state_solution(state: EnvState) -> Solution:
    """Re-validated solution for whatever routes the episode has produced."""
    return make_solution(state.instance, state.routes, state.constraints,
                         env_feasible=state.terminal and not state.infeasible)


def run_episode(instance: Instance, constraints: ConstraintSet, actions: Iterable[int],
                start_customer: int | None = None, trace: "TraceWriter | None" = None,
                ) -> tuple[EnvState, list[float]]:
    state = reset(instance, constraints, start_customer)
    rewards = []
    for a in actions:
        state, out = step(state, a)
        rewards.append(out.reward)
        if trace is not None:
            trace.record(state, a, out)
    return state, rewards


def state_digest(state: EnvState) -> dict:
    return {
        "position": state.position,
        "load_used": state.load_used,
        "battery": state.battery,
        "clock": state.clock,
        "visited": state.n_visited,
        "fleet_count": state.fleet_count,
    }


class TraceWriter:
    """JSON-lines episode trace: one record per transition."""

    def __init__(self, path: str | Path):
        self._fh = open(path, "w")

    def record(self, state: EnvState, action: int | None, outcome: StepOutcome) -> None:
        rec = {"state": state_digest(state), "action": action, "reward": outcome.reward,
               "terminal": outcome.terminal}
        self._fh.write(json.dumps(rec) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def replay(instance: Instance, constraints: ConstraintSet, routes: Sequence[Sequence[int]],
           trace: TraceWriter | None = None):
    """Drive the env along given routes (route order matters for nothing but the trace)."""
    actions = [v for r in routes for v in r[1:]]
    return run_episode(instance, constraints, actions, trace=trace)
