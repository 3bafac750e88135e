from __future__ import annotations

from .. import env as E
from ..model import ConstraintSet, Instance, Solution


def _station_choice(state: E.EnvState, stations: list[int]) -> int | None:
    """Station after which some customer becomes legal, cheapest detour first."""
    inst = state.instance
    d = inst.dist_list
    best, best_key = None, None
    for s in stations:
        after, _ = E.step(state, s)
        reachable = [c for c in E.legal_actions(after) if inst.is_customer(c)]
        if not reachable:
            continue
        key = (d[state.position][s] + min(d[s][c] for c in reachable), s)
        if best_key is None or key < best_key:
            best, best_key = s, key
    return best


def greedy_construct(instance: Instance, constraints: ConstraintSet) -> Solution:
    """Nearest feasible customer; recharge when that unlocks a customer, else go home.

    Returns a solution flagged infeasible when the construction gets stuck.
    """
    state = E.reset(instance, constraints)
    d = instance.dist_list
    while not state.terminal:
        legal = E.legal_actions(state)
        customers = [a for a in legal if instance.is_customer(a)]
        if customers:
            action = min(customers, key=lambda c: (d[state.position][c], c))
        else:
            stations = [a for a in legal if instance.is_station(a)]
            action = _station_choice(state, stations) if stations else None
            if action is None:
                if 0 in legal:
                    action = 0
                elif stations:
                    # cannot reach home directly: recharge at the nearest station first
                    action = min(stations, key=lambda s: (d[state.position][s], s))
                else:
                    state, _ = E.mark_infeasible(state)
                    break
        state, _ = E.step(state, action)
    sol = E.state_solution(state)
    sol.meta["method"] = "greedy"
    return sol
