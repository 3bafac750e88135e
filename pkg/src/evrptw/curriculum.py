"""Epoch -> phase -> (constraint set, phase hyperparameters)."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

from .model import ConstraintSet


class PhaseId(enum.IntEnum):
    A = 0
    B = 1
    C = 2


@dataclass(frozen=True)
class Schedule:
    boundary_ab: int = 10
    boundary_bc: int = 20
    # pinning a phase disables the curriculum (the flat PPO baseline pins C)
    pinned: PhaseId | None = None

    def __post_init__(self):
        if not 0 < self.boundary_ab < self.boundary_bc:
            raise ValueError("need 0 < boundary_ab < boundary_bc")
        if self.pinned is not None:
            pinned = PhaseId[self.pinned] if isinstance(self.pinned, str) else PhaseId(self.pinned)
            object.__setattr__(self, "pinned", pinned)

    def phase_span(self, phase: PhaseId, total_epochs: int) -> tuple[int, int]:
        """First epoch and one-past-last epoch of ``phase`` in a run of ``total_epochs``."""
        if self.pinned is not None:
            return (0, total_epochs) if phase == self.pinned else (0, 0)
        bounds = {
            PhaseId.A: (0, self.boundary_ab),
            PhaseId.B: (self.boundary_ab, self.boundary_bc),
            PhaseId.C: (self.boundary_bc, max(total_epochs, self.boundary_bc)),
        }
        return bounds[phase]


NO_CURRICULUM = Schedule(pinned=PhaseId.C)

PHASE_ENTROPY = {PhaseId.A: 0.02, PhaseId.B: 0.01, PhaseId.C: 0.005}

_CONSTRAINTS = {
    PhaseId.A: ConstraintSet(capacity=True, battery=False, time_windows=False),
    PhaseId.B: ConstraintSet(capacity=True, battery=True, time_windows=False),
    PhaseId.C: ConstraintSet(capacity=True, battery=True, time_windows=True),
}


def phase_for_epoch(k: int, schedule: Schedule = Schedule()) -> PhaseId:
    if k < 0:
        raise ValueError("epoch must be non-negative")
    if schedule.pinned is not None:
        return schedule.pinned
    if k < schedule.boundary_ab:
        return PhaseId.A
    if k < schedule.boundary_bc:
        return PhaseId.B
    return PhaseId.C


def constraint_set(phase: PhaseId) -> ConstraintSet:
    return _CONSTRAINTS[PhaseId(phase)]


def hyperparams_for_phase(phase: PhaseId, base):
    """Overlay phase defaults onto a PPO config; explicitly set values win."""
    if base.entropy_coef is not None:
        return base
    return replace(base, entropy_coef=PHASE_ENTROPY[PhaseId(phase)])
