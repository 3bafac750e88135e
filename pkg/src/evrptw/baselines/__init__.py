"""Non-learned references: exact branch and bound, VNS and a greedy constructor."""

from .exact import ExactResult, exact_solve
from .greedy import greedy_construct
from .vns import VNSConfig, vns_solve

__all__ = ["ExactResult", "VNSConfig", "exact_solve", "greedy_construct", "vns_solve"]
