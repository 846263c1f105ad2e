"""Resilience of Friedkin-Johnsen averaging against misbehaving agents."""

from .analysis import (ErrorModel, build_actual_w, check_prop1, check_theorem1, decomposition, error_derivative,
                       error_terms, gamma_blocks, optimal_lambda, resolvent_l, social_power, steady_state_p)
from .dynamics import MisbehaviorModel, PriorModel, mc_cost, simulate
from .graphs import GraphSpec, Network, from_edges, generate, mark_misbehaving
from .gramian import controllability_gramian, gramian_trace_curve, reachability_index
from .netdesign import DesignObjective, connectivity_sweep, greedy_prune, matching_baseline, worst_case_attacker
from .numerics import NumericalError

__version__ = "0.1.0"
