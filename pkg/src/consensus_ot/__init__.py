"""Decentralized optimal transport by consensus ADMM.

Targets and sources bargain over transported amounts (:mod:`.primal`) or
over per-edge prices (:mod:`.dual`) until they agree on a plan that
maximizes total utility.
"""

from .errors import (DivergenceError, InstanceError, NonFiniteStateError, OracleError, ParseError,
                     ProtocolError)
from .model import (Edge, LinearEqualityInstance, ProblemInstance, SourceSpec, TargetSpec, Utility,
                    build_instance, check_balance, check_necessity, check_sufficiency, linear,
                    log_revenue, quadratic, threshold, total_surplus, validate_instance)
from .subproblems import ProxProblem, project_simplex, solve_dual_agent, solve_prox
from .primal import PrimalState, StopRule, run_primal, primal_step, unsimplified_step
from .dual import DualState, certify_optimality, check_equivalence, dual_step, run_dual, shift_solution

__version__ = "0.1.0"
