"""Relative-performance investment games on graphons: finite-n and continuum equilibria,
BSDE numerics, and propagation-of-chaos experiments."""

from .errors import (CapabilityError, ConsistencyError, ConstraintViolation, ConvergenceError,
                     DomainError, ExperimentError, GraphonInvestError, InfeasibleError,
                     ParameterError, RefinementRequired)
from .graphon import (AffineMean, Constant, InteractionGraph, Min, Product, StepGraphon,
                      complete_graph, cut_norm, cut_norm_to_graphon, empty_graph, eval_graphon,
                      normalized_weights, project_step, sample_admissible_graph,
                      sample_interaction_graph)
from .market import (AgentCoeffs, Ball, Box, FullSpace, HalfSpace, NormalXi, Orthant, TimeGrid,
                     project, simulate_wealth, utility, varsigma)
from .fixed_point_finite import (FiniteEquilibrium, best_response_oracle, gamma0_and_value,
                                 phi_map, psi_map, solve_equilibrium_det)
from .bsde import BsdeProblem, baseline_y0, solve_bsde_lsmc, solve_bsde_ode
from .graphon_game import (GraphonEquilibrium, LabelGrid, picard_graphon_bsde,
                           picard_graphon_fbsde_small_time, solve_graphon_equilibrium_det)
from .chaos_lab import BetaConstant, BetaPower, ChaosConfig, ChaosReport, run_experiment
from .indifference import (IndifferenceResult, indifference_bisection,
                           indifference_capital_finite, indifference_capital_graphon)

__version__ = "0.1.0"
