"""Dynamic indifference premiums and Pareto-optimal risk diversification on finite scenario trees."""

from .asymptotics import SweepReport, coin_flip_payoff, expansion_check, large_n_sweep, time_refinement_sweep
from .insurance import (
    Contract,
    HTable,
    InsurancePortfolio,
    expected_claims,
    h_recursion,
    hazard_to_tree,
    premium_closed_form,
)
from .oracle import duality_gap, grid_allocation_search, grid_sup_convolution, pareto_scan
from .preferences import (
    ConvolvedUtility,
    ExponentialMixture,
    ExponentialUtility,
    RiskAversionSchedule,
    Utility,
    conjugate,
    schedule_from_matrix,
    sup_convolution,
)
from .tree import (
    AdaptedProcess,
    ScenarioTree,
    binomial_tree,
    build_tree,
    condexp,
    is_martingale,
    load_tree,
    martingale_differences,
    random_tree,
)
from .valuation import (
    Allocation,
    ValuationResult,
    check_time_consistency,
    dual_objective,
    general_allocation_solve,
    general_premium,
    optimal_allocation,
    premium,
    premium_process,
    residual_allocation,
    utility_U,
    valuate,
    value_process,
)

__version__ = "0.1.0"

__all__ = [
    "AdaptedProcess",
    "Allocation",
    "binomial_tree",
    "build_tree",
    "check_time_consistency",
    "coin_flip_payoff",
    "condexp",
    "conjugate",
    "Contract",
    "ConvolvedUtility",
    "dual_objective",
    "duality_gap",
    "expansion_check",
    "expected_claims",
    "ExponentialMixture",
    "ExponentialUtility",
    "general_allocation_solve",
    "general_premium",
    "grid_allocation_search",
    "grid_sup_convolution",
    "h_recursion",
    "hazard_to_tree",
    "HTable",
    "InsurancePortfolio",
    "is_martingale",
    "large_n_sweep",
    "load_tree",
    "martingale_differences",
    "optimal_allocation",
    "pareto_scan",
    "premium",
    "premium_closed_form",
    "premium_process",
    "random_tree",
    "residual_allocation",
    "RiskAversionSchedule",
    "ScenarioTree",
    "schedule_from_matrix",
    "sup_convolution",
    "SweepReport",
    "time_refinement_sweep",
    "Utility",
    "utility_U",
    "valuate",
    "ValuationResult",
    "value_process",
]
