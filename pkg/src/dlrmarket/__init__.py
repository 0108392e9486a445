"""Market clearing under dynamic line ratings.

Conductor thermal limits from weather, chance-constrained DC optimal power
flow as second-order cone programs, and the energy, reserve and emission
prices read off the solution.
"""
from .analysis import (
    best_response_multi,
    best_response_single,
    emissions,
    equilibrium_check,
    lme,
    monte_carlo_validate,
)
from .errors import DLRMarketError
from .grid import SystemCase, import_matpower, load_case, ptdf
from .market_multi import MultiPeriodConfig, successive_linearization
from .market_single import SinglePeriodConfig, solve_single
from .thermal import (
    ConductorSpec,
    WeatherSample,
    evolution_coefficients,
    integrate_transient,
    steady_state_rating,
    step_temperature,
)
from .uncertainty import AmbientErrorModel, assemble_covariance, sensitivities

__version__ = "0.1.0"


def covariance_for(case):
    """Joint covariance of a case from its own weather and error model."""
    return assemble_covariance(case.ambient, sensitivities(case), case.rating_std_override)


__all__ = [
    "AmbientErrorModel", "ConductorSpec", "DLRMarketError", "MultiPeriodConfig", "SinglePeriodConfig",
    "SystemCase", "WeatherSample", "assemble_covariance", "best_response_multi", "best_response_single",
    "covariance_for", "emissions", "equilibrium_check", "evolution_coefficients", "import_matpower",
    "integrate_transient", "lme", "load_case", "monte_carlo_validate", "ptdf", "sensitivities",
    "solve_single", "steady_state_rating", "step_temperature", "successive_linearization",
]
