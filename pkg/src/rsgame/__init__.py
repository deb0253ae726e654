"""Risk-sensitive zero-sum games on finite continuous-time Markov chains.

Discounted values come from the HJI equation in the risk parameter, ergodic
values from normalized finite-horizon marching; :mod:`rsgame.ctmc` holds the
simulation and verification tools.
"""

__version__ = "0.1.0"

from .errors import RSGameError
from .model import (
    GameModel,
    LyapunovCertificate,
    StrategyProfile,
    bilinear_cost,
    bilinear_rate,
    check_lyapunov,
    check_small_cost,
    truncate_cost,
    validate,
)
from .matrix_game import solve_matrix_game, solve_matrix_games
from .hamiltonian import hamiltonian_eval, stage_matrix
from .discounted import extract_markov_policy, refine_epsilon, solve_discounted
from .ergodic import march_finite_horizon, perron_value, solve_ergodic, verify_saddle
from .model_io import load_model, save_model

__all__ = [
    "GameModel",
    "LyapunovCertificate",
    "RSGameError",
    "StrategyProfile",
    "bilinear_cost",
    "bilinear_rate",
    "check_lyapunov",
    "check_small_cost",
    "extract_markov_policy",
    "hamiltonian_eval",
    "load_model",
    "march_finite_horizon",
    "perron_value",
    "refine_epsilon",
    "save_model",
    "solve_discounted",
    "solve_ergodic",
    "solve_matrix_game",
    "solve_matrix_games",
    "stage_matrix",
    "truncate_cost",
    "validate",
    "verify_saddle",
]
