"""AlphaZero with value-informed selection and symmetric augmentation,
plus exact-oracle evaluation for three solved board games."""

from .estimator import AlphaZeroEstimator
from .game import GameId, GameState, apply_action, initial_state, legal_actions, parse_state
from .oracle import SolveBudget, SolveResult, solve

__all__ = ["AlphaZeroEstimator", "GameId", "GameState", "SolveBudget", "SolveResult",
           "apply_action", "initial_state", "legal_actions", "parse_state", "solve"]
__version__ = "0.1.0"
