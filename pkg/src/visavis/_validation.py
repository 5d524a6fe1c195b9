"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

from .exceptions import ParseError
from .game import GameId, GameState, parse_state, validation_error


def check_states(X, game):
    """Coerce ``X`` (states or state strings) into a list of GameState.

    Raises ValueError for an empty input, a state of another game, or an
    illegal position.
    """
    game = GameId.parse(game)
    if isinstance(X, (str, GameState)):
        X = [X]
    out = []
    for i, item in enumerate(X):
        if isinstance(item, str):
            try:
                item = parse_state(item, game)
            except ParseError as exc:
                raise ValueError(f"X[{i}]: {exc}") from None
        elif not isinstance(item, GameState):
            raise TypeError(f"X[{i}] must be a GameState or state string, "
                            f"got {type(item).__name__}")
        if item.game is not game:
            raise ValueError(f"X[{i}] is a {item.game.value} state, expected {game.value}")
        problem = validation_error(item)
        if problem:
            raise ValueError(f"X[{i}]: {problem}")
        out.append(item)
    if not out:
        raise ValueError("X contains no states")
    return out


def check_targets(y, n):
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(y) != n:
        raise ValueError(f"y has {len(y)} entries for {n} states")
    if np.any(np.abs(y) > 1):
        raise ValueError("value targets must lie in [-1, 1]")
    return y
