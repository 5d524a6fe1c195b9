"""scikit-learn style wrapper around self-play training.

>>> est = AlphaZeroEstimator(game="ttt3", num_games=200, seed=0).fit()
>>> est.predict(["X../.O./... X"])          # doctest: +SKIP
array([...])

``fit`` runs self-play; ``predict`` returns the most-visited search move,
``predict_value`` the network value for the player to move and
``predict_proba`` the network's masked policy.  ``score`` is the negated
mean squared value error against the exact oracle, so higher is better.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import neural
from ._validation import check_states, check_targets
from .game import GameId, encode_batch, is_terminal, legal_mask_batch
from .oracle import SolveBudget, solver_for
from .search import NetEvaluator, SearchConfig, run_searches, search_policy
from .selfplay import TrainRunConfig, VisaConfig, VisConfig, train


class AlphaZeroEstimator(BaseEstimator):
    """AlphaZero, optionally with value-informed selection (``vis``) and
    value-informed symmetric augmentation (``visa``).

    Parameters left as ``None`` take the per-game defaults.
    """

    def __init__(self, game="ttt3", num_games=20_000, vis=False, visa=False, epsilon=0.5,
                 lookahead_sign="negated", n_sims=None, c=2.0, tau_drop_ply=None,
                 dirichlet_alpha=None, batch_size=None, learning_rate=None, depth=None,
                 width=128, l2_lambda=1e-4, replay_reuse=None, games_per_round=32, seed=0):
        self.game = game
        self.num_games = num_games
        self.vis = vis
        self.visa = visa
        self.epsilon = epsilon
        self.lookahead_sign = lookahead_sign
        self.n_sims = n_sims
        self.c = c
        self.tau_drop_ply = tau_drop_ply
        self.dirichlet_alpha = dirichlet_alpha
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.depth = depth
        self.width = width
        self.l2_lambda = l2_lambda
        self.replay_reuse = replay_reuse
        self.games_per_round = games_per_round
        self.seed = seed

    def _run_config(self):
        game = GameId.parse(self.game)
        search = {k: v for k, v in (("n_sims", self.n_sims), ("tau_drop_ply", self.tau_drop_ply),
                                    ("dirichlet_alpha", self.dirichlet_alpha)) if v is not None}
        overrides = dict(num_games=self.num_games, width=self.width, l2_lambda=self.l2_lambda,
                         seed=self.seed, games_per_round=self.games_per_round,
                         search=SearchConfig.for_game(game, c=self.c, **search),
                         vis=VisConfig(self.vis, self.epsilon, self.lookahead_sign),
                         visa=VisaConfig(self.visa))
        for name in ("batch_size", "learning_rate", "depth", "replay_reuse"):
            if getattr(self, name) is not None:
                overrides[name] = getattr(self, name)
        return TrainRunConfig.for_game(game, **overrides)

    def fit(self, X=None, y=None):
        """Train by self-play.  ``X`` and ``y`` are ignored."""
        cfg = self._run_config()
        result = train(cfg)
        self.game_ = cfg.game
        self.run_config_ = cfg
        self.params_ = result.params
        self.metrics_ = result.metrics
        self.visit_counts_ = result.visit_counts
        self.n_games_played_ = result.games_played
        return self

    def _states(self, X):
        check_is_fitted(self, "params_")
        return check_states(X, self.game_)

    def predict(self, X):
        states = self._states(X)
        if any(is_terminal(s) for s in states):
            raise ValueError("cannot choose a move in a terminal state")
        trees = run_searches(states, NetEvaluator(self.params_), self.run_config_.search)
        return np.array([int(np.argmax(search_policy(t, 0.0))) for t in trees])

    def predict_proba(self, X):
        states = self._states(X)
        p, _ = neural.forward_batch(self.params_, encode_batch(states), legal_mask_batch(states))
        return p

    def predict_value(self, X):
        states = self._states(X)
        _, v = neural.forward_batch(self.params_, encode_batch(states), legal_mask_batch(states))
        return v.astype(np.float64)

    def score(self, X, y=None):
        states = self._states(X)
        if y is None:
            solver = solver_for(self.game_)
            y = [solver.solve(s, SolveBudget()).value for s in states]
        y = check_targets(y, len(states))
        return -float(np.mean((y - self.predict_value(states)) ** 2))
