"""Evaluation against the exact oracle.

Covers oracle matches, exhaustive value-error / misalignment sweeps,
visitation-binned generalisation error, and adversarial endgame detection.
Value errors are squared differences in [0, 4] between the oracle value and
the network value, both relative to the player to move.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .exceptions import BudgetExceeded, DistributionMismatch
from .game import (GameId, apply_action, initial_state, is_terminal, legal_actions,
                   terminal_outcome, to_string)
from .neural import LOG_FLOOR
from .oracle import DEFAULT_ENDGAME_PLIES, SolveBudget, Solver, enumerate_reachable, \
    is_endgame, solver_for
from .search import NetEvaluator, SearchConfig, run_searches, search_policy
from .selfplay import value_policies

log = logging.getLogger(__name__)

HIST_EDGES = (0.0, 0.25, 0.5, 1.0, 2.0, 3.0, 3.5, 4.0)
VISIT_BINS = (("0", 0, 0), ("1-10", 1, 10), ("11-100", 11, 100),
              ("101-1000", 101, 1000), (">1000", 1001, None))
DETECTION_THRESHOLD = 1.0


@dataclass(frozen=True)
class EvalRecord:
    state_key: str
    oracle_value: int
    predicted_v: float
    value_error: float
    misalignment: float
    visit_count: int = 0
    raw_misalignment: float | None = None


@dataclass(frozen=True)
class AdversarialStateRecord:
    state_key: str
    value_error: float
    misalignment: float
    discovered_in_game: int
    oracle_value: int = 0
    predicted_v: float = 0.0


@dataclass(frozen=True)
class ErrorHistogram:
    edges: tuple
    counts: tuple
    share_gt_1: float
    share_gt_3: float
    share_gt_3_5: float


def misalignment(pi_p, pi_v):
    """KL(pi_p || pi_v) with pi_v floored; zero-probability pi_p terms drop out."""
    pi_p = np.asarray(pi_p, dtype=np.float64)
    pi_v = np.asarray(pi_v, dtype=np.float64)
    if pi_p.shape != pi_v.shape:
        raise DistributionMismatch(f"shapes differ: {pi_p.shape} vs {pi_v.shape}")
    for name, d in (("pi_p", pi_p), ("pi_v", pi_v)):
        if (d < 0).any() or abs(d.sum() - 1.0) > 1e-6:
            raise DistributionMismatch(f"{name} is not normalised")
    nz = pi_p > 0
    return float(np.sum(pi_p[nz] * (np.log(pi_p[nz]) - np.log(np.maximum(pi_v[nz], LOG_FLOOR)))))


def value_error(oracle_value, predicted):
    return float((oracle_value - predicted) ** 2)


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def exhaustive_eval(params, game, visit_table=None, search_cfg=None, budget=SolveBudget(),
                    solver=None, chunk=512):
    """One record per reachable non-terminal state, in breadth-first order."""
    game = GameId.parse(game)
    visit_table = visit_table or {}
    search_cfg = search_cfg or SearchConfig.for_game(game)
    solver = solver or solver_for(game)
    states = [s for s in enumerate_reachable(game) if not is_terminal(s)]
    ev = NetEvaluator(params)
    records = []
    for part in _chunks(states, chunk):
        oracle = [solver.solve(s, budget).value for s in part]
        trees = run_searches(part, ev, search_cfg)
        pvs = value_policies(part, ev, "negated")
        net = ev(part)
        for s, o, tree, pi_v, (p_raw, v) in zip(part, oracle, trees, pvs, net):
            pi_p = search_policy(tree, 1.0)
            key = to_string(s)
            records.append(EvalRecord(key, o, v, value_error(o, v), misalignment(pi_p, pi_v),
                                      int(visit_table.get(key, 0)),
                                      misalignment(p_raw / p_raw.sum(), pi_v)))
    return records


def generalization_report(records):
    """Mean error per visit-count bin; a bin with no states reports None."""
    if not records:
        raise ValueError("no records")
    bins = {}
    for name, lo, hi in VISIT_BINS:
        errs = [r.value_error for r in records
                if r.visit_count >= lo and (hi is None or r.visit_count <= hi)]
        bins[name] = {"count": len(errs), "mean_error": float(np.mean(errs)) if errs else None}
    return {"bins": bins, "generalization_error": bins["0"]["mean_error"]}


def summarize(records):
    if not records:
        raise ValueError("no records")
    errors = np.array([r.value_error for r in records])
    counts, _ = np.histogram(np.clip(errors, 0.0, 4.0), bins=HIST_EDGES)
    hist = ErrorHistogram(HIST_EDGES, tuple(int(c) for c in counts),
                          float(np.mean(errors > 1.0)), float(np.mean(errors > 3.0)),
                          float(np.mean(errors > 3.5)))
    return {"histogram": hist, "n": len(records), "mean_error": float(errors.mean()),
            "mean_misalignment": float(np.mean([r.misalignment for r in records]))}


# --------------------------------------------------------------------------
# matches against the oracle

def oracle_match(params, game, n_games, agent_moves_first, rng, search_cfg=None,
                 solver=None, agent=None):
    """Tally win/draw/loss for the agent over ``n_games`` against the oracle.

    The agent searches and plays the most-visited move.  The oracle picks
    uniformly among its optimal moves.  Passing ``agent="oracle"`` makes
    both sides the oracle.
    """
    game = GameId.parse(game)
    search_cfg = search_cfg or SearchConfig.for_game(game)
    solver = solver or solver_for(game)
    ev = NetEvaluator(params) if agent != "oracle" else None
    agent_player = 1 if agent_moves_first else 2
    states = [initial_state(game)] * n_games
    active = list(range(n_games))
    while active:
        agent_turn = {i for i in active if states[i].to_move == agent_player}
        if agent_turn and ev is not None:
            turn = sorted(agent_turn)
            trees = run_searches([states[i] for i in turn], ev, search_cfg)
            for i, tree in zip(turn, trees):
                states[i] = apply_action(states[i], int(np.argmax(search_policy(tree, 0.0))))
        for i in active:
            if (i in agent_turn and ev is not None) or is_terminal(states[i]):
                continue
            best = solver.solve(states[i]).best_actions
            states[i] = apply_action(states[i], int(best[rng.integers(len(best))]))
        active = [i for i in active if not is_terminal(states[i])]
    tally = Counter()
    for s in states:
        z = terminal_outcome(s).for_player(agent_player)
        tally["win" if z > 0 else "loss" if z < 0 else "draw"] += 1
    return {k: tally.get(k, 0) for k in ("win", "draw", "loss")}


# --------------------------------------------------------------------------
# adversarial detection

def min_probability_action(pi, legal, rng):
    """Legal action with the smallest probability; ties broken uniformly."""
    vals = np.asarray([pi[a] for a in legal])
    lowest = [a for a, v in zip(legal, vals) if v == vals.min()]
    return int(lowest[rng.integers(len(lowest))]) if len(lowest) > 1 else int(lowest[0])


def adversarial_detect(params, game, n_games, budget=SolveBudget(max_nodes=200_000), rng=None,
                       k=DEFAULT_ENDGAME_PLIES, search_cfg=None, solver=None,
                       threshold=DETECTION_THRESHOLD, batch=64):
    """Force min-probability play and collect badly evaluated endgame states.

    Returns (records, stats).  Records are unique by state key, keeping the
    first game in which a state was found.
    """
    game = GameId.parse(game)
    rng = rng if rng is not None else np.random.default_rng(0)
    search_cfg = search_cfg or SearchConfig.for_game(game)
    solver = solver or Solver(game)
    ev = NetEvaluator(params)
    checked = {}
    found = {}
    stats = Counter()
    for first in range(0, n_games, batch):
        ids = list(range(first, min(n_games, first + batch)))
        states = {i: initial_state(game) for i in ids}
        while states:
            order = sorted(states)
            roots = [states[i] for i in order]
            trees = run_searches(roots, ev, search_cfg)
            pvs = value_policies(roots, ev, "negated")
            preds = ev(roots)
            for i, s, tree, pi_v, (_, v) in zip(order, roots, trees, pvs, preds):
                stats["states_seen"] += 1
                pi = search_policy(tree, 1.0)
                key = to_string(s)
                if key not in checked:
                    checked[key] = _endgame_value(s, solver, budget, k, stats)
                oracle = checked[key]
                if oracle is not None and key not in found:
                    e = value_error(oracle, v)
                    if e > threshold:
                        found[key] = AdversarialStateRecord(key, e, misalignment(pi, pi_v), i,
                                                            oracle, v)
                legal = legal_actions(s)
                a = min_probability_action(pi, legal, rng)
                if a not in legal:  # pragma: no cover - guarded by construction
                    raise AssertionError("illegal adversarial move")
                nxt = apply_action(s, a)
                if is_terminal(nxt):
                    del states[i]
                else:
                    states[i] = nxt
    stats["unique_states_checked"] = len(checked)
    stats["endgame_states"] = sum(v is not None for v in checked.values())
    return sorted(found.values(), key=lambda r: (r.discovered_in_game, r.state_key)), dict(stats)


def _endgame_value(s, solver, budget, k, stats):
    try:
        if not is_endgame(s, k, budget, solver):
            return None
        return solver.solve(s, SolveBudget(budget.max_nodes, k)).value
    except BudgetExceeded:
        stats["budget_exceeded"] += 1
        log.info("oracle budget exceeded on %s; skipped", to_string(s))
        return None


# --------------------------------------------------------------------------
# reports

def _jsonable(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return {k: _jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def write_records(path, records):
    """One JSON object per line."""
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(_jsonable(r), sort_keys=True) + "\n")


def read_records(path, cls=EvalRecord):
    with open(path) as fh:
        return [cls(**json.loads(line)) for line in fh if line.strip()]


def write_summary(path, summary):
    Path(path).write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
