"""Exact game-tree values by negamax with a transposition table.

Values are from the point of view of the player to move.  Among optimal
moves the solver prefers the fastest win and the slowest loss, so
``plies_to_end`` is the length of the game under mutually optimal play.
A depth bound (``max_plies``) turns the solver into an endgame prover: a
position is resolved only if its optimal continuation ends within the bound.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import BudgetExceeded, LimitExceeded, VersionMismatch, CorruptCheckpoint
from .game import (P1, P2, GameId, apply_action, game_spec, is_terminal, initial_state,
                   legal_actions, mover_outcome)

DEFAULT_ENDGAME_PLIES = 6


@dataclass(frozen=True)
class SolveResult:
    value: int
    best_actions: tuple
    plies_to_end: int | None = None


@dataclass(frozen=True)
class SolveBudget:
    max_nodes: int = 10_000_000
    max_plies: int | None = None

    def __post_init__(self):
        if self.max_nodes <= 0:
            raise ValueError("max_nodes must be positive")
        if self.max_plies is not None and self.max_plies < 0:
            raise ValueError("max_plies must be non-negative")


def _rank(value, plies):
    # total order on (value, plies) from the mover's side
    if value > 0:
        return (2, -plies)
    if value < 0:
        return (0, plies)
    return (1, 0)


class Solver:
    """Negamax solver for one game with a reusable memo table.

    The memo key is the raw board plus the player to move.  Exact entries are
    true game values and stay valid under any depth bound; "unknown" entries
    remember the deepest bound at which a position failed to resolve.
    """

    def __init__(self, game):
        self.spec = game_spec(game)
        self.game = self.spec.game
        self.exact = {}
        self.unknown = {}
        self.nodes = 0
        self._max_nodes = None

    # -- move generation on raw bitboards ----------------------------------
    def _moves(self, occupied):
        spec = self.spec
        if spec.gravity:
            out = []
            for c, col in enumerate(spec.column_cells):
                for bit in col:
                    if not occupied & bit:
                        out.append((c, bit.bit_length() - 1))
                        break
            return out
        return [(i, i) for i in range(spec.n_cells) if not occupied >> i & 1]

    def _search(self, me, opp, mover, depth):
        """Return (value, plies) or None if unresolved within ``depth`` plies."""
        key = (me, opp, mover) if mover == P1 else (opp, me, mover)
        hit = self.exact.get(key)
        if hit is not None:
            return hit if hit[1] <= depth else None
        if self.unknown.get(key, -1) >= depth:
            return None
        if depth == 0:
            self.unknown[key] = 0
            return None
        self.nodes += 1
        if self.nodes > self._max_nodes:
            raise BudgetExceeded(f"node budget {self._max_nodes} exhausted", )
        spec = self.spec
        occupied = me | opp
        moves = self._moves(occupied)
        # immediate wins first: nothing beats winning now
        for _, cell in moves:
            mine = me | (1 << cell)
            if any(mine & m == m for m in spec.cell_lines[cell]):
                self.exact[key] = (1, 1)
                return (1, 1)
        best = None
        unresolved = False
        limit = depth
        other = P2 if mover == P1 else P1
        for _, cell in moves:
            mine = me | (1 << cell)
            if (mine | opp) == spec.full_mask:
                child = (0, 0)
            else:
                child = self._search(opp, mine, other, limit - 1)
            if child is None:
                unresolved = True
                continue
            cand = (-child[0], child[1] + 1)
            if best is None or _rank(*cand) > _rank(*best):
                best = cand
                if cand[0] > 0:
                    # only strictly faster wins can improve on this one
                    limit = cand[1] - 1
        if best is not None and (best[0] > 0 or not unresolved):
            self.exact[key] = best
            return best
        self.unknown[key] = depth
        return None

    def solve(self, s, budget=SolveBudget()):
        """Exact value and every optimal action of ``s``."""
        if s.game is not self.game:
            raise ValueError("state belongs to a different game")
        terminal = mover_outcome(s)
        if terminal is not None:
            return SolveResult(terminal, (), 0)
        depth = budget.max_plies if budget.max_plies is not None else self.spec.n_cells
        self.nodes = 0
        self._max_nodes = budget.max_nodes
        me, opp = (s.p1, s.p2) if s.to_move == P1 else (s.p2, s.p1)
        other = P2 if s.to_move == P1 else P1
        spec = self.spec
        children = []
        limit = depth
        for action, cell in self._moves(me | opp):
            mine = me | (1 << cell)
            if any(mine & m == m for m in spec.cell_lines[cell]):
                child = (-1, 0)
            elif (mine | opp) == spec.full_mask:
                child = (0, 0)
            else:
                child = self._search(opp, mine, other, limit - 1)
            children.append((action, child))
            if child is not None and child[0] < 0:
                # later children only matter if they win at least as fast
                limit = min(limit, child[1] + 1)
        known = [(a, (-c[0], c[1] + 1)) for a, c in children if c is not None]
        if not known:
            raise BudgetExceeded(f"no exact value within {depth} plies", )
        best = max(_rank(*r) for _, r in known)
        best_val = next(r for _, r in known if _rank(*r) == best)
        if best_val[0] <= 0 and len(known) < len(children):
            raise BudgetExceeded(f"no exact value within {depth} plies")
        actions = tuple(a for a, r in known if _rank(*r) == best)
        return SolveResult(best_val[0], actions, best_val[1])

    def value(self, s, budget=SolveBudget()):
        return self.solve(s, budget).value

    # -- persistence --------------------------------------------------------
    def save(self, path):
        save_memo(self, path)

    def load(self, path):
        load_memo(self, path)
        return self


_default_solvers = {}


def solver_for(game):
    """Process-wide solver instance (memo shared across calls) for ``game``."""
    game = GameId.parse(game)
    if game not in _default_solvers:
        _default_solvers[game] = Solver(game)
    return _default_solvers[game]


def solve(s, budget=SolveBudget(), solver=None):
    return (solver or solver_for(s.game)).solve(s, budget)


def _ply_lower_bound(s):
    """Sound lower bound on the number of plies before ``s`` can end."""
    spec = s.spec
    occupied = s.p1 | s.p2
    bound = spec.n_cells - bin(occupied).count("1")
    for player, mine, theirs in ((P1, s.p1, s.p2), (P2, s.p2, s.p1)):
        missing = min((bin(m & ~mine).count("1") for m in spec.lines if not m & theirs),
                      default=None)
        if missing is None:
            continue
        plies = 2 * missing - 1 if player == s.to_move else 2 * missing
        bound = min(bound, plies)
    return bound


def is_endgame(s, k=DEFAULT_ENDGAME_PLIES, budget=SolveBudget(), solver=None):
    """True iff the exact value of ``s`` is provable with ``plies_to_end <= k``."""
    if is_terminal(s):
        return True
    if _ply_lower_bound(s) > k:
        return False
    bounded = SolveBudget(budget.max_nodes, k if budget.max_plies is None
                          else min(k, budget.max_plies))
    solver = solver or solver_for(s.game)
    try:
        result = solver.solve(s, bounded)
    except BudgetExceeded:
        if solver.nodes > bounded.max_nodes:
            raise
        return False
    return result.plies_to_end <= k


def enumerate_reachable(game, limit=10_000_000):
    """Breadth-first stream of every state reachable from the empty board.

    Terminal states are yielded but not expanded.  Raises LimitExceeded once
    more than ``limit`` distinct states have been discovered.
    """
    start = initial_state(game)
    seen = {start}
    frontier = deque([start])
    while frontier:
        s = frontier.popleft()
        yield s
        for a in legal_actions(s):
            child = apply_action(s, a)
            if child not in seen:
                seen.add(child)
                if len(seen) > limit:
                    raise LimitExceeded(f"more than {limit} reachable states")
                frontier.append(child)


def minimax_value(s):
    """Memo-free reference minimax returning (value, plies) for the mover."""
    terminal = mover_outcome(s)
    if terminal is not None:
        return terminal, 0
    best = None
    for a in legal_actions(s):
        v, p = minimax_value(apply_action(s, a))
        cand = (-v, p + 1)
        if best is None or _rank(*cand) > _rank(*best):
            best = cand
    return best


# --------------------------------------------------------------------------
# on-disk memo cache

MEMO_MAGIC = b"VVMC"
MEMO_VERSION = 1
_GAME_CODES = {GameId.TTT3: 0, GameId.TTT4: 1, GameId.C4: 2}
_RECORD = np.dtype([("p1", "<u8"), ("p2", "<u8"), ("mover", "u1"),
                    ("value", "i1"), ("plies", "u1")])
_HEADER = struct.Struct("<4sIIQ")


def save_memo(solver, path):
    items = list(solver.exact.items())
    records = np.empty(len(items), dtype=_RECORD)
    for i, ((p1, p2, mover), (value, plies)) in enumerate(items):
        records[i] = (p1, p2, mover, value, plies)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MEMO_MAGIC, MEMO_VERSION, _GAME_CODES[solver.game], len(items)))
        fh.write(records.tobytes())


def load_memo(solver, path):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CorruptCheckpoint("memo file too short")
    magic, version, code, count = _HEADER.unpack_from(data)
    if magic != MEMO_MAGIC:
        raise CorruptCheckpoint("bad memo magic")
    if version != MEMO_VERSION:
        raise VersionMismatch(f"memo version {version}, expected {MEMO_VERSION}")
    if code != _GAME_CODES[solver.game]:
        raise ValueError("memo file belongs to a different game")
    body = data[_HEADER.size:]
    if len(body) != count * _RECORD.itemsize:
        raise CorruptCheckpoint("memo file truncated")
    records = np.frombuffer(body, dtype=_RECORD)
    for r in records:
        solver.exact[(int(r["p1"]), int(r["p2"]), int(r["mover"]))] = (int(r["value"]), int(r["plies"]))
