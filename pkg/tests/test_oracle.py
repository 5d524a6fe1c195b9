from collections import deque

import numpy as np
import pytest

from visavis.exceptions import BudgetExceeded, CorruptCheckpoint, LimitExceeded, VersionMismatch
from visavis.game import (P1, GameId, apply_action, apply_transform, initial_state, legal_actions,
                          mover_outcome, parse_state, symmetry_group)
from visavis.oracle import (SolveBudget, Solver, enumerate_reachable, is_endgame, load_memo,
                            minimax_value, save_memo, solve)


def _lines3():
    rows = [[r * 3 + c for c in range(3)] for r in range(3)]
    cols = [[r * 3 + c for r in range(3)] for c in range(3)]
    return rows + cols + [[0, 4, 8], [2, 4, 6]]


LINES3 = _lines3()


def list_winner(board):
    for line in LINES3:
        a, b, c = (board[i] for i in line)
        if a and a == b == c:
            return a
    return 0


def list_negamax(board, mover, memo):
    """Reference negamax over plain tuples; independent of the bitboard code."""
    key = (board, mover)
    if key in memo:
        return memo[key]
    w = list_winner(board)
    if w:
        out = 1 if w == mover else -1
    elif all(board):
        out = 0
    else:
        out = max(-list_negamax(board[:i] + (mover,) + board[i + 1:], 3 - mover, memo)
                  for i in range(9) if not board[i])
    memo[key] = out
    return out


def list_enumerate():
    """Depth-first recount of reachable TTT3 positions."""
    seen = set()
    stack = [((0,) * 9, 1)]
    terminal = 0
    while stack:
        board, mover = stack.pop()
        if (board, mover) in seen:
            continue
        seen.add((board, mover))
        if list_winner(board) or all(board):
            terminal += 1
            continue
        for i in range(9):
            if not board[i]:
                stack.append((board[:i] + (mover,) + board[i + 1:], 3 - mover))
    return len(seen), terminal


def as_tuple(s):
    return tuple(int(x) for x in s.grid().reshape(-1))


@pytest.fixture(scope="module")
def ttt3_states():
    return list(enumerate_reachable("ttt3"))


def test_enumeration_counts(ttt3_states):
    assert len(ttt3_states) == 5478
    terminal = sum(mover_outcome(s) is not None for s in ttt3_states)
    assert terminal == 958 and len(ttt3_states) - terminal == 4520
    assert list_enumerate() == (5478, 958)
    assert len({s for s in ttt3_states if s.ply == 1}) == 9


def test_solver_matches_reference_everywhere(ttt3_states):
    solver = Solver("ttt3")
    memo = {}
    for s in ttt3_states:
        ref = list_negamax(as_tuple(s), s.to_move, memo)
        assert solver.solve(s).value == ref


def test_negamax_consistency(ttt3_states):
    solver = Solver("ttt3")
    for s in ttt3_states:
        if mover_outcome(s) is not None:
            continue
        res = solver.solve(s)
        children = {a: solver.solve(apply_action(s, a)).value for a in legal_actions(s)}
        assert res.value == -min(children.values())
        assert all(-children[a] == res.value for a in res.best_actions)


def test_symmetry_invariance(ttt3_states):
    solver = Solver("ttt3")
    for s in ttt3_states[::7]:
        base = solver.solve(s).value
        fixed = base if s.to_move == P1 else -base
        for t in symmetry_group("ttt3"):
            image = apply_transform(s, t)
            v = solver.solve(image).value
            fixed_img = v if image.to_move == P1 else -v
            assert fixed_img == (-fixed if t.invert else fixed)


def test_memo_free_minimax_agrees_on_sample(ttt3_states):
    solver = Solver("ttt3")
    rng = np.random.default_rng(0)
    for i in rng.choice(len(ttt3_states), 300, replace=False):
        s = ttt3_states[i]
        r = solver.solve(s)
        assert (r.value, r.plies_to_end) == minimax_value(s)


def test_examples():
    res = solve(initial_state("ttt3"))
    assert res.value == 0 and res.plies_to_end == 9 and set(res.best_actions) == set(range(9))
    win = parse_state("XX./OO./... X")
    r = solve(win)
    assert r.value == 1 and r.best_actions == (2,) and r.plies_to_end == 1
    assert solve(parse_state("XXX/OO./... O")).value == -1


def test_is_endgame_examples():
    assert is_endgame(parse_state("XX./OO./... X"), k=1)
    assert not is_endgame(initial_state("c4"), k=6)
    assert is_endgame(parse_state("XOX/XOO/OX. X"), k=1)
    assert not is_endgame(initial_state("ttt3"), k=6)


def test_depth_bounded_solve_raises():
    with pytest.raises(BudgetExceeded):
        solve(initial_state("ttt3"), SolveBudget(max_plies=4), Solver("ttt3"))
    with pytest.raises(BudgetExceeded):
        Solver("c4").solve(initial_state("c4"), SolveBudget(max_nodes=1000))


def test_c4_enumeration_limit():
    with pytest.raises(LimitExceeded):
        for _ in enumerate_reachable("c4", limit=20_000):
            pass


def test_c4_late_positions_match_minimax():
    rng = np.random.default_rng(5)
    solver = Solver("c4")
    checked = 0
    while checked < 20:
        s = initial_state("c4")
        while s.ply < 36 and mover_outcome(s) is None:
            acts = legal_actions(s)
            s = apply_action(s, acts[rng.integers(len(acts))])
        if mover_outcome(s) is not None:
            continue
        r = solver.solve(s)
        assert (r.value, r.plies_to_end) == minimax_value(s)
        checked += 1


def test_memo_roundtrip(tmp_path):
    solver = Solver("ttt3")
    solver.solve(initial_state("ttt3"))
    path = tmp_path / "memo.bin"
    save_memo(solver, path)
    other = Solver("ttt3")
    load_memo(other, path)
    assert other.exact == solver.exact
    data = bytearray(path.read_bytes())
    data[4] = 9
    (tmp_path / "v.bin").write_bytes(bytes(data))
    with pytest.raises(VersionMismatch):
        load_memo(Solver("ttt3"), tmp_path / "v.bin")
    (tmp_path / "t.bin").write_bytes(path.read_bytes()[:-3])
    with pytest.raises(CorruptCheckpoint):
        load_memo(Solver("ttt3"), tmp_path / "t.bin")


def test_bfs_is_deduplicated():
    states = list(enumerate_reachable(GameId.TTT3))
    assert len(states) == len(set(states))
    queue = deque(states)
    assert queue[0] == initial_state("ttt3")
