"""Rules, symmetries and tensor encoding for the three supported games.

Boards are stored as two bitboards (one per player).  Cell ``i`` is the bit
``1 << i`` with ``i = row * width + col`` and row 0 at the top.  Connect Four
pieces therefore stack upward from row ``height - 1``.

Outcomes are always reported from player 1's point of view.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .exceptions import IllegalAction, ParseError

EMPTY, P1, P2 = 0, 1, 2
_PIECE_CHARS = {EMPTY: ".", P1: "X", P2: "O"}


class GameId(enum.Enum):
    TTT3 = "ttt3"
    TTT4 = "ttt4"
    C4 = "c4"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ValueError(f"unknown game {name!r}; expected one of "
                             f"{[g.value for g in cls]}") from None


@dataclass(frozen=True)
class GameSpec:
    game: GameId
    height: int
    width: int
    n_actions: int
    line_length: int
    gravity: bool
    lines: tuple
    cell_lines: tuple
    column_cells: tuple

    @property
    def n_cells(self):
        return self.height * self.width

    @property
    def full_mask(self):
        return (1 << self.n_cells) - 1


def _build_lines(h, w, k):
    lines = []
    for r in range(h):
        for c in range(w):
            for dr, dc in ((0, 1), (1, 0), (1, 1), (1, -1)):
                cells = [(r + i * dr, c + i * dc) for i in range(k)]
                if all(0 <= rr < h and 0 <= cc < w for rr, cc in cells):
                    mask = 0
                    for rr, cc in cells:
                        mask |= 1 << (rr * w + cc)
                    lines.append(mask)
    return tuple(lines)


@lru_cache(maxsize=None)
def game_spec(game):
    game = GameId.parse(game)
    h, w, k, gravity = {
        GameId.TTT3: (3, 3, 3, False),
        GameId.TTT4: (4, 4, 4, False),
        GameId.C4: (6, 7, 4, True),
    }[game]
    lines = _build_lines(h, w, k)
    cell_lines = tuple(tuple(m for m in lines if m >> i & 1) for i in range(h * w))
    if gravity:
        column_cells = tuple(
            tuple(1 << (r * w + c) for r in range(h - 1, -1, -1)) for c in range(w))
    else:
        column_cells = ()
    return GameSpec(game, h, w, w if gravity else h * w, k, gravity, lines,
                    cell_lines, column_cells)


@dataclass(frozen=True)
class Outcome:
    """Terminal result, ``z`` in {-1, 0, +1} from player 1's perspective."""

    z: int

    def for_player(self, player):
        return self.z if player == P1 else -self.z


@dataclass(frozen=True, slots=True)
class GameState:
    """Immutable position.  Equality and hashing use the board and mover only."""

    game: GameId
    p1: int = 0
    p2: int = 0
    to_move: int = P1
    ply: int = field(default=0, compare=False)
    winner: int = field(default=EMPTY, compare=False)

    @property
    def spec(self):
        return game_spec(self.game)

    @property
    def key(self):
        return (self.p1, self.p2, self.to_move)

    def cell(self, row, col):
        i = row * self.spec.width + col
        if self.p1 >> i & 1:
            return P1
        if self.p2 >> i & 1:
            return P2
        return EMPTY

    def grid(self):
        spec = self.spec
        out = np.zeros((spec.height, spec.width), dtype=np.int8)
        for i in range(spec.n_cells):
            if self.p1 >> i & 1:
                out.flat[i] = P1
            elif self.p2 >> i & 1:
                out.flat[i] = P2
        return out

    def __str__(self):
        return to_string(self)


def initial_state(game):
    return GameState(GameId.parse(game))


def _winner_of(spec, p1, p2):
    w1 = any(p1 & m == m for m in spec.lines)
    w2 = any(p2 & m == m for m in spec.lines)
    if w1 and w2:
        return None
    return P1 if w1 else P2 if w2 else EMPTY


def is_terminal(s):
    return s.winner != EMPTY or (s.p1 | s.p2) == s.spec.full_mask


def terminal_outcome(s):
    if s.winner == P1:
        return Outcome(1)
    if s.winner == P2:
        return Outcome(-1)
    if (s.p1 | s.p2) == s.spec.full_mask:
        return Outcome(0)
    return None


def mover_outcome(s):
    """Terminal value from the point of view of the player to move, else None."""
    if s.winner:
        return 1 if s.winner == s.to_move else -1
    if (s.p1 | s.p2) == s.spec.full_mask:
        return 0
    return None


def legal_actions(s):
    if is_terminal(s):
        return []
    spec = s.spec
    occupied = s.p1 | s.p2
    if spec.gravity:
        return [c for c in range(spec.width) if not occupied >> c & 1]
    return [i for i in range(spec.n_cells) if not occupied >> i & 1]


def legal_mask(s):
    mask = np.zeros(s.spec.n_actions, dtype=bool)
    mask[legal_actions(s)] = True
    return mask


def _target_cell(s, a):
    spec = s.spec
    occupied = s.p1 | s.p2
    if not 0 <= a < spec.n_actions or is_terminal(s):
        return None
    if spec.gravity:
        for bit in spec.column_cells[a]:
            if not occupied & bit:
                return bit.bit_length() - 1
        return None
    return None if occupied >> a & 1 else a


def apply_action(s, a):
    i = _target_cell(s, int(a))
    if i is None:
        raise IllegalAction(f"action {a} is not legal in {to_string(s)}")
    spec = s.spec
    bit = 1 << i
    if s.to_move == P1:
        p1, p2, mine = s.p1 | bit, s.p2, s.p1 | bit
    else:
        p1, p2, mine = s.p1, s.p2 | bit, s.p2 | bit
    winner = s.to_move if any(mine & m == m for m in spec.cell_lines[i]) else EMPTY
    return GameState(s.game, p1, p2, P2 if s.to_move == P1 else P1, s.ply + 1, winner)


def make_state(game, p1, p2, to_move):
    """Build a state from raw bitboards, validating it."""
    spec = game_spec(game)
    ply = bin(p1).count("1") + bin(p2).count("1")
    winner = _winner_of(spec, p1, p2)
    s = GameState(spec.game, p1, p2, to_move, ply, winner or EMPTY)
    problem = validation_error(s) if winner is not None else "both players have a line"
    if problem:
        raise ParseError(problem)
    return s


def validation_error(s):
    """Return a description of why ``s`` is not a legal position, or None.

    Colour-symmetric: the player to move never has more pieces than the
    opponent, and at most one more is allowed for the opponent.  This admits
    the colour-inverted images of ordinary positions.
    """
    spec = s.spec
    if s.p1 & s.p2:
        return "overlapping pieces"
    if (s.p1 | s.p2) & ~spec.full_mask:
        return "pieces outside the board"
    if s.to_move not in (P1, P2):
        return "invalid player to move"
    n1, n2 = bin(s.p1).count("1"), bin(s.p2).count("1")
    mine, theirs = (n1, n2) if s.to_move == P1 else (n2, n1)
    if theirs - mine not in (0, 1):
        return "piece counts inconsistent with player to move"
    if s.ply != n1 + n2:
        return "ply does not match piece count"
    winner = _winner_of(spec, s.p1, s.p2)
    if winner is None:
        return "both players have a line"
    if winner != s.winner:
        return "cached winner is stale"
    if winner and winner == s.to_move:
        return "player to move has already won"
    if spec.gravity:
        occupied = s.p1 | s.p2
        for col in spec.column_cells:
            seen_gap = False
            for bit in col:
                if occupied & bit:
                    if seen_gap:
                        return "floating piece"
                else:
                    seen_gap = True
    return None


def to_string(s):
    spec = s.spec
    rows = []
    for r in range(spec.height):
        rows.append("".join(_PIECE_CHARS[s.cell(r, c)] for c in range(spec.width)))
    return "/".join(rows) + " " + _PIECE_CHARS[s.to_move]


def parse_state(text, game=None):
    """Inverse of :func:`to_string`; infers the game from board dimensions."""
    try:
        board, mover = text.strip().split(" ")
    except ValueError:
        raise ParseError(f"expected '<rows> <X|O>', got {text!r}") from None
    rows = board.split("/")
    dims = (len(rows), len(rows[0]) if rows else 0)
    if game is None:
        by_dims = {(3, 3): GameId.TTT3, (4, 4): GameId.TTT4, (6, 7): GameId.C4}
        if dims not in by_dims:
            raise ParseError(f"no game has a {dims[0]}x{dims[1]} board")
        game = by_dims[dims]
    spec = game_spec(game)
    if dims != (spec.height, spec.width) or any(len(r) != spec.width for r in rows):
        raise ParseError(f"board shape does not match {spec.game.value}")
    if mover not in ("X", "O"):
        raise ParseError(f"mover must be X or O, got {mover!r}")
    p1 = p2 = 0
    for i, ch in enumerate("".join(rows)):
        if ch == "X":
            p1 |= 1 << i
        elif ch == "O":
            p2 |= 1 << i
        elif ch != ".":
            raise ParseError(f"unexpected character {ch!r}")
    return make_state(spec.game, p1, p2, P1 if mover == "X" else P2)


# --------------------------------------------------------------------------
# symmetries

_SQUARE_MAPS = {
    "id": lambda r, c, n: (r, c),
    "rot90": lambda r, c, n: (c, n - 1 - r),
    "rot180": lambda r, c, n: (n - 1 - r, n - 1 - c),
    "rot270": lambda r, c, n: (n - 1 - c, r),
    "flip_h": lambda r, c, n: (r, n - 1 - c),
    "flip_v": lambda r, c, n: (n - 1 - r, c),
    "transpose": lambda r, c, n: (c, r),
    "anti_transpose": lambda r, c, n: (n - 1 - c, n - 1 - r),
}
_DIHEDRAL_INVERSE = {"rot90": "rot270", "rot270": "rot90"}


@dataclass(frozen=True)
class TransformId:
    dihedral: str = "id"
    invert: bool = False

    @property
    def is_identity(self):
        return self.dihedral == "id" and not self.invert

    def inverse(self):
        return TransformId(_DIHEDRAL_INVERSE.get(self.dihedral, self.dihedral), self.invert)

    def __str__(self):
        return self.dihedral + ("+invert" if self.invert else "")


IDENTITY = TransformId()


def _spatial_names(game):
    return ("id", "flip_h") if game_spec(game).gravity else tuple(_SQUARE_MAPS)


def symmetry_group(game):
    """Non-identity symmetries in a fixed order: spatial-major, invert-minor."""
    out = []
    for name in _spatial_names(game):
        for inv in (False, True):
            t = TransformId(name, inv)
            if not t.is_identity:
                out.append(t)
    return out


@lru_cache(maxsize=None)
def cell_permutation(game, dihedral):
    """``perm[i]`` is the cell that cell ``i`` moves to."""
    spec = game_spec(game)
    if dihedral not in _spatial_names(spec.game):
        raise ValueError(f"{dihedral!r} is not a symmetry of {spec.game.value}")
    h, w = spec.height, spec.width
    if spec.gravity:
        fn = (lambda r, c: (r, c)) if dihedral == "id" else (lambda r, c: (r, w - 1 - c))
    else:
        fn = lambda r, c: _SQUARE_MAPS[dihedral](r, c, h)  # noqa: E731
    perm = []
    for i in range(h * w):
        rr, cc = fn(i // w, i % w)
        perm.append(rr * w + cc)
    return tuple(perm)


@lru_cache(maxsize=None)
def _byte_tables(game, dihedral):
    # one lookup table per 8-cell chunk of the bitboard
    perm = cell_permutation(game, dihedral)
    n = len(perm)
    tables = []
    for base in range(0, n, 8):
        table = []
        for byte in range(256):
            out = 0
            for j in range(8):
                if byte >> j & 1 and base + j < n:
                    out |= 1 << perm[base + j]
            table.append(out)
        tables.append(tuple(table))
    return tuple(tables)


def _permute_bits(bits, tables):
    out = 0
    for table in tables:
        out |= table[bits & 0xFF]
        bits >>= 8
    return out


def apply_transform(s, t):
    if t.dihedral == "id":
        p1, p2 = s.p1, s.p2
    else:
        tables = _byte_tables(s.game, t.dihedral)
        p1, p2 = _permute_bits(s.p1, tables), _permute_bits(s.p2, tables)
    winner, to_move = s.winner, s.to_move
    if t.invert:
        p1, p2 = p2, p1
        to_move = P2 if to_move == P1 else P1
        winner = {EMPTY: EMPTY, P1: P2, P2: P1}[winner]
    return GameState(s.game, p1, p2, to_move, s.ply, winner)


@lru_cache(maxsize=None)
def transform_action_map(game, t):
    """Permutation array ``m`` with ``m[a]`` the image of action ``a`` under ``t``."""
    spec = game_spec(game)
    perm = cell_permutation(spec.game, t.dihedral)
    if spec.gravity:
        # columns map as the bottom row does
        bottom = (spec.height - 1) * spec.width
        out = [perm[bottom + c] - bottom for c in range(spec.width)]
    else:
        out = list(perm)
    arr = np.asarray(out, dtype=np.intp)
    arr.setflags(write=False)
    return arr


# --------------------------------------------------------------------------
# encoding

def encode(s):
    """(3, H, W) float32 planes: player-1 pieces, player-2 pieces, turn."""
    return encode_batch([s])[0]


def encode_batch(states):
    if not states:
        raise ValueError("encode_batch needs at least one state")
    spec = states[0].spec
    n = spec.n_cells
    shifts = np.arange(n, dtype=np.uint64)
    p1 = np.fromiter((s.p1 for s in states), dtype=np.uint64, count=len(states))
    p2 = np.fromiter((s.p2 for s in states), dtype=np.uint64, count=len(states))
    out = np.empty((len(states), 3, n), dtype=np.float32)
    out[:, 0] = (p1[:, None] >> shifts) & np.uint64(1)
    out[:, 1] = (p2[:, None] >> shifts) & np.uint64(1)
    out[:, 2] = np.array([s.to_move == P1 for s in states], dtype=np.float32)[:, None]
    return out.reshape(len(states), 3, spec.height, spec.width)


def legal_mask_batch(states):
    return np.stack([legal_mask(s) for s in states])
