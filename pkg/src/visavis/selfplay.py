"""Self-play, value-informed selection/augmentation and the training loop."""

from __future__ import annotations

import json
import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import neural
from .exceptions import DistributionMismatch
from .game import (GameId, P1, apply_action, apply_transform, encode_batch, game_spec,
                   initial_state, is_terminal, legal_actions, legal_mask, mover_outcome,
                   symmetry_group, terminal_outcome, to_string, transform_action_map)
from .neural import NetConfig, TrainBatch
from .search import NetEvaluator, SearchConfig, run_searches, search_policy

log = logging.getLogger(__name__)

POLICY, VALUE = "policy", "value"

# per-game training defaults: (num_games, batch_size)
_TRAIN_DEFAULTS = {
    GameId.TTT3: (500_000, 64),
    GameId.TTT4: (1_750_000, 128),
    GameId.C4: (7_500_000, 256),
}


@dataclass(frozen=True)
class VisConfig:
    enabled: bool = False
    epsilon: float = 0.5
    lookahead_sign: str = "negated"

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.lookahead_sign not in ("negated", "literal"):
            raise ValueError("lookahead_sign must be 'negated' or 'literal'")


@dataclass(frozen=True)
class VisaConfig:
    enabled: bool = False
    transform_set: tuple | None = None

    def transforms(self, game):
        ts = tuple(self.transform_set) if self.transform_set else tuple(symmetry_group(game))
        if not ts:
            raise ValueError("VISA needs at least one transform")
        return ts


@dataclass(frozen=True)
class TrainRunConfig:
    game: GameId
    num_games: int
    batch_size: int
    learning_rate: float
    depth: int
    width: int = 128
    l2_lambda: float = 1e-4
    search: SearchConfig = field(default_factory=SearchConfig)
    vis: VisConfig = field(default_factory=VisConfig)
    visa: VisaConfig = field(default_factory=VisaConfig)
    seed: int = 0
    replay_capacity: int = 65_536
    replay_reuse: float = 30.0
    games_per_round: int = 32
    checkpoint_every: int = 0
    out_dir: str | None = None

    @classmethod
    def for_game(cls, game, **overrides):
        game = GameId.parse(game)
        num_games, batch = _TRAIN_DEFAULTS[game]
        net = NetConfig.for_game(game)
        kwargs = dict(game=game, num_games=num_games, batch_size=batch,
                      learning_rate=net.learning_rate, depth=net.depth,
                      search=SearchConfig.for_game(game))
        kwargs.update(overrides)
        return cls(**kwargs)

    def net_config(self):
        spec = game_spec(self.game)
        return NetConfig((3, spec.height, spec.width), spec.n_actions, hidden_width=self.width,
                         depth=self.depth, l2_lambda=self.l2_lambda,
                         learning_rate=self.learning_rate, seed=self.seed)


# --------------------------------------------------------------------------
# replay

@dataclass
class ReplayEntry:
    state: object
    encoding: np.ndarray
    mask: np.ndarray
    pi_target: np.ndarray
    z_target: float
    origin: object = None  # None for original rows, else the TransformId applied

    @property
    def state_key(self):
        return to_string(self.state)

    @property
    def augmented(self):
        return self.origin is not None

    @property
    def fixed_outcome(self):
        """Outcome target expressed from player 1's perspective."""
        return self.z_target if self.state.to_move == P1 else -self.z_target


class ReplayBuffer:
    """Fixed-capacity FIFO ring with uniform sampling."""

    def __init__(self, capacity=65_536):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items = []
        self._head = 0  # index of the oldest item once full

    def __len__(self):
        return len(self._items)

    def push(self, entry):
        if len(self._items) < self.capacity:
            self._items.append(entry)
        else:
            self._items[self._head] = entry
            self._head = (self._head + 1) % self.capacity

    def extend(self, entries):
        for e in entries:
            self.push(e)

    def entries(self):
        """Entries oldest first."""
        return self._items[self._head:] + self._items[:self._head]

    def sample(self, batch_size, rng):
        n = len(self._items)
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        rows = [self._items[i] for i in idx]
        return TrainBatch(np.stack([r.encoding for r in rows]),
                          np.stack([r.mask for r in rows]),
                          np.stack([r.pi_target for r in rows]),
                          np.array([r.z_target for r in rows], dtype=np.float64))


# --------------------------------------------------------------------------
# value-informed selection

def _softmax_on(u, mask):
    out = np.zeros(len(mask))
    vals = u[mask]
    e = np.exp(vals - vals.max())
    out[mask] = e / e.sum()
    return out


def value_policies(states, evaluator, sign="negated"):
    """One-step value lookahead policy for each state (batched)."""
    succ, where = [], []
    per_state = []
    for s in states:
        rows = []
        for a in legal_actions(s):
            child = apply_action(s, a)
            terminal = mover_outcome(child)
            if terminal is None:
                where.append((len(per_state), len(rows)))
                succ.append(child)
                rows.append([a, None])
            else:
                rows.append([a, float(terminal)])
        if not rows:
            raise ValueError(f"no legal actions in {to_string(s)}")
        per_state.append(rows)
    if succ:
        for (i, j), v in zip(where, evaluator.value(succ)):
            per_state[i][j][1] = v
    out = []
    for s, rows in zip(states, per_state):
        n = s.spec.n_actions
        u = np.zeros(n)
        mask = np.zeros(n, dtype=bool)
        for a, v in rows:
            u[a] = -v if sign == "negated" else v
            mask[a] = True
        out.append(_softmax_on(u, mask))
    return out


def value_policy(s, params_or_evaluator, sign="negated"):
    """pi_v(a|s) = softmax over legal a of the (sign-adjusted) successor value."""
    ev = _as_evaluator(params_or_evaluator)
    return value_policies([s], ev, sign)[0]


def _as_evaluator(obj):
    return obj if isinstance(obj, NetEvaluator) else NetEvaluator(obj)


def vis_select(pi_p, pi_v, cfg, rng):
    """Sample from pi_p with probability epsilon, otherwise from pi_v."""
    pi_p = np.asarray(pi_p, dtype=np.float64)
    pi_v = np.asarray(pi_v, dtype=np.float64)
    if pi_p.shape != pi_v.shape:
        raise DistributionMismatch("distributions cover different action spaces")
    for name, d in (("pi_p", pi_p), ("pi_v", pi_v)):
        if abs(d.sum() - 1.0) > 1e-6 or (d < 0).any():
            raise DistributionMismatch(f"{name} is not a probability vector")
    if ((pi_p > 0) & (pi_v <= 0)).any():
        raise DistributionMismatch("pi_p puts mass outside the support of pi_v")
    eta = rng.random()
    if eta < cfg.epsilon:
        return int(rng.choice(len(pi_p), p=pi_p)), POLICY
    return int(rng.choice(len(pi_v), p=pi_v)), VALUE


# --------------------------------------------------------------------------
# value-informed symmetric augmentation

def _entry(state, pi, z, origin=None):
    return ReplayEntry(state, encode_batch([state])[0], legal_mask(state),
                       np.asarray(pi, dtype=np.float32), float(z), origin)


def permute_policy(pi, game, t):
    mapping = transform_action_map(game, t)
    out = np.zeros_like(np.asarray(pi))
    out[mapping] = pi
    return out


def visa_choose(s, evaluator, transforms):
    """Transform whose image has the largest squared value deviation from ``s``."""
    images = [apply_transform(s, t) for t in transforms]
    values = evaluator.value([s] + images)
    base = values[0]
    dev = [(base - v) ** 2 for v in values[1:]]
    best = int(np.argmax(dev))  # first maximum wins ties
    return transforms[best], images[best], dev


def visa_augment(s, params_or_evaluator, pi_target, z_target, cfg):
    """Return [original entry, most value-uncertain symmetric image].

    ``z_target`` is relative to the player to move.  A colour inversion keeps
    the mover's situation intact, so the mover-relative target carries over
    unchanged while the fixed-perspective outcome flips sign.
    """
    if not cfg.enabled:
        raise ValueError("VISA is disabled in this configuration")
    ev = _as_evaluator(params_or_evaluator)
    t, image, _ = visa_choose(s, ev, cfg.transforms(s.game))
    original = _entry(s, pi_target, z_target)
    augmented = _entry(image, permute_policy(pi_target, s.game, t), z_target, origin=t)
    return [original, augmented]


# --------------------------------------------------------------------------
# self-play

@dataclass
class Step:
    state: object
    pi_p: np.ndarray        # policy used for play (temperature applied)
    pi_target: np.ndarray   # visit distribution stored as the policy target
    pi_v: np.ndarray
    branch: str
    action: int


@dataclass
class Trajectory:
    steps: list
    outcome: object = None

    def __len__(self):
        return len(self.steps)


def play_games(evaluator, cfg, rngs, starts=None):
    """Play ``len(rngs)`` self-play games in lockstep against one snapshot."""
    n = len(rngs)
    states = list(starts) if starts is not None else [initial_state(cfg.game)] * n
    trajs = [Trajectory([]) for _ in range(n)]
    active = [i for i in range(n) if not is_terminal(states[i])]
    scfg = cfg.search
    while active:
        roots = [states[i] for i in active]
        trees = run_searches(roots, evaluator, scfg, [rngs[i] for i in active])
        pvs = value_policies(roots, evaluator, cfg.vis.lookahead_sign)
        still = []
        for i, tree, pi_v in zip(active, trees, pvs):
            s = states[i]
            counts = tree.visit_counts()
            pi_target = search_policy(counts, 1.0)
            tau = scfg.tau if s.ply < scfg.tau_drop_ply else 0.0
            pi_p = search_policy(counts, tau)
            if cfg.vis.enabled:
                a, branch = vis_select(pi_p, pi_v, cfg.vis, rngs[i])
            else:
                a, branch = int(rngs[i].choice(len(pi_p), p=pi_p)), POLICY
            trajs[i].steps.append(Step(s, pi_p, pi_target, pi_v, branch, a))
            states[i] = apply_action(s, a)
            if is_terminal(states[i]):
                trajs[i].outcome = terminal_outcome(states[i])
            else:
                still.append(i)
        active = still
    return trajs


def play_game(params, cfg, rng):
    return play_games(_as_evaluator(params), cfg, [rng])[0]


def finalize_targets(trajectory, evaluator=None, visa=None):
    """Replay rows for one finished game (two per step when VISA is on)."""
    out = []
    use_visa = visa is not None and visa.enabled
    for step in trajectory.steps:
        z = trajectory.outcome.for_player(step.state.to_move)
        if use_visa:
            out.extend(visa_augment(step.state, evaluator, step.pi_target, z, visa))
        else:
            out.append(_entry(step.state, step.pi_target, z))
    return out


def _finalize_many(trajs, evaluator, visa):
    """Batched equivalent of calling finalize_targets on each trajectory."""
    if not (visa and visa.enabled):
        return [finalize_targets(t) for t in trajs]
    steps = [(t, st) for t in trajs for st in t.steps]
    game = trajs[0].steps[0].state.game
    transforms = visa.transforms(game)
    # warm the evaluator cache in one call
    evaluator([img for _, st in steps
               for img in [st.state] + [apply_transform(st.state, tf) for tf in transforms]
               if not is_terminal(img)])
    return [finalize_targets(t, evaluator, visa) for t in trajs]


# --------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    params: neural.NetworkParams
    metrics: list
    visit_counts: Counter
    games_played: int
    halted: str | None = None


METRIC_FIELDS = ("games_played", "loss_total", "value_mse", "policy_ce", "l2", "wall_seconds")


def _game_rng(seed, index):
    return np.random.default_rng([int(seed), 0, int(index)])


def train(cfg, params=None, on_round=None):
    """Alternate lockstep self-play rounds and SGD on the replay buffer."""
    net_cfg = cfg.net_config()
    params = params if params is not None else neural.init(net_cfg)
    buffer = ReplayBuffer(cfg.replay_capacity)
    sample_rng = np.random.default_rng([int(cfg.seed), 1])
    visits = Counter()
    metrics = []
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    games = 0
    halted = None
    next_ckpt = cfg.checkpoint_every or None
    while games < cfg.num_games:
        n = min(cfg.games_per_round, cfg.num_games - games)
        evaluator = NetEvaluator(params)
        trajs = play_games(evaluator, cfg, [_game_rng(cfg.seed, games + i) for i in range(n)])
        rows = _finalize_many(trajs, evaluator, cfg.visa)
        for t in trajs:
            for st in t.steps:
                visits[to_string(st.state)] += 1
        fresh = 0
        for r in rows:
            buffer.extend(r)
            fresh += len(r)
        games += n
        results = Counter(t.outcome.z for t in trajs)
        parts = {"loss_total": [], "value_mse": [], "policy_ce": [], "l2": []}
        if len(buffer) >= cfg.batch_size:
            steps = max(1, int(round(fresh * cfg.replay_reuse / cfg.batch_size)))
            for _ in range(steps):
                batch = buffer.sample(cfg.batch_size, sample_rng)
                try:
                    params, stats = neural.grad_step(params, batch)
                except neural.NonFiniteGradient as exc:
                    halted = f"NonFiniteGradient: {exc}"
                    log.error("training halted after %d games: %s", games, exc)
                    break
                parts["loss_total"].append(stats["total"])
                for k in ("value_mse", "policy_ce", "l2"):
                    parts[k].append(stats[k])
        row = {"games_played": games}
        for k, vals in parts.items():
            row[k] = float(np.mean(vals)) if vals else None
        row["wall_seconds"] = round(time.perf_counter() - start, 3)
        row.update(grad_steps=len(parts["loss_total"]), buffer_size=len(buffer),
                   p1_wins=results.get(1, 0), draws=results.get(0, 0),
                   p2_wins=results.get(-1, 0), mean_length=float(np.mean([len(t) for t in trajs])))
        metrics.append(row)
        if out_dir:
            with open(out_dir / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        if on_round:
            on_round(row, params)
        if out_dir and next_ckpt and games >= next_ckpt:
            neural.save(params, params.config, out_dir / f"checkpoint_{games:09d}.vvis")
            next_ckpt += cfg.checkpoint_every
        if halted:
            break
    if out_dir:
        neural.save(params, params.config, out_dir / "final.vvis")
        save_visit_table(visits, out_dir / "visits.tsv")
    return TrainResult(params, metrics, visits, games, halted)


def save_visit_table(visits, path):
    with open(path, "w") as fh:
        for key in sorted(visits):
            fh.write(f"{key}\t{visits[key]}\n")


def load_visit_table(path):
    out = Counter()
    with open(path) as fh:
        for line in fh:
            key, count = line.rstrip("\n").split("\t")
            out[key] = int(count)
    return out
