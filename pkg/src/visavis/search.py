"""PUCT Monte-Carlo tree search.

Values stored on an edge are from the point of view of the player choosing
that edge.  The network's value is relative to the player to move at the
evaluated state, so it is negated once per ply on the way back up.

Bookkeeping: the first simulation only expands and evaluates the root, so
after ``n_sims`` simulations the root's edge visits sum to ``n_sims - 1``.
Several independent trees can be searched in lockstep so that their leaf
evaluations share one batched network call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import EmptyVisits, TerminalRoot
from .game import apply_action, encode_batch, is_terminal, legal_actions, legal_mask_batch, \
    mover_outcome, to_string
from .neural import forward_batch

# per-game defaults: simulations and ply at which the temperature drops
_SEARCH_DEFAULTS = {"ttt3": (25, 5), "ttt4": (25, 9), "c4": (50, 21)}


@dataclass(frozen=True)
class SearchConfig:
    n_sims: int = 25
    c: float = 2.0
    tau: float = 1.0
    tau_drop_ply: int = 5
    dirichlet_alpha: float | None = None
    dirichlet_fraction: float = 0.25

    def __post_init__(self):
        if self.n_sims <= 0:
            raise ValueError("n_sims must be positive")
        if self.c <= 0:
            raise ValueError("c must be positive")
        if self.tau < 0:
            raise ValueError("tau must be non-negative")

    @classmethod
    def for_game(cls, game, **overrides):
        from .game import GameId
        n_sims, drop = _SEARCH_DEFAULTS[GameId.parse(game).value]
        kwargs = dict(n_sims=n_sims, tau_drop_ply=drop)
        kwargs.update(overrides)
        return cls(**kwargs)


class NetEvaluator:
    """Evaluates states with one fixed parameter snapshot, memoising results.

    Returns for each state a prior vector over the full action space and the
    value for the player to move.  Terminal states are never sent here.
    """

    def __init__(self, params, cache=True):
        self.params = params
        self.cache = {} if cache else None
        self.calls = 0
        self.evaluated = 0

    def __call__(self, states):
        if self.cache is None:
            return self._run(states)
        todo, seen = [], set()
        for s in states:
            if s not in self.cache and s not in seen:
                seen.add(s)
                todo.append(s)
        if todo:
            for s, out in zip(todo, self._run(todo)):
                self.cache[s] = out
        return [self.cache[s] for s in states]

    def _run(self, states):
        self.calls += 1
        self.evaluated += len(states)
        p, v = forward_batch(self.params, encode_batch(states), legal_mask_batch(states))
        return [(p[i], float(v[i])) for i in range(len(states))]

    def value(self, states):
        return [out[1] for out in self(states)]


class Node:
    __slots__ = ("state", "actions", "P", "N", "W", "children", "total")

    def __init__(self, state):
        self.state = state
        self.actions = None
        self.P = self.N = self.W = self.children = None
        self.total = 0

    @property
    def expanded(self):
        return self.actions is not None

    def expand(self, prior):
        self.actions = legal_actions(self.state)
        p = [float(prior[a]) for a in self.actions]
        norm = sum(p)
        if norm > 0:
            self.P = [x / norm for x in p]
        else:
            self.P = [1.0 / len(p)] * len(p)
        k = len(self.actions)
        self.N = [0] * k
        self.W = [0.0] * k
        self.children = [None] * k

    def Q(self, i):
        return self.W[i] / self.N[i] if self.N[i] else 0.0

    def edge_stats(self):
        """List of (action, N, W, Q, P) rows."""
        return [(a, self.N[i], self.W[i], self.Q(i), self.P[i])
                for i, a in enumerate(self.actions)]


class _Terminal:
    __slots__ = ("state", "value")

    def __init__(self, state, value):
        self.state = state
        self.value = value


@dataclass
class SearchTree:
    root: Node
    n_sims: int = 0

    def visit_counts(self, n_actions=None):
        n_actions = n_actions or self.root.state.spec.n_actions
        counts = np.zeros(n_actions, dtype=np.int64)
        if self.root.expanded:
            counts[self.root.actions] = self.root.N
        return counts

    def root_q(self, n_actions=None):
        n_actions = n_actions or self.root.state.spec.n_actions
        q = np.zeros(n_actions)
        for i, a in enumerate(self.root.actions):
            q[a] = self.root.Q(i)
        return q


def select_edge(node, c):
    """Index into ``node.actions`` maximising Q + U.

    Ties go to the higher prior, then to the lower action index.
    """
    sqrt_total = math.sqrt(node.total)
    P, N, W = node.P, node.N, node.W
    best, best_score, best_p = 0, -math.inf, -1.0
    for i in range(len(P)):
        n = N[i]
        score = (W[i] / n if n else 0.0) + c * P[i] * sqrt_total / (1 + n)
        if score > best_score or (score == best_score and P[i] > best_p):
            best, best_score, best_p = i, score, P[i]
    return best


def _add_root_noise(node, cfg, rng):
    noise = rng.dirichlet([cfg.dirichlet_alpha] * len(node.P))
    f = cfg.dirichlet_fraction
    node.P = [(1 - f) * p + f * float(n) for p, n in zip(node.P, noise)]


def run_searches(states, evaluator, cfg, rngs=None):
    """Search every root in ``states`` in lockstep; returns one tree per root."""
    for s in states:
        if is_terminal(s):
            raise TerminalRoot(f"cannot search from terminal state {to_string(s)}")
    trees = [SearchTree(Node(s)) for s in states]
    c = cfg.c
    for sim in range(cfg.n_sims):
        pending = []  # (tree, path, leaf node)
        for tree in trees:
            node = tree.root
            path = []
            if node.expanded:
                while True:
                    i = select_edge(node, c)
                    path.append((node, i))
                    child = node.children[i]
                    if child is None:
                        st = apply_action(node.state, node.actions[i])
                        v = mover_outcome(st)
                        if v is not None:
                            child = node.children[i] = _Terminal(st, v)
                        else:
                            child = node.children[i] = Node(st)
                    if isinstance(child, _Terminal):
                        _backup(path, child.value)
                        break
                    if not child.expanded:
                        pending.append((tree, path, child))
                        break
                    node = child
            else:
                pending.append((tree, path, node))
            tree.n_sims = sim + 1
        if pending:
            outs = evaluator([leaf.state for _, _, leaf in pending])
            for (tree, path, leaf), (prior, v) in zip(pending, outs):
                leaf.expand(prior)
                if not path and cfg.dirichlet_alpha and rngs is not None:
                    _add_root_noise(leaf, cfg, rngs[trees.index(tree)])
                _backup(path, v)
    return trees


def _backup(path, v):
    for node, i in reversed(path):
        v = -v
        node.N[i] += 1
        node.W[i] += v
        node.total += 1


def run_search(s, params, cfg, rng=None, evaluator=None):
    evaluator = evaluator or NetEvaluator(params)
    return run_searches([s], evaluator, cfg, None if rng is None else [rng])[0]


def search_policy(tree_or_counts, tau):
    """Visit-count policy N^(1/tau) / sum N^(1/tau); tau=0 is argmax."""
    if isinstance(tree_or_counts, SearchTree):
        counts = tree_or_counts.visit_counts()
    else:
        counts = np.asarray(tree_or_counts)
    counts = counts.astype(np.float64)
    if counts.sum() <= 0:
        raise EmptyVisits("no root edge has been visited")
    if tau == 0:
        out = np.zeros_like(counts)
        out[int(np.argmax(counts))] = 1.0
        return out
    if tau == 1:
        return counts / counts.sum()
    # work in log space so large counts and small tau do not overflow
    with np.errstate(divide="ignore"):
        logits = np.log(counts) / tau
    logits -= logits.max()
    w = np.where(counts > 0, np.exp(logits), 0.0)
    return w / w.sum()


def dump_tree(tree):
    """Structured text dump: one line per edge, nodes numbered breadth-first."""
    lines = []
    queue = [tree.root]
    ids = {id(tree.root): 0}
    while queue:
        node = queue.pop(0)
        nid = ids[id(node)]
        lines.append(f"node {nid} {to_string(node.state)}")
        if not getattr(node, "actions", None):
            continue
        for i, a in enumerate(node.actions):
            child = node.children[i]
            cid = "-"
            if child is not None:
                cid = ids.setdefault(id(child), len(ids))
                if isinstance(child, Node):
                    queue.append(child)
            lines.append(f"  edge a={a} N={node.N[i]} W={node.W[i]:.6f} Q={node.Q(i):.6f} "
                         f"P={node.P[i]:.6f} child={cid}")
    return "\n".join(lines)
