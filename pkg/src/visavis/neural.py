"""Two-headed residual policy/value network in plain numpy.

Architecture: flattened (3, H, W) input -> dense + ReLU -> ``depth`` residual
blocks (two dense layers, skip connection, ReLU) -> policy logits and a
tanh value.  Training minimises

    mean[(z - v)^2 - pi . log p] + l2_lambda * ||theta||^2

with plain SGD.  Gradients are derived by hand.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .exceptions import CorruptCheckpoint, NonFiniteGradient, ShapeMismatch, VersionMismatch
from .game import GameId, game_spec

LOG_FLOOR = 1e-12
CHECKPOINT_MAGIC = b"VVIS"
CHECKPOINT_VERSION = 1

# Appendix-style per-game defaults: (depth, learning rate)
_GAME_NET_DEFAULTS = {
    GameId.TTT3: (2, 1e-3),
    GameId.TTT4: (4, 1e-4),
    GameId.C4: (4, 1e-4),
}


@dataclass(frozen=True)
class NetConfig:
    input_dims: tuple
    action_count: int
    hidden_width: int = 128
    depth: int = 2
    l2_lambda: float = 1e-4
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        if len(self.input_dims) != 3 or min(self.input_dims) <= 0:
            raise ValueError(f"input_dims must be three positive ints, got {self.input_dims}")
        if self.hidden_width <= 0 or self.depth < 0 or self.action_count <= 0:
            raise ValueError("hidden_width, action_count must be positive and depth >= 0")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be non-negative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")

    @classmethod
    def for_game(cls, game, **overrides):
        spec = game_spec(game)
        depth, lr = _GAME_NET_DEFAULTS[spec.game]
        kwargs = dict(input_dims=(3, spec.height, spec.width), action_count=spec.n_actions,
                      depth=depth, learning_rate=lr)
        kwargs.update(overrides)
        return cls(**kwargs)

    @property
    def input_size(self):
        d = self.input_dims
        return d[0] * d[1] * d[2]

    def tensor_shapes(self):
        """Declared tensor order and shapes; also the checkpoint layout."""
        w, shapes = self.hidden_width, OrderedDict()
        shapes["input.W"] = (self.input_size, w)
        shapes["input.b"] = (w,)
        for i in range(self.depth):
            shapes[f"block{i}.W1"] = (w, w)
            shapes[f"block{i}.b1"] = (w,)
            shapes[f"block{i}.W2"] = (w, w)
            shapes[f"block{i}.b2"] = (w,)
        shapes["policy.W"] = (w, self.action_count)
        shapes["policy.b"] = (self.action_count,)
        shapes["value.W"] = (w, 1)
        shapes["value.b"] = (1,)
        return shapes

    def parameter_count(self):
        return sum(int(np.prod(s)) for s in self.tensor_shapes().values())

    def to_dict(self):
        d = asdict(self)
        d["input_dims"] = list(self.input_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class NetworkParams:
    config: NetConfig
    tensors: OrderedDict
    step: int = 0

    def copy(self):
        return NetworkParams(self.config,
                             OrderedDict((k, v.copy()) for k, v in self.tensors.items()),
                             self.step)

    def astype(self, dtype):
        return NetworkParams(self.config,
                             OrderedDict((k, v.astype(dtype)) for k, v in self.tensors.items()),
                             self.step)

    def __getitem__(self, name):
        return self.tensors[name]

    def l2_norm_sq(self):
        return float(sum(np.sum(np.square(t, dtype=np.float64)) for t in self.tensors.values()))

    def is_finite(self):
        return all(np.isfinite(t).all() for t in self.tensors.values())

    def equals(self, other):
        return (self.config == other.config and self.step == other.step
                and all(np.array_equal(a, b) for a, b in
                        zip(self.tensors.values(), other.tensors.values())))


@dataclass(frozen=True)
class Prediction:
    p: np.ndarray
    v: float


@dataclass
class TrainBatch:
    encodings: np.ndarray
    masks: np.ndarray
    pi: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        self.encodings = np.asarray(self.encodings)
        self.masks = np.asarray(self.masks, dtype=bool)
        self.pi = np.asarray(self.pi, dtype=np.float64)
        self.z = np.asarray(self.z, dtype=np.float64).reshape(-1)
        n = len(self.encodings)
        if n == 0:
            raise ValueError("empty batch")
        if not (len(self.masks) == len(self.pi) == len(self.z) == n):
            raise ShapeMismatch("batch fields have different lengths")

    def __len__(self):
        return len(self.z)


def init(config, dtype=np.float32):
    """Variance-scaled initialisation; deterministic in ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    tensors = OrderedDict()
    for name, shape in config.tensor_shapes().items():
        if name.endswith(".b") or name[-2:] in ("b1", "b2"):
            tensors[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = shape[0]
        # He scaling feeds ReLUs; heads use LeCun scaling
        gain = 2.0 if name.startswith(("input", "block")) else 1.0
        if name.endswith("W2"):
            gain = 1.0
        tensors[name] = (rng.standard_normal(shape) * np.sqrt(gain / fan_in)).astype(dtype)
    return NetworkParams(config, tensors)


def masked_softmax(logits, mask):
    logits = np.where(mask, logits, -np.inf)
    top = np.max(logits, axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(logits - top), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    return e / np.where(total > 0, total, 1.0)


def _check_inputs(params, enc, mask):
    cfg = params.config
    enc = np.asarray(enc)
    if enc.ndim == 3:
        enc = enc[None]
    if enc.shape[1:] != cfg.input_dims:
        raise ShapeMismatch(f"encoding shape {enc.shape[1:]} != {cfg.input_dims}")
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = np.broadcast_to(mask, (len(enc), mask.shape[0]))
    if mask.shape != (len(enc), cfg.action_count):
        raise ShapeMismatch(f"mask shape {mask.shape} != {(len(enc), cfg.action_count)}")
    return enc, mask


def _forward(params, x, keep=False):
    t = params.tensors
    cache = []
    h = np.maximum(x @ t["input.W"] + t["input.b"], 0)
    cache.append(h)
    for i in range(params.config.depth):
        a = np.maximum(h @ t[f"block{i}.W1"] + t[f"block{i}.b1"], 0)
        h = np.maximum(h + a @ t[f"block{i}.W2"] + t[f"block{i}.b2"], 0)
        if keep:
            cache.append(a)
            cache.append(h)
    logits = h @ t["policy.W"] + t["policy.b"]
    v = np.tanh(h @ t["value.W"] + t["value.b"])[:, 0]
    return logits, v, cache


def forward_batch(params, enc, mask):
    """Batched forward pass: returns (p of shape (B, A), v of shape (B,))."""
    enc, mask = _check_inputs(params, enc, mask)
    x = enc.reshape(len(enc), -1).astype(params["input.W"].dtype, copy=False)
    logits, v, _ = _forward(params, x)
    return masked_softmax(logits, mask), v


def forward(params, enc, mask):
    p, v = forward_batch(params, enc, mask)
    return Prediction(p[0], float(v[0]))


def _policy_terms(p, pi, mask):
    usable = mask & (p >= LOG_FLOOR)
    logp = np.log(np.maximum(p, LOG_FLOOR))
    ce = -np.sum(np.where(mask, pi * logp, 0.0), axis=1)
    return ce, usable


def loss(params, batch):
    """Return (total, {'value_mse', 'policy_ce', 'l2'})."""
    total, parts, _ = _loss_and_grads(params, batch, need_grads=False)
    return total, parts


def _loss_and_grads(params, batch, need_grads=True):
    cfg = params.config
    enc, mask = _check_inputs(params, batch.encodings, batch.masks)
    dtype = params["input.W"].dtype
    x = enc.reshape(len(enc), -1).astype(dtype, copy=False)
    logits, v, cache = _forward(params, x, keep=need_grads)
    p = masked_softmax(logits, mask)
    pi = batch.pi.astype(dtype, copy=False)
    z = batch.z.astype(dtype, copy=False)
    n = len(z)
    value_mse = float(np.mean((z - v) ** 2))
    ce, usable = _policy_terms(p, pi, mask)
    policy_ce = float(np.mean(ce))
    l2 = cfg.l2_lambda * params.l2_norm_sq()
    parts = {"value_mse": value_mse, "policy_ce": policy_ce, "l2": l2}
    total = value_mse + policy_ce + l2
    if not need_grads:
        return total, parts, None

    t = params.tensors
    grads = OrderedDict()
    # policy head: d(-sum_{a usable} pi_a log p_a)/d logit_b
    pi_usable = np.where(usable, pi, 0.0)
    g_logits = (p * pi_usable.sum(axis=1, keepdims=True) - pi_usable) / n
    g_vpre = (-2.0 * (z - v) * (1.0 - v * v) / n)[:, None]
    h = cache[-1]
    grads["policy.W"] = h.T @ g_logits
    grads["policy.b"] = g_logits.sum(axis=0)
    grads["value.W"] = h.T @ g_vpre
    grads["value.b"] = g_vpre.sum(axis=0)
    g_h = g_logits @ t["policy.W"].T + g_vpre @ t["value.W"].T
    for i in reversed(range(cfg.depth)):
        h_out, a, h_in = cache[2 * i + 2], cache[2 * i + 1], cache[2 * i]
        g_pre = g_h * (h_out > 0)
        grads[f"block{i}.W2"] = a.T @ g_pre
        grads[f"block{i}.b2"] = g_pre.sum(axis=0)
        g_a = (g_pre @ t[f"block{i}.W2"].T) * (a > 0)
        grads[f"block{i}.W1"] = h_in.T @ g_a
        grads[f"block{i}.b1"] = g_a.sum(axis=0)
        g_h = g_pre + g_a @ t[f"block{i}.W1"].T
    g_pre = g_h * (cache[0] > 0)
    grads["input.W"] = x.T @ g_pre
    grads["input.b"] = g_pre.sum(axis=0)
    lam2 = 2.0 * cfg.l2_lambda
    ordered = OrderedDict()
    for name, tensor in t.items():
        ordered[name] = grads[name] + lam2 * tensor
    return total, parts, ordered


def gradients(params, batch):
    """Exact gradient of :func:`loss` with respect to every tensor."""
    total, parts, grads = _loss_and_grads(params, batch)
    return total, parts, grads


def grad_step(params, batch, opt_state=None):
    """One SGD step.  Returns (new params, stats); ``params`` is not modified.

    ``opt_state`` is accepted for interface symmetry; plain SGD keeps no
    state beyond the step counter stored on the params.
    """
    total, parts, grads = _loss_and_grads(params, batch)
    if not np.isfinite(total):
        bad = next((k for k, v in parts.items() if not np.isfinite(v)), "total")
        raise NonFiniteGradient(f"non-finite loss term {bad}", term=bad)
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for {name}", term=name)
    lr = params.config.learning_rate
    new = OrderedDict()
    for name, tensor in params.tensors.items():
        updated = tensor - (lr * grads[name]).astype(tensor.dtype, copy=False)
        if not np.isfinite(updated).all():
            raise NonFiniteGradient(f"update made {name} non-finite", term=name)
        new[name] = updated
    stats = dict(parts, total=total,
                 grad_norm=float(np.sqrt(sum(np.sum(g.astype(np.float64) ** 2)
                                             for g in grads.values()))))
    return NetworkParams(params.config, new, params.step + 1), stats


# --------------------------------------------------------------------------
# checkpoints
#
# layout: b"VVIS" | u32 version | u64 step | u32 config length | config JSON
#         | little-endian float32 tensors in NetConfig.tensor_shapes() order

_HEAD = struct.Struct("<4sIQI")


def save(params, config, path):
    if config != params.config:
        raise ValueError("config does not match params")
    blob = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.step, len(blob)))
        fh.write(blob)
        for name in config.tensor_shapes():
            fh.write(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
    return path


def load(path):
    data = Path(path).read_bytes()
    if len(data) < _HEAD.size:
        raise CorruptCheckpoint("file shorter than checkpoint header")
    magic, version, step, n = _HEAD.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint("bad magic bytes")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    offset = _HEAD.size
    try:
        config = NetConfig.from_dict(json.loads(data[offset:offset + n].decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CorruptCheckpoint(f"unreadable config block: {exc}") from None
    offset += n
    tensors = OrderedDict()
    for name, shape in config.tensor_shapes().items():
        size = int(np.prod(shape)) * 4
        if offset + size > len(data):
            raise CorruptCheckpoint(f"truncated while reading {name}")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=size // 4,
                                      offset=offset).reshape(shape).astype(np.float32)
        offset += size
    if offset != len(data):
        raise CorruptCheckpoint("trailing bytes after last tensor")
    return NetworkParams(config, tensors, step), config
