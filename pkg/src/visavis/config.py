"""Run configuration: per-game profiles, JSON files and flag overrides."""

from __future__ import annotations

import json
import os
from dataclasses import fields
from pathlib import Path

from .exceptions import ConfigInvalid
from .game import GameId
from .search import SearchConfig
from .selfplay import TrainRunConfig, VisaConfig, VisConfig

# flat key -> (type, where it lives)
_KEYS = {
    "game": (str, "run"),
    "num_games": (int, "run"),
    "batch_size": (int, "run"),
    "learning_rate": (float, "run"),
    "depth": (int, "run"),
    "width": (int, "run"),
    "l2_lambda": (float, "run"),
    "seed": (int, "run"),
    "replay_capacity": (int, "run"),
    "replay_reuse": (float, "run"),
    "games_per_round": (int, "run"),
    "checkpoint_every": (int, "run"),
    "n_sims": (int, "search"),
    "c": (float, "search"),
    "tau": (float, "search"),
    "tau_drop_ply": (int, "search"),
    "dirichlet_alpha": (float, "search"),
    "dirichlet_fraction": (float, "search"),
    "vis": (bool, "vis"),
    "epsilon": (float, "vis"),
    "lookahead_sign": (str, "vis"),
    "visa": (bool, "visa"),
}


def _coerce(key, value):
    typ = _KEYS[key][0]
    if value is None and key == "dirichlet_alpha":
        return None
    if typ is bool:
        if isinstance(value, bool):
            return value
        text = str(value).lower()
        if text in ("on", "true", "1", "yes"):
            return True
        if text in ("off", "false", "0", "no"):
            return False
        raise ValueError(f"expected on/off, got {value!r}")
    if typ is int and isinstance(value, float) and not value.is_integer():
        raise ValueError(f"expected an integer, got {value!r}")
    return typ(value)


def profile(game):
    """Flat default settings for ``game``."""
    cfg = TrainRunConfig.for_game(game)
    return flatten(cfg)


def flatten(cfg):
    out = {"game": cfg.game.value}
    for f in fields(cfg):
        if f.name in ("game", "search", "vis", "visa", "out_dir"):
            continue
        out[f.name] = getattr(cfg, f.name)
    for f in fields(cfg.search):
        out["n_sims" if f.name == "n_sims" else f.name] = getattr(cfg.search, f.name)
    out["vis"] = cfg.vis.enabled
    out["epsilon"] = cfg.vis.epsilon
    out["lookahead_sign"] = cfg.vis.lookahead_sign
    out["visa"] = cfg.visa.enabled
    return out


def resolve(file_values=None, overrides=None):
    """Merge profile <- config file <- overrides and validate every field.

    Returns (TrainRunConfig, flat dict).  Raises ConfigInvalid listing each
    offending field.
    """
    merged = {}
    for source in (file_values or {}, overrides or {}):
        merged.update({k: v for k, v in source.items() if v is not None})
    errors = {}
    unknown = sorted(set(merged) - set(_KEYS))
    for k in unknown:
        errors[k] = "unknown setting"
    try:
        game = GameId.parse(merged.get("game", "ttt3"))
    except ValueError as exc:
        errors["game"] = str(exc)
        raise ConfigInvalid(errors) from None
    flat = profile(game)
    for k, v in merged.items():
        if k in _KEYS and k != "game":
            try:
                flat[k] = _coerce(k, v)
            except (TypeError, ValueError) as exc:
                errors[k] = str(exc)
    for k in ("num_games", "batch_size", "replay_capacity", "games_per_round"):
        if k not in errors and flat[k] < (0 if k == "num_games" else 1):
            errors[k] = "out of range"
    if "replay_reuse" not in errors and flat["replay_reuse"] <= 0:
        errors["replay_reuse"] = "must be positive"
    if errors:
        raise ConfigInvalid(errors)
    try:
        cfg = build(flat)
    except ValueError as exc:
        raise ConfigInvalid({"config": str(exc)}) from None
    return cfg, flat


def build(flat):
    search = SearchConfig(n_sims=flat["n_sims"], c=flat["c"], tau=flat["tau"],
                          tau_drop_ply=flat["tau_drop_ply"],
                          dirichlet_alpha=flat["dirichlet_alpha"],
                          dirichlet_fraction=flat["dirichlet_fraction"])
    run = {k: flat[k] for k, (_, where) in _KEYS.items() if where == "run" and k != "game"}
    return TrainRunConfig(game=GameId.parse(flat["game"]), search=search,
                          vis=VisConfig(flat["vis"], flat["epsilon"], flat["lookahead_sign"]),
                          visa=VisaConfig(flat["visa"]), **run)


def load_file(path):
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigInvalid({"config": f"no such file {path}"}) from None
    except json.JSONDecodeError as exc:
        raise ConfigInvalid({"config": f"not valid JSON: {exc}"}) from None
    if not isinstance(data, dict):
        raise ConfigInvalid({"config": "top level must be an object"})
    return data


def worker_count(requested=None):
    """Worker pool size, capped by the VISAVIS_THREADS environment variable."""
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("VISAVIS_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigInvalid({"VISAVIS_THREADS": f"not an integer: {cap!r}"}) from None
    return max(1, n)
