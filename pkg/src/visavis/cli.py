"""Command-line entry point: ``visavis train | eval | solve | detect``.

Exit codes: 0 success, 2 configuration or input error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis, neural
from .config import build, load_file, resolve, worker_count
from .exceptions import (BudgetExceeded, ConfigInvalid, CorruptCheckpoint, ParseError,
                         VersionMismatch, VisaVisError)
from .game import GameId, is_terminal, parse_state
from .oracle import DEFAULT_ENDGAME_PLIES, SolveBudget, solve
from .search import NetEvaluator, SearchConfig, run_searches, search_policy
from .selfplay import TrainRunConfig, load_visit_table, play_games, train, value_policies

log = logging.getLogger("visavis")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
MANIFEST = "manifest.json"


def git_blob_hash(path):
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(run_dir, command, config, seed, inputs=(), outputs=(), started=None):
    path = Path(run_dir) / MANIFEST
    if path.exists():
        raise VisaVisError(f"{path} already exists; manifests are write-once")
    body = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {str(p): git_blob_hash(p) for p in inputs},
        "outputs": {Path(p).name: git_blob_hash(p) for p in outputs},
        "started": started or _now(),
        "finished": _now(),
    }
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


def _config_digest(flat):
    return hashlib.sha1(json.dumps(flat, sort_keys=True).encode()).hexdigest()[:10]


# --------------------------------------------------------------------------
# train

def _train_overrides(args):
    out = {
        "game": args.game, "num_games": args.games, "seed": args.seed, "vis": args.vis,
        "visa": args.visa, "epsilon": args.epsilon, "lookahead_sign": args.lookahead_sign,
        "batch_size": args.batch_size, "learning_rate": args.learning_rate,
        "depth": args.depth, "width": args.width, "l2_lambda": args.l2_lambda,
        "n_sims": args.n_sims, "c": args.c, "tau_drop_ply": args.tau_drop_ply,
        "dirichlet_alpha": args.dirichlet_alpha, "replay_reuse": args.replay_reuse,
        "games_per_round": args.games_per_round, "checkpoint_every": args.checkpoint_every,
    }
    return {k: v for k, v in out.items() if v is not None}


def run_training(flat, run_dir):
    """Train one configuration into ``run_dir``; returns the run directory."""
    run_dir = Path(run_dir)
    if (run_dir / MANIFEST).exists():
        raise VisaVisError(f"{run_dir} already holds a finished run")
    run_dir.mkdir(parents=True, exist_ok=True)
    for stale in ("metrics.jsonl",):
        (run_dir / stale).unlink(missing_ok=True)
    started = _now()
    cfg = build(flat)
    cfg = TrainRunConfig(**{**cfg.__dict__, "out_dir": str(run_dir)})
    (run_dir / "config.json").write_text(json.dumps(flat, indent=2, sort_keys=True) + "\n")
    result = train(cfg)
    outputs = [run_dir / "final.vvis", run_dir / "metrics.jsonl", run_dir / "visits.tsv"]
    outputs += sorted(run_dir.glob("checkpoint_*.vvis"))
    write_manifest(run_dir, "train", flat, flat["seed"], outputs=outputs, started=started)
    if result.halted:
        raise VisaVisError(result.halted)
    return run_dir


def cmd_train(args):
    file_values = load_file(args.config) if args.config else {}
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    overrides = _train_overrides(args)
    if seeds:
        overrides.pop("seed", None)
    cfg, flat = resolve(file_values, overrides)
    root = Path(args.out or "runs")
    if not seeds:
        run_dir = Path(args.out) if args.out else \
            root / f"train-{flat['game']}-seed{flat['seed']}-{_config_digest(flat)}"
        run_training(flat, run_dir)
        print(run_dir)
        return EXIT_OK
    jobs = []
    for seed in seeds:
        f = dict(flat, seed=seed)
        jobs.append((f, root / f"train-{f['game']}-seed{seed}-{_config_digest(f)}"))
    with ProcessPoolExecutor(max_workers=min(len(jobs), worker_count())) as pool:
        for run_dir in pool.map(run_training, *zip(*jobs)):
            print(run_dir)
    return EXIT_OK


# --------------------------------------------------------------------------
# eval

def _load_checkpoint(path):
    params, config = neural.load(path)
    shape = config.input_dims[1:]
    game = {(3, 3): GameId.TTT3, (4, 4): GameId.TTT4, (6, 7): GameId.C4}[tuple(shape)]
    return params, game


def _search_cfg(args, game):
    overrides = {}
    if args.n_sims:
        overrides["n_sims"] = args.n_sims
    return SearchConfig.for_game(game, **overrides)


def _default_visits(checkpoint):
    candidate = Path(checkpoint).parent / "visits.tsv"
    return candidate if candidate.exists() else None


def cmd_eval(args):
    started = _now()
    params, game = _load_checkpoint(args.checkpoint)
    out = Path(args.out or Path(args.checkpoint).parent / f"eval-{args.mode}")
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    scfg = _search_cfg(args, game)
    budget = SolveBudget(max_nodes=args.max_nodes)
    summary = {"mode": args.mode, "game": game.value, "checkpoint": str(args.checkpoint)}
    outputs = []
    if args.mode == "match":
        sides = {"first": [True], "second": [False], "both": [True, False]}[args.side]
        for first in sides:
            tally = analysis.oracle_match(params, game, args.n, first, rng, scfg)
            summary["first" if first else "second"] = tally
            print(f"{'first' if first else 'second'}: " + " ".join(f"{k}={v}" for k, v in tally.items()))
    elif args.mode in ("exhaustive", "misalign") and (args.mode == "exhaustive" or game is GameId.TTT3) \
            and not args.states:
        visits_path = args.visits or _default_visits(args.checkpoint)
        visits = load_visit_table(visits_path) if visits_path else {}
        records = analysis.exhaustive_eval(params, game, visits, scfg, budget)
        path = out / "records.jsonl"
        analysis.write_records(path, records)
        outputs.append(path)
        summary.update(analysis.summarize(records))
        summary["generalization"] = analysis.generalization_report(records)
        print(f"records={len(records)} mean_error={summary['mean_error']:.4f} "
              f"mean_misalignment={summary['mean_misalignment']:.4f}")
    elif args.mode == "misalign":
        states = _misalign_states(args, params, game, scfg, rng)
        records = _misalign_records(params, states, scfg)
        path = out / "misalignment.jsonl"
        analysis.write_records(path, records)
        outputs.append(path)
        summary["n"] = len(records)
        summary["mean_misalignment"] = float(np.mean([r["misalignment"] for r in records]))
        print(f"states={len(records)} mean_misalignment={summary['mean_misalignment']:.4f}")
    elif args.mode == "adversarial":
        records, stats = analysis.adversarial_detect(params, game, args.n, budget, rng,
                                                     k=args.k, search_cfg=scfg)
        path = out / "adversarial.jsonl"
        analysis.write_records(path, records)
        outputs.append(path)
        summary["stats"] = stats
        summary["n_states"] = len(records)
        if records:
            summary["mean_error"] = float(np.mean([r.value_error for r in records]))
            summary["mean_misalignment"] = float(np.mean([r.misalignment for r in records]))
        print(f"adversarial_states={len(records)} budget_exceeded={stats.get('budget_exceeded', 0)}")
    summary_path = out / "summary.json"
    analysis.write_summary(summary_path, summary)
    outputs.append(summary_path)
    write_manifest(out, f"eval:{args.mode}", vars_for_manifest(args), args.seed,
                   inputs=[args.checkpoint], outputs=outputs, started=started)
    return EXIT_OK


def _misalign_states(args, params, game, scfg, rng):
    if args.states:
        lines = Path(args.states).read_text().splitlines()
        keys = [json.loads(l)["state_key"] if l.lstrip().startswith("{") else l for l in lines if l.strip()]
        return [parse_state(k, game) for k in keys]
    cfg = TrainRunConfig.for_game(game, search=scfg)
    ev = NetEvaluator(params)
    trajs = play_games(ev, cfg, [np.random.default_rng([args.seed, i]) for i in range(args.n)])
    seen = {}
    for t in trajs:
        for st in t.steps:
            seen.setdefault(st.state, None)
    return list(seen)


def _misalign_records(params, states, scfg):
    ev = NetEvaluator(params)
    states = [s for s in states if not is_terminal(s)]
    trees = run_searches(states, ev, scfg)
    pvs = value_policies(states, ev, "negated")
    return [{"state_key": str(s), "misalignment": analysis.misalignment(search_policy(t, 1.0), pv)}
            for s, t, pv in zip(states, trees, pvs)]


def vars_for_manifest(args):
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
            if k != "func"}


# --------------------------------------------------------------------------
# solve

def cmd_solve(args):
    s = parse_state(args.state, GameId.parse(args.game) if args.game else None)
    result = solve(s, SolveBudget(max_nodes=args.max_nodes, max_plies=args.max_plies))
    body = {"state": str(s), "value": result.value, "best_actions": list(result.best_actions),
            "plies_to_end": result.plies_to_end}
    print(json.dumps(body, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="visavis", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="self-play training run")
    t.add_argument("--config", help="JSON file with settings (flags override it)")
    t.add_argument("--game")
    t.add_argument("--games", type=int, dest="games")
    t.add_argument("--seed", type=int)
    t.add_argument("--seeds", help="comma-separated seeds, one run each, run in parallel")
    t.add_argument("--vis", choices=["on", "off"])
    t.add_argument("--visa", choices=["on", "off"])
    t.add_argument("--epsilon", type=float)
    t.add_argument("--lookahead-sign", choices=["negated", "literal"])
    t.add_argument("--batch-size", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--depth", type=int)
    t.add_argument("--width", type=int)
    t.add_argument("--l2-lambda", type=float)
    t.add_argument("--n-sims", type=int)
    t.add_argument("--c", type=float)
    t.add_argument("--tau-drop-ply", type=int)
    t.add_argument("--dirichlet-alpha", type=float)
    t.add_argument("--replay-reuse", type=float)
    t.add_argument("--games-per-round", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--out", help="run directory (default: runs/<derived name>)")
    t.set_defaults(func=cmd_train)

    def eval_args(p, fixed_mode=None):
        p.add_argument("checkpoint", nargs="?")
        p.add_argument("--checkpoint", dest="checkpoint_opt")
        if fixed_mode is None:
            p.add_argument("--mode", required=True,
                           choices=["exhaustive", "match", "adversarial", "misalign"])
        else:
            p.set_defaults(mode=fixed_mode)
        p.add_argument("--n", type=int, default=1000)
        side = p.add_mutually_exclusive_group()
        side.add_argument("--first", dest="side", action="store_const", const="first")
        side.add_argument("--second", dest="side", action="store_const", const="second")
        p.set_defaults(side="both")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--visits", help="visit table (default: visits.tsv beside checkpoint)")
        p.add_argument("--states", help="file of state strings or records for misalign mode")
        p.add_argument("--n-sims", type=int)
        p.add_argument("--k", type=int, default=DEFAULT_ENDGAME_PLIES)
        p.add_argument("--max-nodes", type=int, default=200_000)
        p.add_argument("--out")
        p.set_defaults(func=cmd_eval)

    eval_args(sub.add_parser("eval", help="evaluate a checkpoint"))
    eval_args(sub.add_parser("detect", help="alias for eval --mode adversarial"), "adversarial")

    s = sub.add_parser("solve", help="exact value of a position")
    s.add_argument("state", help='e.g. "X.O/.X./... O"')
    s.add_argument("--game")
    s.add_argument("--max-nodes", type=int, default=10_000_000)
    s.add_argument("--max-plies", type=int)
    s.set_defaults(func=cmd_solve)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.func is cmd_eval:
        args.checkpoint = args.checkpoint or args.checkpoint_opt
        if not args.checkpoint:
            print("error: a checkpoint path is required", file=sys.stderr)
            return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigInvalid as exc:
        for field, msg in exc.errors.items():
            print(f"config error: {field}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (VersionMismatch, CorruptCheckpoint, BudgetExceeded, VisaVisError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
