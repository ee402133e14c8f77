"""Command-line entry point: ``robust-act {train,eval,matrix,aggregate}``.

Configuration is resolved as built-in defaults, then ``--preset``, then a
JSON ``--config`` file, then explicit flags. The resolved tree is written
into the output directory before any work starts, and passing that file
back through ``--config`` reproduces the run.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import concurrent.futures as cf
import csv
import json
import logging
import os
import sys

from .adv_training import (TrainingAborted, TrainingRunConfig, load_run_record,
                           moving_average, run_training)
from .errors import AggregationError, CheckpointError, ConfigurationError, RobustActError
from .eval_harness import (Scenario, compare, evaluate, write_histogram_csv,
                           write_matrix_csv)
from .lander_env import LanderConfig
from .mas_attack import AttackConfig

PRESETS = {
    "paper": {"episodes": 15000, "seeds": 7, "eval_episodes": 1000},
    "desk": {"episodes": 3000, "seeds": 3, "eval_episodes": 50},
}
ATTACK_FLAGS = ("budget", "step_size", "tolerance")
THREADS_ENV = "ROBUST_ACT_THREADS"

log = logging.getLogger("robust_act")


class UsageError(Exception):
    pass


def _merge(base, override):
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _load_json(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return data


def _fresh_dir(path):
    """Create ``path``; refuse to write into a directory that already has files."""
    if os.path.isdir(path) and os.listdir(path):
        raise FileExistsError(f"output directory {path} is not empty; choose a new --out")
    os.makedirs(path, exist_ok=True)


def _attack_from_args(args, norm, base=None):
    d = dict(base or {})
    d["norm"] = norm
    for name in ATTACK_FLAGS:
        v = getattr(args, name)
        if v is not None:
            d[name] = v
    return d


def _workers(k):
    cap = os.environ.get(THREADS_ENV)
    n = min(k, os.cpu_count() or 1)
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {cap!r}") from None
    return max(1, n)


# --- train -------------------------------------------------------------------

def resolve_train(args):
    """Returns ``(config dict, seeds)``; config dict feeds TrainingRunConfig.from_dict."""
    mode = args.mode
    if mode == "nominal" and any(getattr(args, f) is not None for f in ATTACK_FLAGS):
        raise UsageError("--budget/--step-size/--tolerance require --mode adv-l1 or adv-l2")
    cfg = TrainingRunConfig().to_dict()
    seeds = 1
    if args.preset:
        cfg["episodes"] = PRESETS[args.preset]["episodes"]
        seeds = PRESETS[args.preset]["seeds"]
    if args.config:
        loaded = _load_json(args.config)
        seeds = loaded.pop("seeds", seeds)
        cfg = _merge(cfg, loaded)
    if mode is not None:
        cfg["mode"] = mode
    mode = cfg.get("mode") or "nominal"
    if mode == "nominal":
        cfg["attack"] = None
    elif mode in ("adv-l1", "adv-l2"):
        base = _merge(AttackConfig().to_dict(), cfg.get("attack") or {})
        cfg["attack"] = _attack_from_args(args, mode[-2:].upper(), base)
    else:
        raise UsageError(f"unknown mode {mode!r}")
    if cfg["attack"] is not None and not cfg["attack"].get("budget", 1.0) > 0:
        raise UsageError("attack budget must be > 0")
    for key in ("episodes", "seed"):
        v = getattr(args, key)
        if v is not None:
            cfg[key] = v
    if args.likelihood is not None:
        cfg["ppo"] = _merge(cfg["ppo"], {"likelihood_action": args.likelihood})
    if args.trace_attacks:
        cfg["trace_attacks"] = True
    if args.seeds is not None:
        seeds = args.seeds
    if seeds < 1:
        raise UsageError("--seeds must be >= 1")
    try:
        TrainingRunConfig.from_dict(cfg)
    except (ConfigurationError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    return cfg, seeds


def _train_one(cfg_dict):
    cfg = TrainingRunConfig.from_dict(cfg_dict)
    rec = run_training(cfg)
    return cfg.seed, rec.final_checkpoint, float(sum(rec.rewards_normalized[-100:])
                                                 / max(1, len(rec.rewards_normalized[-100:])))


def cmd_train(args):
    cfg, seeds = resolve_train(args)
    if args.print_config:
        print(json.dumps({**cfg, "seeds": seeds}, indent=2, sort_keys=True))
        return 0
    if args.out is None:
        raise UsageError("--out is required")
    _fresh_dir(args.out)
    base_seed = cfg["seed"]
    if seeds == 1:
        jobs = [dict(cfg, out_dir=args.out)]
    else:
        jobs = [dict(cfg, seed=base_seed + i, out_dir=os.path.join(args.out, f"seed{base_seed + i}"))
                for i in range(seeds)]
        with open(os.path.join(args.out, "resolved.json"), "w") as fh:
            json.dump({**cfg, "out_dir": args.out, "seeds": seeds}, fh, indent=2, sort_keys=True)
            fh.write("\n")
    try:
        if len(jobs) == 1 or _workers(len(jobs)) == 1:
            results = [_train_one(j) for j in jobs]
        else:
            with cf.ProcessPoolExecutor(max_workers=_workers(len(jobs))) as pool:
                results = list(pool.map(_train_one, jobs))
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        if exc.checkpoint:
            print(f"last good checkpoint: {exc.checkpoint}", file=sys.stderr)
        return 1
    for seed, ckpt, tail in results:
        print(f"seed {seed}: final checkpoint {ckpt}, last-100 mean {tail:.2f}")
    return 0


# --- eval / matrix ------------------------------------------------------------------

def _scenario(args, checkpoint, attack_norm, base=None):
    d = dict(base or {})
    episodes = args.episodes or d.get("episodes")
    if episodes is None:
        episodes = PRESETS[args.preset]["eval_episodes"] if args.preset else 50
    seed = args.seed if args.seed is not None else d.get("seed", 0)
    try:
        attack = None
        if attack_norm is not None:
            attack = AttackConfig.from_dict(_attack_from_args(args, attack_norm, d.get("attack")))
        return Scenario(
            agent_checkpoint=checkpoint, attack=attack, episodes=episodes, seed=seed,
            stochastic=not args.greedy and d.get("stochastic", True),
            step_limit=d.get("step_limit", 1000), env=LanderConfig(**d.get("env", {})),
        )
    except (ConfigurationError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def _write_report(rep, directory):
    os.makedirs(directory, exist_ok=True)
    rep.write(os.path.join(directory, "report.json"))
    write_histogram_csv(rep, os.path.join(directory, "histogram.csv"))


def cmd_eval(args):
    if args.attack == "none" and any(getattr(args, f) is not None for f in ATTACK_FLAGS):
        raise UsageError("attack flags require --attack l1 or l2")
    base = _load_json(args.config) if args.config else None
    norm = None if args.attack == "none" else args.attack.upper()
    sc = _scenario(args, args.agent, norm, base)
    rep = evaluate(sc)
    if args.out:
        _fresh_dir(args.out)
        _write_report(rep, args.out)
        if args.plot:
            from .plotting import matrix_histograms
            matrix_histograms({("nominal", "nominal" if norm is None else "adversarial"): rep},
                              os.path.join(args.out, "histogram.png"))
    label = f"{os.path.basename(os.path.dirname(os.path.abspath(args.agent))) or args.agent} / attack={args.attack}: "
    print(rep.row(label))
    return 0


def cmd_matrix(args):
    if args.attack_norm is None:
        raise UsageError("--norm is required")
    norm = args.attack_norm.upper()
    base = _load_json(args.config) if args.config else None
    if args.out is None:
        raise UsageError("--out is required")
    cells = {}
    for agent, ckpt in (("nominal", args.nominal), ("robust", args.robust)):
        for env in ("nominal", "adversarial"):
            sc = _scenario(args, ckpt, None if env == "nominal" else norm, base)
            cells[(agent, env)] = sc
    _fresh_dir(args.out)
    reports = {}
    for key, sc in cells.items():
        rep = evaluate(sc)
        reports[key] = rep
        _write_report(rep, os.path.join(args.out, f"{key[0]}_agent__{key[1]}_env"))
        print(rep.row(f"{key[0]:>7} agent / {key[1]:>11} env: "))
    write_matrix_csv([(a, e, norm, reports[(a, e)]) for a, e in cells], os.path.join(args.out, "matrix.csv"))
    comparisons = {
        env: compare(reports[("robust", env)], reports[("nominal", env)], alpha=args.alpha)
        for env in ("nominal", "adversarial")
    }
    comparisons["nominal_agent_attack_effect"] = compare(
        reports[("nominal", "adversarial")], reports[("nominal", "nominal")], alpha=args.alpha)
    with open(os.path.join(args.out, "comparison.json"), "w") as fh:
        json.dump({"robust_minus_nominal": {k: comparisons[k] for k in ("nominal", "adversarial")},
                   "nominal_agent_attacked_minus_clean": comparisons["nominal_agent_attack_effect"],
                   "norm": norm}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if args.plot:
        from .plotting import matrix_histograms
        matrix_histograms(reports, os.path.join(args.out, "histograms.png"), title=f"{norm} attack")
    adv = comparisons["adversarial"]
    print(f"robust - nominal under {norm} attack: {adv['mean_difference']:+.2f} "
          f"(Mann-Whitney p={adv['mannwhitney_pvalue']:.3g})")
    return 0


# --- aggregate -----------------------------------------------------------------------

def cmd_aggregate(args):
    records = [load_run_record(d) for d in args.runs]
    lengths = {len(r) for r in records}
    if len(lengths) != 1:
        raise AggregationError(f"runs differ in episode count: {sorted(lengths)}")
    n = lengths.pop()
    mean = [sum(r.rewards_normalized[i] for r in records) / len(records) for i in range(n)]
    ma = moving_average(mean, args.window)
    out = args.out
    parent = os.path.dirname(os.path.abspath(out))
    os.makedirs(parent, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "mean_reward", "moving_average"])
        for i, (m, a) in enumerate(zip(mean, ma)):
            w.writerow([i, repr(m), repr(a)])
    if args.plot:
        from .plotting import training_curves
        stem = os.path.splitext(out)[0]
        training_curves({records[0].mode: ma}, stem + ".png", window=args.window)
    print(f"aggregated {len(records)} run(s) x {n} episodes -> {out}")
    return 0


# --- parser --------------------------------------------------------------------------

def _attack_args(p):
    p.add_argument("--budget", type=float, help="attack budget B (default 1)")
    p.add_argument("--step-size", dest="step_size", type=float, help="attack step size (default 3)")
    p.add_argument("--tolerance", type=float, help="attack convergence tolerance (default 1e-3)")


def build_parser():
    parser = argparse.ArgumentParser(prog="robust-act",
                                     description="Action-space adversarial training for a lander agent.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one agent (or several seeds)")
    t.add_argument("--mode", choices=["nominal", "adv-l1", "adv-l2"])
    t.add_argument("--episodes", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--seeds", type=int, help="number of consecutive seeds to train")
    t.add_argument("--out")
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--config", help="JSON file with a (partial) training config")
    t.add_argument("--likelihood", choices=["executed", "nominal"],
                   help="action entering the PPO likelihood ratio under attack")
    t.add_argument("--trace-attacks", dest="trace_attacks", action="store_true",
                   help="write attacks.jsonl with one line per attacked step")
    t.add_argument("--print-config", dest="print_config", action="store_true",
                   help="print the resolved config and exit")
    _attack_args(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate one checkpoint")
    e.add_argument("--agent", required=True)
    e.add_argument("--attack", choices=["none", "l1", "l2"], default="none")
    e.add_argument("--episodes", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.add_argument("--preset", choices=sorted(PRESETS))
    e.add_argument("--config", help="JSON file with scenario fields")
    e.add_argument("--greedy", action="store_true", help="act with the policy mean")
    e.add_argument("--plot", action="store_true", help="also write a PNG histogram")
    _attack_args(e)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("matrix", help="2x2 agent/environment evaluation for one norm")
    m.add_argument("--nominal", required=True, help="nominal agent checkpoint")
    m.add_argument("--robust", required=True, help="robust agent checkpoint")
    m.add_argument("--norm", dest="attack_norm", choices=["l1", "l2"])
    m.add_argument("--episodes", type=int)
    m.add_argument("--seed", type=int)
    m.add_argument("--out")
    m.add_argument("--preset", choices=sorted(PRESETS))
    m.add_argument("--config")
    m.add_argument("--alpha", type=float, default=0.05)
    m.add_argument("--greedy", action="store_true")
    m.add_argument("--plot", action="store_true", help="also write histograms.png")
    _attack_args(m)
    m.set_defaults(func=cmd_matrix)

    a = sub.add_parser("aggregate", help="average training curves across run directories")
    a.add_argument("runs", nargs="+")
    a.add_argument("--window", type=int, default=100)
    a.add_argument("--out", required=True, help="CSV path")
    a.add_argument("--plot", action="store_true", help="also write a PNG next to the CSV")
    a.set_defaults(func=cmd_aggregate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"robust-act: error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, AggregationError, RobustActError, OSError) as exc:
        print(f"robust-act: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
