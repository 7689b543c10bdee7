"""Command-line entry points: demos, bc, rl, eval and ablate.

Exit codes: 0 success, 1 usage or configuration, 2 expert calibration,
3 training divergence.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from pathlib import Path
from statistics import median

from scipy.stats import binomtest

from .bc import ChunkedBCPolicy, collect_demos, filtered_bc, read_demos, train_bc, write_demos
from .config import RunConfig, canonical, format_value, parse_value
from .core import (
    EVAL_SEED_BASE,
    ResidualAgent,
    evaluate_policy,
    load_actor,
    offline_from_demos,
    save_actor,
    train_resfit,
)
from .envs import make_env_spec
from .exceptions import (
    CalibrationError,
    CheckpointError,
    ConfigError,
    DimensionError,
    TrainingDivergedError,
)
from .rollout import BaseAgent, success_rate
from .runtime import evaluate_ab, run_split
from .utils import atomic_write_text

log = logging.getLogger("resfit")

EXIT_OK, EXIT_USAGE, EXIT_CALIBRATION, EXIT_DIVERGED = 0, 1, 2, 3

ABLATE_KEYS = ("rl.utd", "rl.n_step", "rl.critic_layernorm", "rl.demos_in_buffer",
               "rl.residual_mode")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _resolve(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.apply(args.set)


def _write_config(cfg: RunConfig, name: str) -> None:
    atomic_write_text(cfg.out_dir / f"{name}.config.kv", cfg.dumps())


def _write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=1, default=str) + "\n")


def _demos(cfg: RunConfig):
    path = cfg.path("demos.path")
    if not path.exists():
        raise ConfigError(f"demo file not found: {path}")
    demos = read_demos(path)
    if not demos:
        raise ConfigError(f"demo file is empty: {path}")
    return demos


def _base(cfg: RunConfig) -> ChunkedBCPolicy:
    path = cfg.path("bc.path")
    if not path.exists():
        raise ConfigError(f"base policy checkpoint not found: {path}")
    policy = ChunkedBCPolicy.load(path)
    policy.checkpoint_path_ = str(path.resolve())
    return policy


# -- commands ---------------------------------------------------------------

def cmd_demos(cfg: RunConfig) -> dict:
    spec = make_env_spec(cfg["env.name"])
    ds = collect_demos(spec, cfg["demos.noise"], cfg["demos.count"], seed=cfg["seed"])
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    write_demos(cfg.path("demos.path"), ds.demos)
    summary = {"count": len(ds), "attempts": ds.attempts,
               "mean_length": sum(len(d) for d in ds.demos) / len(ds),
               "expert_success_rate": ds.expert_success_rate,
               "noise_scale": cfg["demos.noise"], "first_seed": cfg["seed"]}
    _write_json(cfg.out_dir / "demos_summary.json", summary)
    _write_config(cfg, "demos")
    return summary


def cmd_bc(cfg: RunConfig) -> dict:
    spec = make_env_spec(cfg["env.name"])
    demos = _demos(cfg)
    policy = train_bc(demos, chunk_size=cfg.chunk_size, epochs=cfg["bc.epochs"],
                      lr=cfg["bc.lr"], seed=cfg["seed"], hidden_dims=cfg["bc.hidden"],
                      batch_size=cfg["bc.batch_size"])
    policy.save(cfg.path("bc.path"))
    n = cfg["bc.eval_episodes"]
    agent = BaseAgent(policy, cfg["bc.requery_every_step"])
    rate = success_rate(spec, agent, range(EVAL_SEED_BASE, EVAL_SEED_BASE + n))
    report = {"train_mse": policy.train_mse_, "eval_success": rate, "eval_episodes": n,
              "chunk_size": cfg.chunk_size}
    _write_json(cfg.out_dir / "bc_report.json", report)
    _write_config(cfg, "bc")
    return report


def _write_rows(path, rows, columns) -> None:
    buf = [",".join(columns)]
    for r in rows:
        buf.append(",".join(format_value(r[c]) for c in columns))
    atomic_write_text(path, "\n".join(buf) + "\n")


def run_rl(cfg: RunConfig, out: Path) -> dict:
    """One RL run (or the Filtered BC baseline) writing into ``out``."""
    spec = make_env_spec(cfg["env.name"])
    demos, base = _demos(cfg), _base(cfg)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "config.kv", cfg.dumps())
    if cfg["run.algo"] == "filtered_bc":
        n = cfg["eval.episodes"]
        res = filtered_bc(base, spec, demos, cfg["filtered_bc.rounds"],
                          cfg["filtered_bc.rollouts_per_round"], seed=cfg["seed"],
                          eval_seeds=range(EVAL_SEED_BASE, EVAL_SEED_BASE + n),
                          epochs_per_round=cfg["filtered_bc.epochs_per_round"])
        res.policy.save(out / "policy.json")
        rows = [{"round": i, "env_steps": s, "dataset_size": d, "success": r}
                for i, (s, d, r) in enumerate(zip(res.env_steps, res.dataset_sizes,
                                                  res.success_history))]
        _write_rows(out / "metrics.csv", rows, ("round", "env_steps", "dataset_size", "success"))
        summary = {"algo": "filtered_bc", "final_success": res.success_history[-1],
                   "checkpoint": str(out / "policy.json")}
        _write_json(out / "summary.json", summary)
        return summary

    tc = cfg.train_config()
    offline = offline_from_demos(demos, base, tc)
    extra = {}
    if cfg["run.split_mode"]:
        result, info = run_split(spec, base, offline, tc, out, lockstep=cfg["run.lockstep"],
                                 learner_enabled=cfg["run.learner_enabled"],
                                 log_wallclock=cfg["log.wallclock"])
        extra = {"utd_ratio": info.utd_ratio, "degraded": info.degraded,
                 "segments": len(info.sealed), "ingested": len(info.manifest["ingested"])}
    else:
        result = train_resfit(spec, base, offline, tc, out_dir=out,
                              log_wallclock=cfg["log.wallclock"])
    atomic_write_text(out / "metrics.csv", result.metrics_csv())
    _write_rows(out / "evals.csv", [{"env_steps": s, "success": r} for s, r in result.evals],
                ("env_steps", "success"))
    save_actor(out / "actor.json", result.actor, tc, base.checkpoint_path_)
    final = evaluate_policy(spec, base, result.actor, tc, cfg["eval.episodes"])
    summary = {"algo": "resfit", "residual_mode": tc.residual_mode, "env_steps": result.env_steps,
               "episodes": len(result.metrics), "critic_updates": result.critic_updates,
               "actor_updates": result.actor_updates, "max_abs_q": result.max_abs_q,
               "steps_to_threshold": result.steps_to(cfg["ablate.threshold"]),
               "final_success": final, "checkpoint": str(out / "actor.json"), **extra}
    _write_json(out / "summary.json", summary)
    return summary


def cmd_rl(cfg: RunConfig) -> dict:
    return run_rl(cfg, cfg.out_dir / "rl")


def load_agent(path, spec):
    """Agent for a checkpoint: a BC policy alone, or base plus residual actor."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        kind = json.loads(path.read_text()).get("kind")
    except ValueError as exc:
        raise CheckpointError(f"{path}: not a checkpoint manifest ({exc})") from None
    if kind == "bc":
        policy = ChunkedBCPolicy.load(path)
        if policy.obs_dim_ != spec.obs_dim or policy.action_dim_ != spec.action_dim:
            raise DimensionError(f"{path}: policy dims ({policy.obs_dim_}, {policy.action_dim_})"
                                 f" do not match env {spec.name}")
        return BaseAgent(policy)
    if kind == "resfit":
        actor, meta = load_actor(path)
        if actor.obs_dim != spec.obs_dim or actor.action_dim != spec.action_dim:
            raise DimensionError(f"{path}: actor dims ({actor.obs_dim}, {actor.action_dim})"
                                 f" do not match env {spec.name}")
        base = ChunkedBCPolicy.load(meta["base"]) if meta.get("base") else None
        if base is None and meta["residual_mode"] == "residual":
            raise CheckpointError(f"{path}: residual checkpoint without a base policy")
        return ResidualAgent(base, actor, meta["residual_mode"],
                             requery_every_step=meta.get("base_requery_every_step", False))
    raise CheckpointError(f"{path}: unknown checkpoint kind {kind!r}")


def cmd_eval(cfg: RunConfig, checkpoint_a, checkpoint_b=None) -> dict:
    spec = make_env_spec(cfg["env.name"])
    agent_a = load_agent(checkpoint_a, spec)
    if checkpoint_b is None:
        n = cfg["eval.episodes"]
        wins = round(success_rate(spec, agent_a, range(EVAL_SEED_BASE, EVAL_SEED_BASE + n)) * n)
        ci = binomtest(wins, n).proportion_ci(0.95, method="exact")
        return {"checkpoint": str(checkpoint_a), "episodes": n, "success": wins / n,
                "ci95": [float(ci.low), float(ci.high)]}
    agent_b = load_agent(checkpoint_b, spec)
    res = evaluate_ab(agent_a, agent_b, spec, cfg["eval.pairs"], cfg["eval.seed"])
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(cfg.out_dir / "ab_table.csv", res.table())
    return {"a": str(checkpoint_a), "b": str(checkpoint_b), **res.summary()}


def parse_grid(items):
    """``["utd=0.5,1,4", "n_step=1,3"]`` -> ordered {key: [values]}."""
    grid = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"grid entry must look like key=v1,v2, got {item!r}")
        key, values = item.split("=", 1)
        key = canonical(key)
        if key not in ABLATE_KEYS:
            raise ConfigError(f"{key} cannot be swept; choose from {', '.join(ABLATE_KEYS)}")
        grid[key] = [v for v in values.split(",") if v.strip()]
        for v in grid[key]:
            parse_value(key, v)
    if not grid:
        raise ConfigError("ablate needs at least one --grid key=v1,v2")
    return grid


def cmd_ablate(cfg: RunConfig, grid_items) -> dict:
    grid = parse_grid(grid_items)
    root = cfg.out_dir / "ablate"
    keys = list(grid)
    rows = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        cell = "_".join(f"{k.split('.')[-1]}={v}" for k, v in zip(keys, combo))
        for seed in cfg["ablate.seeds"]:
            run = cfg.copy()
            for k, v in zip(keys, combo):
                run.set(k, v)
            run.values["seed"] = int(seed)
            row = {"cell": cell, **{k: v for k, v in zip(keys, combo)}, "seed": seed}
            try:
                s = run_rl(run, root / cell / f"seed{seed}")
                row.update(status="ok", steps_to_threshold=s.get("steps_to_threshold"),
                           final_success=s["final_success"], max_abs_q=s.get("max_abs_q"))
            except (TrainingDivergedError, ValueError, RuntimeError) as exc:
                log.error("cell %s seed %s failed: %s", cell, seed, exc)
                row.update(status=f"failed: {type(exc).__name__}", steps_to_threshold=None,
                           final_success=None, max_abs_q=None)
            rows.append(row)
    columns = ["cell", *keys, "seed", "status", "steps_to_threshold", "final_success",
               "max_abs_q"]
    _write_rows(root / "aggregate.csv", rows, columns)
    summary = []
    for cell in dict.fromkeys(r["cell"] for r in rows):
        ok = [r for r in rows if r["cell"] == cell and r["status"] == "ok"]
        steps = [r["steps_to_threshold"] for r in ok]
        # a run that never reached the threshold counts as slower than any that did
        reached = sorted(float("inf") if s is None else s for s in steps)
        summary.append({"cell": cell, "runs": len(ok),
                        "median_steps_to_threshold": median(reached) if reached else None,
                        "median_final_success": median(r["final_success"] for r in ok)
                        if ok else None,
                        "median_max_abs_q": median(r["max_abs_q"] for r in ok) if ok else None})
    _write_rows(root / "summary.csv", summary, ("cell", "runs", "median_steps_to_threshold",
                                                "median_final_success", "median_max_abs_q"))
    _write_config(cfg, "ablate")
    return {"runs": len(rows), "failed": sum(r["status"] != "ok" for r in rows),
            "aggregate": str(root / "aggregate.csv")}


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="resfit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        return p

    common(sub.add_parser("demos", help="collect scripted-expert demonstrations"))
    common(sub.add_parser("bc", help="train the chunked BC base policy"))
    common(sub.add_parser("rl", help="residual RL fine-tuning (or a baseline)"))
    ev = common(sub.add_parser("eval", help="evaluate one checkpoint or A/B two"))
    ev.add_argument("checkpoint")
    ev.add_argument("checkpoint_b", nargs="?")
    ab = common(sub.add_parser("ablate", help="grid sweep with an aggregate CSV"))
    ab.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        if args.command == "demos":
            out = cmd_demos(cfg)
        elif args.command == "bc":
            out = cmd_bc(cfg)
        elif args.command == "rl":
            out = cmd_rl(cfg)
        elif args.command == "eval":
            out = cmd_eval(cfg, args.checkpoint, args.checkpoint_b)
        else:
            out = cmd_ablate(cfg, args.grid)
    except CalibrationError as exc:
        print(f"calibration error: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, CheckpointError, DimensionError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(json.dumps(out, indent=1, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
