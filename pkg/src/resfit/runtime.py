"""Episode lifecycle, paired A/B evaluation and split collector/learner execution.

The split runner keeps exactly two contexts.  The collector (this process)
steps the environment and seals one immutable segment per episode; the
learner (a child process) ingests sealed segments, spends the UTD budget
between episodes and publishes versioned actor checkpoints.  They share
nothing but files: segments, checkpoints and one JSON manifest guarded by a
file lock and replaced atomically.
"""

from __future__ import annotations

import json
import logging
import multiprocessing as mp
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
from filelock import FileLock
from scipy.stats import binomtest

from .bc import ChunkedBCPolicy
from .core import (
    Learner,
    ResidualAgent,
    TrainConfig,
    TrainResult,
    WarmupAgent,
    evaluate_policy,
    load_actor,
    make_store,
    save_actor,
)
from .envs import EnvSpec
from .exceptions import CheckpointError, IntegrityError, TrainingDivergedError
from .replay import SegmentLog, TransitionArray
from .rollout import BaseAgent, EpisodeRunner
from .utils import atomic_write_text, named_rng, sha256_file

log = logging.getLogger(__name__)

SUCCESS, FAILURE, TIMEOUT = "success", "failure", "timeout"
STOPPED = ("done", "crashed", "diverged")


# -- episode lifecycle ------------------------------------------------------

@dataclass
class EpisodeOutcome:
    label: str
    length: int
    ret: float
    seed: int


def episode_lifecycle(spec: EnvSpec, agent, seed: int, max_steps: Optional[int] = None):
    """Run one episode and label it.

    Episodes end on success or at the horizon (timeout).  ``max_steps`` below
    the horizon stops early; an unsuccessful early stop is a failure.
    Returns (outcome, transitions).
    """
    limit = spec.horizon if max_steps is None else min(max_steps, spec.horizon)
    runner = EpisodeRunner(spec, lambda: seed)
    transitions = []
    finished = None
    while finished is None and len(transitions) < limit:
        t, finished = runner.step(agent)
        transitions.append(t)
    ret = float(sum(t.reward for t in transitions))
    if finished is not None and finished.success:
        label = SUCCESS
    elif len(transitions) >= spec.horizon:
        label = TIMEOUT
    else:
        label = FAILURE
    return EpisodeOutcome(label, len(transitions), ret, seed), transitions


# -- paired A/B evaluation --------------------------------------------------

def as_agent(policy):
    """Agents pass through; a bare chunked BC policy runs as the base agent."""
    if isinstance(policy, ChunkedBCPolicy):
        return BaseAgent(policy)
    return policy


@dataclass
class PairOutcome:
    pair: int
    scene_seed: int
    a_slot: str
    success_a: bool
    success_b: bool
    length_a: int
    length_b: int


@dataclass
class ABResult:
    pairs: List[PairOutcome]
    success_a: float
    success_b: float
    difference: float
    a_only: int
    b_only: int
    p_value: float

    def table(self) -> str:
        lines = ["pair,scene_seed,a_slot,success_a,success_b,length_a,length_b"]
        for p in self.pairs:
            lines.append(f"{p.pair},{p.scene_seed},{p.a_slot},{int(p.success_a)},"
                         f"{int(p.success_b)},{p.length_a},{p.length_b}")
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {"pairs": len(self.pairs), "success_a": self.success_a,
                "success_b": self.success_b, "difference": self.difference,
                "a_only": self.a_only, "b_only": self.b_only, "p_value": self.p_value}


def discordant_p_value(a_only: int, b_only: int) -> float:
    """Two-sided exact binomial test of the discordant pairs against 1/2."""
    n = a_only + b_only
    if n == 0:
        return 1.0
    return float(binomtest(a_only, n, 0.5).pvalue)


def evaluate_ab(policy_a, policy_b, spec: EnvSpec, num_pairs: int, seed: int = 0) -> ABResult:
    """Run both policies from the same scene for every pair.

    Each pair assigns the policies to slots A/B at random; the slot only
    fixes run order and the revealed label, never the scene.
    """
    agent_a, agent_b = as_agent(policy_a), as_agent(policy_b)
    scene_rng = named_rng(seed, "ab-scenes")
    slot_rng = named_rng(seed, "ab-slots")
    pairs = []
    for i in range(num_pairs):
        scene = int(scene_rng.integers(2**31, 2**32))
        a_first = bool(slot_rng.integers(0, 2))
        order = [(agent_a, "a"), (agent_b, "b")] if a_first else [(agent_b, "b"), (agent_a, "a")]
        out = {}
        for agent, key in order:
            out[key], _ = episode_lifecycle(spec, agent, scene)
        pairs.append(PairOutcome(i, scene, "A" if a_first else "B",
                                 out["a"].label == SUCCESS, out["b"].label == SUCCESS,
                                 out["a"].length, out["b"].length))
    a_only = sum(p.success_a and not p.success_b for p in pairs)
    b_only = sum(p.success_b and not p.success_a for p in pairs)
    rate_a = float(np.mean([p.success_a for p in pairs])) if pairs else 0.0
    rate_b = float(np.mean([p.success_b for p in pairs])) if pairs else 0.0
    return ABResult(pairs, rate_a, rate_b, rate_a - rate_b, a_only, b_only,
                    discordant_p_value(a_only, b_only))


# -- exchange manifest ------------------------------------------------------

class ExchangeManifest:
    """JSON manifest shared by collector and learner.

    Every change happens under the lock and bumps ``version``; the file is
    replaced by rename so readers never see a partial write.
    """

    def __init__(self, path):
        self.path = Path(path)
        self.lock = FileLock(str(self.path) + ".lock")

    def init(self) -> dict:
        state = {"version": 0, "checkpoint": None, "checkpoint_sha256": None,
                 "checkpoint_segment": -1, "segments": [], "ingested": [], "skipped": [],
                 "collector_done": False,
                 "learner": {"status": "idle", "critic_updates": 0, "actor_updates": 0,
                             "accrued_steps": 0, "max_abs_q": 0.0, "error": None}}
        with self.lock:
            atomic_write_text(self.path, json.dumps(state))
        return state

    def read(self) -> dict:
        with self.lock:
            return json.loads(self.path.read_text())

    def update(self, fn) -> dict:
        with self.lock:
            state = json.loads(self.path.read_text())
            fn(state)
            state["version"] += 1
            atomic_write_text(self.path, json.dumps(state))
            return state


# -- learner context --------------------------------------------------------

def _learner_main(spec: EnvSpec, offline: TransitionArray, config: TrainConfig, root: str,
                  lockstep: bool, fault_after: Optional[int]) -> None:
    root = Path(root)
    manifest = ExchangeManifest(root / "manifest.json")
    segments = SegmentLog(root / "segments")
    learner = Learner(spec.obs_dim, spec.action_dim, config)
    store = make_store(offline, spec, config)
    ingested = set()
    accrued = 0
    published = 0

    def mark(status, error=None):
        def fn(s):
            s["learner"].update(status=status, error=error,
                                critic_updates=learner.stats.critic_updates,
                                actor_updates=learner.stats.actor_updates,
                                accrued_steps=accrued, max_abs_q=learner.stats.max_abs_q)
        manifest.update(fn)

    mark("running")
    try:
        while True:
            state = manifest.read()
            fresh = [e for e in state["segments"] if e["id"] not in ingested]
            if not fresh:
                if state["collector_done"]:
                    break
                time.sleep(0.002)
                continue
            skipped = []
            for entry in fresh:
                ingested.add(entry["id"])
                try:
                    batch = segments.load(entry)
                except CheckpointError as exc:
                    log.error("skipping segment %d: %s", entry["id"], exc)
                    skipped.append(entry["id"])
                    continue
                for t in batch:
                    store.push(t)
                store.end_episode()
                learner.accrue(entry["accrue"])
                accrued += entry["accrue"]
            learner.drain(store)
            if fault_after is not None and learner.stats.critic_updates >= fault_after:
                raise RuntimeError("injected learner fault")
            published += 1
            name = f"actor_v{published:06d}.json"
            msbe, mean_q, aloss = learner.stats.drain()
            save_actor(root / "checkpoints" / name, learner.actor, config,
                       extra={"stats": {"mean_msbe": msbe, "mean_q": mean_q, "actor_loss": aloss},
                              "learner": learner.state_dict()})
            digest = sha256_file((root / "checkpoints" / name).with_suffix(".rft"))
            last = max(e["id"] for e in fresh)

            def publish(s, name=name, digest=digest, last=last, done=[e["id"] for e in fresh]):
                s["checkpoint"], s["checkpoint_sha256"] = name, digest
                s["checkpoint_segment"] = last
                s["ingested"].extend(done)
                s["skipped"].extend(skipped)
                s["learner"].update(critic_updates=learner.stats.critic_updates,
                                    actor_updates=learner.stats.actor_updates,
                                    accrued_steps=accrued, max_abs_q=learner.stats.max_abs_q)
            manifest.update(publish)
            _prune(root / "checkpoints", published)
    except Exception as exc:  # the collector degrades instead of dying with us
        log.error("learner stopped: %s", exc)
        mark("diverged" if isinstance(exc, TrainingDivergedError) else "crashed", repr(exc))
        raise SystemExit(1)
    mark("done")


def _prune(directory: Path, latest: int, keep: int = 4) -> None:
    old = latest - keep
    if old < 1:
        return
    for suffix in (".json", ".rft"):
        p = directory / f"actor_v{old:06d}{suffix}"
        if p.exists():
            p.unlink()


# -- collector context ------------------------------------------------------

@dataclass
class SplitInfo:
    """What the collector saw of the exchange, for bookkeeping checks."""

    manifest: dict
    sealed: List[int] = field(default_factory=list)
    versions_seen: List[int] = field(default_factory=list)
    degraded: bool = False

    @property
    def utd_ratio(self) -> float:
        steps = self.manifest["learner"]["accrued_steps"]
        return self.manifest["learner"]["critic_updates"] / steps if steps else float("nan")


def run_split(spec: EnvSpec, base_policy, offline: TransitionArray, config: TrainConfig,
              out_dir, lockstep: bool = False, learner_enabled: bool = True,
              log_wallclock: bool = False, fault_after: Optional[int] = None):
    """Collector/learner training with file-based exchange.

    Returns (TrainResult, SplitInfo).  ``lockstep`` makes the collector wait
    after each episode until the learner has ingested it and published a
    checkpoint.  ``fault_after`` kills the learner after that many critic
    updates, to exercise degradation.
    """
    cfg = config
    root = Path(out_dir) / "exchange"
    root.mkdir(parents=True, exist_ok=True)
    manifest = ExchangeManifest(root / "manifest.json")
    manifest.init()
    segments = SegmentLog(root / "segments")
    info = SplitInfo(manifest.read())

    # the learner builds the same initial actor from the same init stream
    actor = Learner(spec.obs_dim, spec.action_dim, cfg).actor
    env_rng = named_rng(cfg.seed, "env")
    explore_rng = named_rng(cfg.seed, "explore")
    runner = EpisodeRunner(spec, lambda: env_rng.integers(2**31, 2**32))
    agent = ResidualAgent(base_policy, actor, cfg.residual_mode, cfg.explore, explore_rng,
                          cfg.base_requery_every_step)
    warm = WarmupAgent(agent, cfg.warmup_noise, explore_rng)

    proc = None
    if learner_enabled:
        ctx = mp.get_context("fork")
        proc = ctx.Process(target=_learner_main, args=(spec, offline, cfg, str(root), lockstep,
                                                       fault_after), daemon=True)
        proc.start()

    t0 = time.perf_counter()
    loaded = None
    stats = {"mean_msbe": float("nan"), "mean_q": float("nan"), "actor_loss": float("nan")}
    metrics, evals = [], []
    next_eval = cfg.eval_every if cfg.eval_every else None
    steps = episodes = 0
    pending, accrue = [], 0

    def learner_alive():
        return proc is not None and proc.is_alive()

    def refresh():
        nonlocal loaded, stats
        state = manifest.read()
        info.versions_seen.append(state["version"])
        name = state["checkpoint"]
        if name is None or name == loaded:
            return state
        path = root / "checkpoints" / name
        try:
            if sha256_file(path.with_suffix(".rft")) != state["checkpoint_sha256"]:
                raise IntegrityError(f"checkpoint {name} failed its hash check")
            new_actor, meta = load_actor(path)
        except (OSError, CheckpointError) as exc:
            log.warning("keeping previous actor: %s", exc)
            return state
        agent.actor = new_actor
        loaded = name
        stats = meta.get("stats", stats)
        return state

    def seal():
        nonlocal pending, accrue
        entry = segments.seal(pending, spec.obs_dim, spec.action_dim)
        entry["accrue"] = accrue
        manifest.update(lambda s: s["segments"].append(entry))
        info.sealed.append(entry["id"])
        pending, accrue = [], 0
        return entry["id"]

    def wait_for(seg_id):
        while learner_alive():
            state = manifest.read()
            if state["checkpoint_segment"] >= seg_id or state["learner"]["status"] in STOPPED:
                return
            time.sleep(0.001)

    while steps < cfg.total_env_steps:
        if runner.state is None or runner.state.done:
            if learner_enabled and not learner_alive() and not info.degraded:
                info.degraded = True
                log.warning("learner unavailable; continuing with checkpoint %s", loaded)
            refresh()
        warmup = steps < cfg.warmup_steps
        t, finished = runner.step(warm if warmup else agent)
        pending.append(t)
        steps += 1
        accrue += 0 if warmup else 1
        if finished is None:
            continue
        seg_id = seal()
        if lockstep:
            wait_for(seg_id)
        if warmup:
            continue
        episodes += 1
        metrics.append({"env_steps": steps, "episodes": episodes, "episode_return": finished.ret,
                        "episode_length": finished.length, "success": bool(finished.success),
                        "mean_msbe": stats["mean_msbe"], "mean_q": stats["mean_q"],
                        "actor_loss": stats["actor_loss"],
                        "wallclock_s": round(time.perf_counter() - t0, 3) if log_wallclock
                        else 0.0})
        if next_eval is not None and steps >= next_eval:
            rate = evaluate_policy(spec, base_policy, agent.actor, cfg, cfg.eval_episodes)
            evals.append((steps, rate))
            log.info("env_steps=%d eval success=%.3f", steps, rate)
            while next_eval <= steps:
                next_eval += cfg.eval_every
            if cfg.stop_success is not None and rate >= cfg.stop_success:
                break
    if pending:
        seal()
    manifest.update(lambda s: s.update(collector_done=True))
    if proc is not None:
        proc.join()
        if proc.exitcode != 0 and not info.degraded:
            info.degraded = True
            log.warning("learner exited with code %s", proc.exitcode)
    refresh()
    info.manifest = manifest.read()
    lstats = info.manifest["learner"]
    result = TrainResult(agent.actor, None, metrics, evals, steps, lstats["critic_updates"],
                         lstats["actor_updates"], lstats["max_abs_q"], None)
    return result, info
