"""Residual off-policy fine-tuning: actor, critic ensemble and the update loop.

The residual actor sees ``concat(obs, base_action)`` and outputs a correction
bounded by ``residual_scale``; the executed action is
``clip(base_action + residual, -1, 1)``.  Critics score ``concat(obs,
full_action)``.  TD targets use n-step returns, the target actor with
clipped smoothing noise, and the minimum over a random subset of target
critics; the actor ascends the mean over the whole ensemble.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .envs import EnvSpec, make_env_spec
from .exceptions import TrainingDivergedError
from .nn import (
    AdamState,
    MlpParams,
    MlpSpec,
    adam_step,
    deserialize_params,
    init_mlp,
    mlp_backward,
    mlp_forward,
    mlp_forward_cached,
    polyak_update,
    serialize_params,
)
from .replay import NStepBatch, ReplayStore, TransitionArray, load_offline
from .rollout import EpisodeRunner, run_episode
from .utils import atomic_write_bytes, atomic_write_text, named_rng

log = logging.getLogger(__name__)

EVAL_SEED_BASE = 10**6

METRIC_COLUMNS = ("env_steps", "episodes", "episode_return", "episode_length", "success",
                  "mean_msbe", "mean_q", "actor_loss", "wallclock_s")


@dataclass
class TrainConfig:
    """Hyperparameters of the residual RL phase.

    ``None`` for the warmup, smoothing and exploration scales means "derive
    from ``residual_scale``" (1.0, 0.1/0.3 and 0.05 times it respectively).
    """

    gamma: float = 0.99
    n_step: int = 3
    utd: float = 4.0
    batch_size: int = 256
    n_critics: int = 5
    subset_size: int = 2
    residual_scale: float = 0.2
    residual_mode: str = "residual"
    warmup_steps: int = 2000
    warmup_noise_scale: Optional[float] = None
    actor_delay: int = 2
    rho: float = 0.995
    smoothing_sigma: Optional[float] = None
    smoothing_clip: Optional[float] = None
    explore_noise: bool = True
    explore_sigma: Optional[float] = None
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    actor_hidden: Tuple[int, ...] = (256, 256)
    critic_hidden: Tuple[int, ...] = (256, 256)
    critic_layernorm: bool = True
    actor_layernorm: bool = False
    demos_in_buffer: bool = True
    base_requery_every_step: bool = False
    buffer_capacity: int = 200_000
    total_env_steps: int = 60_000
    eval_every: int = 0
    eval_episodes: int = 100
    stop_success: Optional[float] = None
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        self.actor_hidden = tuple(int(h) for h in self.actor_hidden)
        self.critic_hidden = tuple(int(h) for h in self.critic_hidden)
        if self.residual_mode not in ("residual", "full_action"):
            raise ValueError("residual_mode must be 'residual' or 'full_action'")
        if not 1 <= self.subset_size <= self.n_critics:
            raise ValueError("need 1 <= subset_size <= n_critics")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.n_step < 1 or self.actor_delay < 1 or self.batch_size < 2:
            raise ValueError("n_step, actor_delay must be >= 1 and batch_size >= 2")
        if self.utd <= 0:
            raise ValueError("utd must be positive")

    @property
    def action_bound(self) -> float:
        """Largest residual magnitude; the whole action range without a base."""
        return 1.0 if self.residual_mode == "full_action" else self.residual_scale

    def _scaled(self, value, factor):
        return factor * self.action_bound if value is None else value

    @property
    def warmup_noise(self) -> float:
        return self._scaled(self.warmup_noise_scale, 1.0)

    @property
    def smoothing(self) -> Tuple[float, float]:
        return self._scaled(self.smoothing_sigma, 0.1), self._scaled(self.smoothing_clip, 0.3)

    @property
    def explore(self) -> float:
        return self._scaled(self.explore_sigma, 0.05) if self.explore_noise else 0.0


# -- networks ---------------------------------------------------------------

class ResidualActor:
    """Deterministic residual policy with a Polyak-averaged target copy."""

    def __init__(self, obs_dim: int, action_dim: int, scale: float,
                 hidden=(256, 256), layernorm: bool = False, rng=None, lr: float = 3e-4):
        self.obs_dim, self.action_dim, self.scale = obs_dim, action_dim, float(scale)
        self.spec = MlpSpec(obs_dim + action_dim, tuple(hidden), action_dim, "relu", "tanh",
                            (layernorm,) * len(hidden))
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = init_mlp(self.spec, rng, zero_last=True)
        self.target = self.params.copy()
        self.opt = AdamState.for_params(self.params, lr)

    def _input(self, obs, base):
        return np.concatenate([np.atleast_2d(obs), np.atleast_2d(base)], axis=1)

    def __call__(self, obs, base, target: bool = False) -> np.ndarray:
        params = self.target if target else self.params
        single = np.ndim(obs) == 1
        out = self.scale * mlp_forward(params, self.spec, self._input(obs, base))
        return out[0] if single else out


class CriticEnsemble:
    """N critics on concat(obs, full_action) with target copies.

    The members live in one stacked buffer so a single batched pass (and a
    single Adam or Polyak step) covers the whole ensemble.
    """

    def __init__(self, obs_dim: int, action_dim: int, n_critics: int = 5, subset_size: int = 2,
                 hidden=(256, 256), layernorm: bool = True, rng=None, lr: float = 3e-4):
        self.n, self.m = int(n_critics), int(subset_size)
        self.spec = MlpSpec(obs_dim + action_dim, tuple(hidden), 1, "relu", "linear",
                            (layernorm,) * len(hidden))
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stack = MlpParams.stack([init_mlp(self.spec, rng) for _ in range(self.n)])
        self.target_stack = self.stack.copy()
        self.opt = AdamState.for_params(self.stack, lr)

    @property
    def params(self) -> List[MlpParams]:
        return [self.stack.member(i) for i in range(self.n)]

    @property
    def targets(self) -> List[MlpParams]:
        return [self.target_stack.member(i) for i in range(self.n)]

    def q_all(self, obs, action, target: bool = False, members=None) -> np.ndarray:
        """Q values of shape (members, batch); ``members`` selects a subset."""
        stack = self.target_stack if target else self.stack
        if members is not None:
            stack = MlpParams(self.spec, stack.flat[np.asarray(members, dtype=np.intp)])
        x = np.concatenate([np.atleast_2d(obs), np.atleast_2d(action)], axis=1)
        return mlp_forward(stack, self.spec, x)[..., 0]

    def q(self, i: int, obs, action, target: bool = False) -> np.ndarray:
        return self.q_all(obs, action, target, members=[i])[0]


# -- update steps -----------------------------------------------------------

def compute_td_targets(batch: NStepBatch, actor: ResidualActor, critics: CriticEnsemble,
                       config: TrainConfig, rng: np.random.Generator, subset=None) -> np.ndarray:
    """n-step REDQ targets with target policy smoothing.

    Draw order on ``rng``: smoothing noise (only when sigma > 0), then the
    critic subset (only when ``subset`` is not given).
    """
    sigma, clip = config.smoothing
    bound = actor.scale
    s_next, b_next = batch.lookahead_obs, batch.lookahead_base
    res = actor(s_next, b_next, target=True)
    if sigma > 0:
        res = res + np.clip(rng.normal(0.0, sigma, size=res.shape), -clip, clip)
    res = np.clip(res, -bound, bound)
    a_next = np.clip(b_next + res, -1.0, 1.0)
    if subset is None:
        subset = rng.choice(critics.n, size=critics.m, replace=False)
    q = critics.q_all(s_next, a_next, target=True, members=subset).min(axis=0)
    bootstrap = np.where(batch.terminal, 0.0, (config.gamma ** batch.effective_n) * q)
    return batch.returns + bootstrap


def critic_loss_and_grad(batch: NStepBatch, y: np.ndarray, critics: CriticEnsemble):
    """Per-critic MSBE against ``y`` and the gradient of their sum.

    Returns (losses of shape (n,), stacked gradient, Q values of shape (n, batch)).
    """
    x = np.concatenate([batch.obs, batch.full_action], axis=1)
    B = len(y)
    out, cache = mlp_forward_cached(critics.stack, critics.spec, x)
    err = out[..., 0] - y
    losses = np.mean(err * err, axis=1)
    if not np.isfinite(losses).all():
        i = int(np.flatnonzero(~np.isfinite(losses))[0])
        raise TrainingDivergedError(
            f"critic {i} loss is not finite",
            diagnostics={"critic": i, "max_abs_target": float(np.nanmax(np.abs(y))),
                         "max_abs_q": float(np.nanmax(np.abs(out)))},
        )
    grads, _ = mlp_backward(critics.stack, critics.spec, x, (2.0 / B) * err[..., None],
                            cache=cache)
    return losses, grads, out[..., 0]


def critic_update(batch: NStepBatch, y: np.ndarray, critics: CriticEnsemble):
    """One Adam step of every critic toward ``y``.

    Returns pre-update (mean MSBE, mean Q, max |Q|) over critics and batch.
    """
    losses, grads, q = critic_loss_and_grad(batch, y, critics)
    adam_step(critics.stack, grads, critics.opt)
    return float(np.mean(losses)), float(np.mean(q)), float(np.max(np.abs(q)))


def actor_loss_and_grad(batch: NStepBatch, actor: ResidualActor, critics: CriticEnsemble):
    """Loss -mean_b mean_i Q_i(s, clip(b + pi(s, b))) and its gradient w.r.t. actor params.

    The clip passes gradient only where the sum lies strictly inside [-1, 1].
    """
    s, b = batch.obs, batch.base_action
    B = len(s)
    x = np.concatenate([s, b], axis=1)
    out, acache = mlp_forward_cached(actor.params, actor.spec, x)
    pre_clip = b + actor.scale * out
    a = np.clip(pre_clip, -1.0, 1.0)
    inside = (pre_clip > -1.0) & (pre_clip < 1.0)
    cx = np.concatenate([s, a], axis=1)
    q, ccache = mlp_forward_cached(critics.stack, critics.spec, cx)
    coef = -1.0 / (critics.n * B)
    _, g_in = mlp_backward(critics.stack, critics.spec, cx, np.full(q.shape, coef),
                           cache=ccache, need_param_grads=False)
    loss = -float(q.sum()) / (critics.n * B)
    g_out = g_in.sum(axis=0)[:, s.shape[1]:] * inside * actor.scale
    grads, _ = mlp_backward(actor.params, actor.spec, x, g_out, cache=acache)
    return loss, grads


def actor_update(batch: NStepBatch, actor: ResidualActor, critics: CriticEnsemble) -> float:
    loss, grads = actor_loss_and_grad(batch, actor, critics)
    if not np.isfinite(loss):
        raise TrainingDivergedError("actor loss is not finite")
    adam_step(actor.params, grads, actor.opt)
    return loss


# -- agents -----------------------------------------------------------------

class ResidualAgent:
    """Acts with clip(base + residual); optional Gaussian exploration on the residual.

    In ``full_action`` mode the base policy is ignored and its action is zero.
    """

    def __init__(self, base_policy, actor: ResidualActor, residual_mode: str = "residual",
                 explore_sigma: float = 0.0, rng=None, requery_every_step: bool = False):
        self.base_policy = base_policy
        self.actor = actor
        self.residual_mode = residual_mode
        self.explore_sigma = explore_sigma
        self.rng = rng
        self.requery_every_step = requery_every_step
        self._stream = None

    def reset(self):
        if self.residual_mode == "residual":
            self._stream = self.base_policy.stream(self.requery_every_step)

    def base(self, obs):
        if self.residual_mode == "full_action":
            return np.zeros(self.actor.action_dim)
        return self._stream(obs)

    def residual(self, obs, base):
        r = self.actor(obs, base)
        if self.explore_sigma > 0:
            r = np.clip(r + self.rng.normal(0.0, self.explore_sigma, r.shape),
                        -self.actor.scale, self.actor.scale)
        return r

    def action(self, obs, base):
        return np.clip(base + self.residual(obs, base), -1.0, 1.0)


class WarmupAgent:
    """Base action plus uniform noise in [-noise_scale, noise_scale]."""

    def __init__(self, inner, noise_scale: float, rng):
        self.inner, self.noise_scale, self.rng = inner, noise_scale, rng

    def reset(self):
        self.inner.reset()

    def base(self, obs):
        return self.inner.base(obs)

    def action(self, obs, base):
        eps = self.rng.uniform(-self.noise_scale, self.noise_scale, size=np.shape(base))
        return np.clip(base + eps, -1.0, 1.0)


# -- learner ----------------------------------------------------------------

@dataclass
class UpdateStats:
    critic_updates: int = 0
    actor_updates: int = 0
    msbe: List[float] = field(default_factory=list)
    q: List[float] = field(default_factory=list)
    actor_loss: List[float] = field(default_factory=list)
    max_abs_q: float = 0.0

    def drain(self):
        row = (float(np.mean(self.msbe)) if self.msbe else float("nan"),
               float(np.mean(self.q)) if self.q else float("nan"),
               float(np.mean(self.actor_loss)) if self.actor_loss else float("nan"))
        self.msbe, self.q, self.actor_loss = [], [], []
        return row


class Learner:
    """Owns actor, critics and the update schedule (UTD accumulator, actor delay)."""

    def __init__(self, obs_dim: int, action_dim: int, config: TrainConfig):
        self.config = config
        seed = config.seed
        init_rng = named_rng(seed, "init")
        self.actor = ResidualActor(obs_dim, action_dim, config.action_bound, config.actor_hidden,
                                   config.actor_layernorm, init_rng, config.actor_lr)
        self.critics = CriticEnsemble(obs_dim, action_dim, config.n_critics, config.subset_size,
                                      config.critic_hidden, config.critic_layernorm, init_rng,
                                      config.critic_lr)
        self.sample_rng = named_rng(seed, "sampling")
        self.target_rng = named_rng(seed, "smoothing")
        self.budget = Fraction(0)
        self.utd = Fraction(config.utd).limit_denominator(1000)
        self.stats = UpdateStats()

    def accrue(self, env_steps: int = 1) -> None:
        self.budget += self.utd * env_steps

    def update_once(self, store: ReplayStore) -> None:
        cfg = self.config
        batch = store.sample_symmetric(cfg.batch_size, cfg.n_step, cfg.gamma, self.sample_rng,
                                       use_offline=cfg.demos_in_buffer)
        y = compute_td_targets(batch, self.actor, self.critics, cfg, self.target_rng)
        msbe, mean_q, max_q = critic_update(batch, y, self.critics)
        polyak_update(self.critics.target_stack, self.critics.stack, cfg.rho)
        self.stats.critic_updates += 1
        self.stats.msbe.append(msbe)
        self.stats.q.append(mean_q)
        self.stats.max_abs_q = max(self.stats.max_abs_q, max_q)
        if self.stats.critic_updates % cfg.actor_delay == 0:
            loss = actor_update(batch, self.actor, self.critics)
            polyak_update(self.actor.target, self.actor.params, cfg.rho)
            self.stats.actor_updates += 1
            self.stats.actor_loss.append(loss)

    def drain(self, store: ReplayStore) -> int:
        """Spend the accrued update budget; returns the number of critic updates."""
        done = 0
        while self.budget >= 1:
            if not store.ready(self.config.batch_size, self.config.n_step,
                               self.config.demos_in_buffer):
                break
            self.update_once(store)
            self.budget -= 1
            done += 1
        return done

    def state_dict(self) -> dict:
        return {"budget": str(self.budget), "critic_updates": self.stats.critic_updates,
                "actor_updates": self.stats.actor_updates,
                "sample_rng": self.sample_rng.bit_generator.state,
                "target_rng": self.target_rng.bit_generator.state}


# -- checkpoints ------------------------------------------------------------

def save_actor(path, actor: ResidualActor, config: TrainConfig, base_path: Optional[str] = None,
               extra: Optional[dict] = None) -> None:
    """Write ``<path>`` (JSON manifest) next to ``<path>.rft`` (actor bytes).

    ``.rft`` holds the online actor followed by its target network.
    """
    path = Path(path)
    blob = serialize_params(actor.params) + serialize_params(actor.target)
    atomic_write_bytes(path.with_suffix(".rft"), blob)
    meta = {"kind": "resfit", "params": path.with_suffix(".rft").name,
            "obs_dim": actor.obs_dim, "action_dim": actor.action_dim, "scale": actor.scale,
            "residual_mode": config.residual_mode, "base": base_path,
            "base_requery_every_step": config.base_requery_every_step,
            "config": config_to_dict(config)}
    if extra:
        meta.update(extra)
    atomic_write_text(path, json.dumps(meta, indent=1, default=str))


def load_actor(path) -> Tuple[ResidualActor, dict]:
    path = Path(path)
    meta = json.loads(path.read_text())
    blob = (path.parent / meta["params"]).read_bytes()
    params, used = deserialize_params(blob)
    target, _ = deserialize_params(blob[used:])
    actor = ResidualActor.__new__(ResidualActor)
    actor.obs_dim, actor.action_dim, actor.scale = meta["obs_dim"], meta["action_dim"], meta["scale"]
    actor.spec, actor.params, actor.target = params.spec, params, target
    actor.opt = AdamState.for_params(params)
    return actor, meta


def config_to_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["actor_hidden"] = list(config.actor_hidden)
    d["critic_hidden"] = list(config.critic_hidden)
    return d


# -- training loop ----------------------------------------------------------

@dataclass
class TrainResult:
    actor: ResidualActor
    critics: CriticEnsemble
    metrics: List[dict]
    evals: List[Tuple[int, float]]
    env_steps: int
    critic_updates: int
    actor_updates: int
    max_abs_q: float
    store: ReplayStore = None
    # (env_steps, max |Q| so far) at every evaluation
    q_history: List[Tuple[int, float]] = field(default_factory=list)

    def metrics_csv(self) -> str:
        return metrics_to_csv(self.metrics)

    def steps_to(self, threshold: float) -> Optional[int]:
        return steps_to_threshold(self.evals, threshold)


def steps_to_threshold(evals, threshold: float) -> Optional[int]:
    for steps, rate in evals:
        if rate >= threshold:
            return steps
    return None


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def make_store(offline: TransitionArray, spec: EnvSpec, config: TrainConfig) -> ReplayStore:
    return ReplayStore(spec.obs_dim, spec.action_dim, config.buffer_capacity, offline,
                       n_step=config.n_step)


def offline_from_demos(demos, base_policy, config: TrainConfig) -> TransitionArray:
    return load_offline(demos, base_policy, config.n_step, config.base_requery_every_step,
                        zero_base=config.residual_mode == "full_action")


def evaluate_policy(spec: EnvSpec, base_policy, actor: ResidualActor, config: TrainConfig,
                    n_episodes: int, seed_base: int = EVAL_SEED_BASE) -> float:
    agent = ResidualAgent(base_policy, actor, config.residual_mode,
                          requery_every_step=config.base_requery_every_step)
    wins = sum(run_episode(spec, agent, seed_base + i).success for i in range(n_episodes))
    return wins / n_episodes


def warmup_phase(runner: EpisodeRunner, agent, store: ReplayStore, config: TrainConfig,
                 rng: np.random.Generator) -> int:
    """Collect ``warmup_steps`` transitions with uniform noise around the base action.

    ``agent`` supplies the base actions; it keeps its chunk cursor when the
    main loop takes over mid-episode.
    """
    agent = WarmupAgent(agent, config.warmup_noise, rng)
    for _ in range(config.warmup_steps):
        t, _ = runner.step(agent)
        store.push(t)
    return config.warmup_steps


def train_resfit(spec: EnvSpec, base_policy, offline: TransitionArray, config: TrainConfig,
                 out_dir=None, log_wallclock: bool = False,
                 on_episode: Optional[Callable] = None) -> TrainResult:
    """Warmup then the residual RL loop, single process.

    Per env step: act, push, then spend the UTD budget on critic updates
    (each on a fresh symmetric batch, each followed by a critic-target Polyak
    step); every ``actor_delay`` critic updates, one actor update on the same
    batch followed by an actor-target Polyak step.
    """
    cfg = config
    t0 = time.perf_counter()
    learner = Learner(spec.obs_dim, spec.action_dim, cfg)
    store = make_store(offline, spec, cfg)
    env_rng = named_rng(cfg.seed, "env")
    explore_rng = named_rng(cfg.seed, "explore")
    runner = EpisodeRunner(spec, lambda: env_rng.integers(2**31, 2**32))
    agent = ResidualAgent(base_policy, learner.actor, cfg.residual_mode, cfg.explore, explore_rng,
                          cfg.base_requery_every_step)
    steps = warmup_phase(runner, agent, store, cfg, explore_rng)
    metrics, evals, q_history = [], [], []
    out_dir = Path(out_dir) if out_dir is not None else None
    base_path = getattr(base_policy, "checkpoint_path_", None)
    next_eval = cfg.eval_every if cfg.eval_every else None
    episodes = 0
    try:
        while steps < cfg.total_env_steps:
            t, finished = runner.step(agent)
            store.push(t)
            steps += 1
            learner.accrue(1)
            learner.drain(store)
            if finished is None:
                continue
            episodes += 1
            msbe, mean_q, aloss = learner.stats.drain()
            row = {"env_steps": steps, "episodes": episodes, "episode_return": finished.ret,
                   "episode_length": finished.length, "success": bool(finished.success),
                   "mean_msbe": msbe, "mean_q": mean_q, "actor_loss": aloss,
                   "wallclock_s": round(time.perf_counter() - t0, 3) if log_wallclock else 0.0}
            metrics.append(row)
            if on_episode is not None:
                on_episode(row)
            if out_dir is not None and cfg.checkpoint_every and episodes % cfg.checkpoint_every == 0:
                save_actor(out_dir / "checkpoints" / f"actor_{episodes:06d}.json", learner.actor,
                           cfg, base_path, {"learner": learner.state_dict()})
            if next_eval is not None and steps >= next_eval:
                rate = evaluate_policy(spec, base_policy, learner.actor, cfg, cfg.eval_episodes)
                evals.append((steps, rate))
                q_history.append((steps, learner.stats.max_abs_q))
                log.info("env_steps=%d eval success=%.3f max|Q|=%.3g", steps, rate,
                         learner.stats.max_abs_q)
                while next_eval <= steps:
                    next_eval += cfg.eval_every
                if cfg.stop_success is not None and rate >= cfg.stop_success:
                    break
    except TrainingDivergedError:
        if out_dir is not None:
            save_actor(out_dir / "checkpoints" / "actor_diverged.json", learner.actor, cfg,
                       base_path, {"learner": learner.state_dict()})
        raise
    return TrainResult(learner.actor, learner.critics, metrics, evals, steps,
                       learner.stats.critic_updates, learner.stats.actor_updates,
                       learner.stats.max_abs_q, store, q_history)


class ResidualFineTuner(BaseEstimator):
    """Estimator wrapper: ``fit`` runs warmup plus RL on top of a frozen base policy.

    ``predict`` maps rows of ``concat(obs, base_action)`` to residual actions;
    ``act`` returns the executed (clipped) full action.
    """

    def __init__(self, base_policy=None, env="point_reach", config=None, random_state=None):
        self.base_policy = base_policy
        self.env = env
        self.config = config
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        cfg = self.config if self.config is not None else TrainConfig()
        if self.random_state is not None:
            cfg = replace(cfg, seed=int(self.random_state))
        return cfg

    def fit(self, demos, y=None):
        if self.base_policy is None:
            raise ValueError("base_policy is required")
        cfg = self._config()
        spec = make_env_spec(self.env) if isinstance(self.env, str) else self.env
        offline = offline_from_demos(demos, self.base_policy, cfg)
        result = train_resfit(spec, self.base_policy, offline, cfg)
        self.config_ = cfg
        self.env_spec_ = spec
        self.actor_, self.critics_ = result.actor, result.critics
        self.metrics_, self.evals_ = result.metrics, result.evals
        self.result_ = result
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "actor_")
        X = check_array(X, dtype=np.float64)
        d = self.actor_.obs_dim
        return self.actor_(X[:, :d], X[:, d:])

    def act(self, obs, base) -> np.ndarray:
        check_is_fitted(self, "actor_")
        return np.clip(base + self.actor_(obs, base), -1.0, 1.0)

    def score(self, n_episodes: int = 100) -> float:
        check_is_fitted(self, "actor_")
        return evaluate_policy(self.env_spec_, self.base_policy, self.actor_, self.config_,
                               n_episodes)
