"""Demonstrations, action-chunked behaviour cloning and the Filtered BC baseline."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .envs import EnvSpec, env_reset, env_step, scripted_expert
from .exceptions import CalibrationError
from .nn import (
    AdamState,
    MlpSpec,
    adam_step,
    deserialize_params,
    init_mlp,
    mlp_backward,
    mlp_forward,
    mlp_forward_cached,
    serialize_params,
)
from .rollout import BaseAgent, run_episode
from .utils import atomic_write_bytes, atomic_write_text, named_rng

log = logging.getLogger(__name__)


@dataclass
class DemoTrajectory:
    """One demonstration.  ``obs`` has one more row than ``act`` (final observation)."""

    seed: int
    obs: np.ndarray
    act: np.ndarray
    success: bool = True

    def __len__(self):
        return len(self.act)


@dataclass
class DemoDataset:
    demos: List[DemoTrajectory]
    attempts: int = 0
    noise_scale: float = 0.0

    @property
    def expert_success_rate(self) -> float:
        return len(self.demos) / self.attempts if self.attempts else float("nan")

    def __len__(self):
        return len(self.demos)

    def __iter__(self):
        return iter(self.demos)


def expert_rollout(spec: EnvSpec, seed: int, noise_scale: float, noise_seed: int) -> DemoTrajectory:
    state, obs = env_reset(spec, seed)
    observations, actions = [obs], []
    while not state.done:
        a = scripted_expert(state, noise_seed, noise_scale)
        state, res = env_step(state, a)
        actions.append(a)
        observations.append(res.observation)
    return DemoTrajectory(seed, np.array(observations), np.array(actions), state.succeeded)


def collect_demos(spec: EnvSpec, noise_scale: float, num_demos: int, seed: int = 0) -> DemoDataset:
    """Run the scripted expert on seeds ``seed, seed+1, ...`` keeping successes.

    Gives up after ``10 * num_demos`` attempts; that can only happen when the
    expert succeeds on fewer than 10% of scenes.
    """
    if num_demos < 1:
        raise ValueError("num_demos must be >= 1")
    noise_rng = named_rng(seed, "expert-noise")
    kept, attempts = [], 0
    while len(kept) < num_demos:
        if attempts >= 10 * num_demos:
            raise CalibrationError(
                f"expert succeeded on {len(kept)}/{attempts} attempts "
                f"(noise_scale={noise_scale}); need at least 10%"
            )
        noise_seed = int(noise_rng.integers(0, 2**31))
        demo = expert_rollout(spec, seed + attempts, noise_scale, noise_seed)
        attempts += 1
        if demo.success:
            kept.append(demo)
    return DemoDataset(kept, attempts, noise_scale)


def write_demos(path, demos: Sequence[DemoTrajectory]) -> None:
    # json writes floats with repr(), the shortest string that round-trips
    lines = [
        json.dumps({"seed": int(d.seed), "obs": np.asarray(d.obs).tolist(),
                    "act": np.asarray(d.act).tolist(), "success": bool(d.success)})
        for d in demos
    ]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_demos(path) -> List[DemoTrajectory]:
    out = []
    for i, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            out.append(DemoTrajectory(int(rec["seed"]), np.array(rec["obs"], dtype=np.float64),
                                      np.array(rec["act"], dtype=np.float64),
                                      bool(rec["success"])))
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}: line {i + 1} is not a valid demo record ({exc})") from exc
    return out


def chunk_targets(demos: Sequence[DemoTrajectory], chunk_size: int):
    """(observations, chunk targets) for every demo step.

    Targets near the end of a demo repeat its final action.
    """
    X, Y = [], []
    for d in demos:
        if not d.success:
            continue
        act = np.asarray(d.act)
        T = len(act)
        idx = np.minimum(np.arange(T)[:, None] + np.arange(chunk_size)[None, :], T - 1)
        X.append(np.asarray(d.obs)[:T])
        Y.append(act[idx])
    if not X:
        raise ValueError("no successful demonstrations to train on")
    return np.concatenate(X), np.concatenate(Y)


class ChunkedBCPolicy(BaseEstimator):
    """Deterministic MLP that predicts the next ``chunk_size`` actions.

    Trained with mean-squared error over the whole chunk, the fixed-variance
    Gaussian log-likelihood.  The output layer is ``tanh`` so every predicted
    action lies in [-1, 1].

    Parameters
    ----------
    chunk_size : int
        Number of future actions predicted per query (k).
    hidden_dims : tuple of int
    epochs : int
        Passes over the data per call to ``fit``.
    learning_rate : float
    batch_size : int or None
        Minibatch size; None trains full-batch.
    warm_start : bool
        Continue from the current weights and optimiser state on refit.
    random_state : int
    """

    def __init__(self, chunk_size=8, hidden_dims=(256, 256), epochs=100,
                 learning_rate=1e-3, batch_size=256, warm_start=False, random_state=0):
        self.chunk_size = chunk_size
        self.hidden_dims = hidden_dims
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.warm_start = warm_start
        self.random_state = random_state

    def _targets(self, y, n):
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 3:
            y = y.reshape(n, -1)
        y = check_array(y, dtype=np.float64)
        if y.shape[1] % self.chunk_size:
            raise ValueError(f"target width {y.shape[1]} is not a multiple of k={self.chunk_size}")
        return y

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = self._targets(y, len(X))
        if len(X) != len(y):
            raise ValueError("X and y have different lengths")
        if len(X) == 0:
            raise ValueError("empty dataset")
        k = self.chunk_size
        fresh = not (self.warm_start and hasattr(self, "params_"))
        if fresh:
            self.obs_dim_ = X.shape[1]
            self.action_dim_ = y.shape[1] // k
            self.spec_ = MlpSpec(self.obs_dim_, tuple(self.hidden_dims), k * self.action_dim_,
                                 "relu", "tanh")
            self.params_ = init_mlp(self.spec_, named_rng(self.random_state, "bc-init"))
            self.opt_ = AdamState.for_params(self.params_, self.learning_rate)
            self.loss_curve_ = []
            self._fit_calls = 0
        elif X.shape[1] != self.obs_dim_ or y.shape[1] != k * self.action_dim_:
            raise ValueError("warm-start data does not match the fitted dimensions")
        rng = named_rng(self.random_state, "bc-shuffle", self._fit_calls)
        self._fit_calls += 1
        n = len(X)
        bs = n if self.batch_size is None else min(int(self.batch_size), n)
        for _ in range(int(self.epochs)):
            order = np.arange(n) if bs == n else rng.permutation(n)
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                self._step(X[idx], y[idx])
            self.loss_curve_.append(self.loss(X, y))
        self.train_mse_ = self.loss(X, y)
        return self

    def _step(self, xb, yb):
        out, cache = mlp_forward_cached(self.params_, self.spec_, xb)
        g = 2.0 * (out - yb) / yb.size
        grads, _ = mlp_backward(self.params_, self.spec_, xb, g, cache=cache)
        adam_step(self.params_, grads, self.opt_)

    def fit_demos(self, demos: Sequence[DemoTrajectory]):
        X, y = chunk_targets(demos, self.chunk_size)
        return self.fit(X, y)

    def loss(self, X, y) -> float:
        """Mean squared error over all chunk entries."""
        out = mlp_forward(self.params_, self.spec_, np.asarray(X, dtype=np.float64))
        y = self._targets(y, len(out))
        return float(np.mean((out - y) ** 2))

    def predict(self, X) -> np.ndarray:
        """Action chunks of shape (n, chunk_size, action_dim)."""
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        out = mlp_forward(self.params_, self.spec_, X)
        return out.reshape(len(X), self.chunk_size, self.action_dim_)

    def predict_chunk(self, obs) -> np.ndarray:
        out = mlp_forward(self.params_, self.spec_, obs)
        return out.reshape(self.chunk_size, self.action_dim_)

    def stream(self, requery_every_step: bool = False) -> "ChunkStream":
        check_is_fitted(self, "params_")
        return ChunkStream(self, requery_every_step)

    def save(self, path) -> None:
        """Write ``<path>`` (JSON manifest) and ``<path>.rft`` (network bytes)."""
        path = Path(path)
        blob_path = path.with_suffix(".rft")
        atomic_write_bytes(blob_path, serialize_params(self.params_))
        meta = {"kind": "bc", "params": blob_path.name, "chunk_size": self.chunk_size,
                "obs_dim": self.obs_dim_, "action_dim": self.action_dim_,
                "estimator": {k: (list(v) if isinstance(v, tuple) else v)
                              for k, v in self.get_params().items()}}
        atomic_write_text(path, json.dumps(meta, indent=1))

    @classmethod
    def load(cls, path) -> "ChunkedBCPolicy":
        path = Path(path)
        meta = json.loads(path.read_text())
        params = meta["estimator"]
        params["hidden_dims"] = tuple(params["hidden_dims"])
        est = cls(**params)
        est.params_, _ = deserialize_params((path.parent / meta["params"]).read_bytes())
        est.spec_ = est.params_.spec
        est.obs_dim_, est.action_dim_ = meta["obs_dim"], meta["action_dim"]
        est.opt_ = AdamState.for_params(est.params_, est.learning_rate)
        est.loss_curve_, est._fit_calls = [], 0
        return est


class ChunkStream:
    """Per-rollout cursor over a frozen chunked policy.

    Each query refills the cached chunk from the current observation once the
    previous chunk is used up (or every step with ``requery_every_step``), then
    returns the next cached action.
    """

    def __init__(self, policy: ChunkedBCPolicy, requery_every_step: bool = False):
        self.policy = policy
        self.requery_every_step = requery_every_step
        self.chunk_size = 1 if requery_every_step else policy.chunk_size
        self.cursor = self.chunk_size
        self.cached_chunk = None
        self.n_queries = 0

    def reset(self):
        self.cursor = self.chunk_size
        self.cached_chunk = None

    def __call__(self, obs) -> np.ndarray:
        if self.cursor >= self.chunk_size:
            self.cached_chunk = self.policy.predict_chunk(obs)
            self.n_queries += 1
            self.cursor = 0
        a = self.cached_chunk[self.cursor]
        self.cursor += 1
        return a.copy()


def base_action(stream: ChunkStream, observation) -> np.ndarray:
    return stream(observation)


def train_bc(demos, chunk_size: int = 8, epochs: int = 100, lr: float = 1e-3,
             seed: int = 0, **kwargs) -> ChunkedBCPolicy:
    demos = list(demos)
    if not demos:
        raise ValueError("empty demonstration dataset")
    policy = ChunkedBCPolicy(chunk_size=chunk_size, epochs=epochs, learning_rate=lr,
                             random_state=seed, **kwargs)
    return policy.fit_demos(demos)


@dataclass
class FilteredBCResult:
    policy: ChunkedBCPolicy
    success_history: List[float] = field(default_factory=list)
    dataset_sizes: List[int] = field(default_factory=list)
    env_steps: List[int] = field(default_factory=list)


def filtered_bc(policy: ChunkedBCPolicy, spec: EnvSpec, demos, num_rounds: int,
                rollouts_per_round: int, seed: int = 0, eval_seeds=None,
                epochs_per_round: Optional[int] = None) -> FilteredBCResult:
    """Roll out, add successful rollouts to the dataset, continue BC; repeat.

    ``success_history[0]`` is the starting policy; one entry follows per round.
    A round with no successes leaves policy and dataset untouched.
    """
    dataset = list(demos)
    current = copy.deepcopy(policy).set_params(warm_start=True)
    if epochs_per_round is not None:
        current.set_params(epochs=epochs_per_round)
    eval_seeds = list(eval_seeds) if eval_seeds is not None else list(range(10**6, 10**6 + 100))
    seed_rng = named_rng(seed, "filtered-bc-rollouts")

    def evaluate(p):
        agent = BaseAgent(p)
        return float(np.mean([run_episode(spec, agent, s).success for s in eval_seeds]))

    result = FilteredBCResult(current, [evaluate(current)], [len(dataset)], [0])
    steps = 0
    for r in range(num_rounds):
        agent = BaseAgent(current)
        new = []
        for _ in range(rollouts_per_round):
            s = int(seed_rng.integers(2**31, 2**32))
            ro = run_episode(spec, agent, s)
            steps += ro.length
            if ro.success:
                new.append(DemoTrajectory(s, np.array(ro.observations),
                                          np.array([t.full_action for t in ro.transitions])))
        if not new:
            log.warning("filtered BC round %d produced no successes; skipping", r)
            result.success_history.append(result.success_history[-1])
        else:
            dataset.extend(new)
            current.fit_demos(dataset)
            result.success_history.append(evaluate(current))
        result.dataset_sizes.append(len(dataset))
        result.env_steps.append(steps)
    return result
