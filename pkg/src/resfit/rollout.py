"""Episode rollouts shared by BC evaluation, RL collection and the runtime.

An agent exposes ``reset()``, ``base(obs)`` and ``action(obs, base)``.  The
base query is separate from the action so that the base action of the next
observation can be recorded in a transition before the residual for that
observation is computed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np

from .envs import EnvSpec, env_reset, env_step
from .replay import Transition


@dataclass
class Rollout:
    seed: int
    transitions: List[Transition] = field(default_factory=list)
    observations: List[np.ndarray] = field(default_factory=list)
    success: bool = False

    @property
    def length(self) -> int:
        return len(self.transitions)

    @property
    def ret(self) -> float:
        return float(sum(t.reward for t in self.transitions))


class BaseAgent:
    """Executes the base policy alone."""

    def __init__(self, base_policy, requery_every_step: bool = False):
        self.base_policy = base_policy
        self.requery_every_step = requery_every_step
        self._stream = None

    def reset(self):
        self._stream = self.base_policy.stream(self.requery_every_step)

    def base(self, obs):
        return self._stream(obs)

    def action(self, obs, base):
        return base


class EpisodeRunner:
    """Steps one environment across episode boundaries.

    Each call to :meth:`step` executes one action and returns the transition
    plus a finished :class:`Rollout` summary when the episode ended.  New
    episodes draw their scene seed from ``seed_fn``.
    """

    def __init__(self, spec: EnvSpec, seed_fn):
        self.spec = spec
        self.seed_fn = seed_fn
        self.state = None
        self.obs = None
        self.pending_base = None
        self.current = None

    def step(self, agent):
        if self.state is None or self.state.done:
            seed = int(self.seed_fn())
            self.state, self.obs = env_reset(self.spec, seed)
            agent.reset()
            self.pending_base = agent.base(self.obs)
            self.current = Rollout(seed, observations=[self.obs])
        base = self.pending_base
        action = np.clip(agent.action(self.obs, base), -1.0, 1.0)
        self.state, res = env_step(self.state, action)
        if res.done:
            next_base = np.zeros(self.spec.action_dim)
            self.pending_base = None
        else:
            next_base = agent.base(res.observation)
            self.pending_base = next_base
        t = Transition(self.obs, base, action, res.observation, next_base, res.reward,
                       res.done, step_index=self.state.step_index - 1)
        self.obs = res.observation
        roll = self.current
        roll.transitions.append(t)
        roll.observations.append(res.observation)
        if res.done:
            roll.success = res.success
            return t, roll
        return t, None


def run_episode(spec: EnvSpec, agent, seed: int) -> Rollout:
    """Roll ``agent`` out from the scene of ``seed`` until success or horizon."""
    runner = EpisodeRunner(spec, lambda: seed)
    while True:
        _, finished = runner.step(agent)
        if finished is not None:
            return finished


def success_rate(spec: EnvSpec, agent, seeds) -> float:
    seeds = list(seeds)
    wins = sum(run_episode(spec, agent, s).success for s in seeds)
    return wins / max(1, len(seeds))
