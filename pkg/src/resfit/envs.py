"""Deterministic sparse-reward environments and their scripted experts.

Two tasks are provided:

``point_reach``
    A velocity-controlled point in the plane must come within
    ``success_epsilon`` of a goal.  Observation: position, velocity, goal.
``arm_pick_place``
    A four-link planar arm with a binary gripper must pick an object up and
    release it inside a tote.  Observation: joint angles, joint velocities,
    object xy, tote xy, gripper-closed flag, object-attached flag.

Both give a reward of exactly 1 on the step where success first occurs and 0
otherwise.  Stepping is a pure function of ``(state, action)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .exceptions import DimensionError

# expert noise is redrawn every NOISE_HOLD steps (slow operator drift)
NOISE_HOLD = 4

POINT_BOX = 1.0
POINT_GAIN = 2.0

ARM_LINKS = np.array([0.3, 0.25, 0.2, 0.15])
ARM_HOME = np.array([np.pi / 2, -0.8, -0.8, -0.6])
ARM_GAIN = 3.0
ARM_DAMPING = 1e-3
ARM_Q_JITTER = 0.1
ARM_RADII = (0.45, 0.7)
# object angles; the tote mirrors them across the y axis
ARM_ANGLES = (0.4, 1.2)


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    action_dim: int
    horizon: int
    success_epsilon: float
    dt: float = 0.05
    max_speed: float = 1.0
    tote_radius: float = 0.08
    obs_noise: float = 0.0

    def __post_init__(self):
        if self.horizon < 1 or self.action_dim < 1 or self.success_epsilon <= 0:
            raise ValueError(f"invalid environment spec {self}")


def make_env_spec(name: str, **overrides) -> EnvSpec:
    if name == "point_reach":
        spec = EnvSpec("point_reach", obs_dim=6, action_dim=2, horizon=100,
                       success_epsilon=0.02, dt=0.05, max_speed=1.0)
    elif name == "arm_pick_place":
        spec = EnvSpec("arm_pick_place", obs_dim=14, action_dim=5, horizon=250,
                       success_epsilon=0.06, dt=0.05, max_speed=1.0, tote_radius=0.1)
    else:
        raise ValueError(f"unknown environment {name!r}")
    return replace(spec, **overrides) if overrides else spec


@dataclass(frozen=True)
class EnvState:
    spec: EnvSpec
    phys: np.ndarray
    step_index: int
    seed: int
    succeeded: bool = False

    @property
    def done(self) -> bool:
        return self.succeeded or self.step_index >= self.spec.horizon


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    success: bool


def observe(state: EnvState) -> np.ndarray:
    obs = state.phys.copy()
    sigma = state.spec.obs_noise
    if sigma > 0:
        rng = np.random.default_rng([state.seed & 0xFFFFFFFF, 7, state.step_index])
        obs = obs + rng.normal(0.0, sigma, size=obs.shape)
    return obs


def env_reset(spec: EnvSpec, seed: int):
    """Draw the initial scene for ``seed``.  Returns (state, observation)."""
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, int(seed) >> 32, 0x5EED])
    if spec.name == "point_reach":
        goal = rng.uniform(-POINT_BOX, POINT_BOX, 2)
        pos = rng.uniform(-POINT_BOX, POINT_BOX, 2)
        phys = np.concatenate([pos, np.zeros(2), goal])
    elif spec.name == "arm_pick_place":
        q = ARM_HOME + rng.uniform(-ARM_Q_JITTER, ARM_Q_JITTER, 4)
        # object on the right, tote on the left: the angular gap of at least
        # pi - 2.4 rad at radius >= 0.45 keeps the object well outside the tote
        a_obj = rng.uniform(*ARM_ANGLES)
        r_obj = rng.uniform(*ARM_RADII)
        a_tote = rng.uniform(np.pi - ARM_ANGLES[1], np.pi - ARM_ANGLES[0])
        r_tote = rng.uniform(*ARM_RADII)
        obj = r_obj * np.array([np.cos(a_obj), np.sin(a_obj)])
        tote = r_tote * np.array([np.cos(a_tote), np.sin(a_tote)])
        phys = np.concatenate([q, np.zeros(4), obj, tote, [0.0, 0.0]])
    else:
        raise ValueError(f"unknown environment {spec.name!r}")
    state = EnvState(spec, phys, 0, int(seed))
    return state, observe(state)


def forward_kinematics(q: np.ndarray) -> np.ndarray:
    c = np.cumsum(q)
    return np.array([np.dot(ARM_LINKS, np.cos(c)), np.dot(ARM_LINKS, np.sin(c))])


def arm_jacobian(q: np.ndarray) -> np.ndarray:
    c = np.cumsum(q)
    sx = ARM_LINKS * np.sin(c)
    cx = ARM_LINKS * np.cos(c)
    # column i sums the contributions of links i..3
    return np.vstack([-np.cumsum(sx[::-1])[::-1], np.cumsum(cx[::-1])[::-1]])


def is_success(state: EnvState) -> bool:
    spec, p = state.spec, state.phys
    if spec.name == "point_reach":
        return bool(np.linalg.norm(p[0:2] - p[4:6]) < spec.success_epsilon)
    attached = p[13] > 0.5
    return bool(not attached and np.linalg.norm(p[8:10] - p[10:12]) < spec.tote_radius)


def env_step(state: EnvState, action):
    """Advance one step.  Returns (new_state, StepResult)."""
    spec = state.spec
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (spec.action_dim,):
        raise DimensionError(f"action must have length {spec.action_dim}, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError(f"non-finite action {a!r} at step {state.step_index}")
    if state.step_index >= spec.horizon:
        raise ValueError("episode already reached its horizon; reset first")
    a = np.clip(a, -1.0, 1.0)
    p = state.phys.copy()
    if spec.name == "point_reach":
        vel = a * spec.max_speed
        p[0:2] = p[0:2] + vel * spec.dt
        p[2:4] = vel
    else:
        qd = a[:4] * spec.max_speed
        p[0:4] = p[0:4] + qd * spec.dt
        p[4:8] = qd
        closed = a[4] > 0.5
        p[12] = 1.0 if closed else 0.0
        ee = forward_kinematics(p[0:4])
        if p[13] > 0.5:
            if closed:
                p[8:10] = ee
            else:
                p[13] = 0.0
        elif closed and np.linalg.norm(ee - p[8:10]) < spec.success_epsilon:
            p[13] = 1.0
            p[8:10] = ee
    new = EnvState(spec, p, state.step_index + 1, state.seed, state.succeeded)
    success_now = is_success(new)
    reward = 1.0 if success_now and not state.succeeded else 0.0
    new = replace(new, succeeded=state.succeeded or success_now)
    return new, StepResult(observe(new), reward, new.done, new.succeeded)


def _expert_noise(noise_seed: int, step_index: int, dim: int, scale: float) -> np.ndarray:
    if scale <= 0:
        return np.zeros(dim)
    rng = np.random.default_rng([int(noise_seed) & 0xFFFFFFFF, step_index // NOISE_HOLD])
    return rng.uniform(-scale, scale, dim)


def scripted_expert(state: EnvState, noise_seed: int, noise_scale: float) -> np.ndarray:
    """Proportional controller toward the current subgoal plus held uniform noise."""
    spec, p = state.spec, state.phys
    if spec.name == "point_reach":
        action = np.clip(POINT_GAIN * (p[4:6] - p[0:2]), -1.0, 1.0)
    else:
        q = p[0:4]
        ee = forward_kinematics(q)
        eps = spec.success_epsilon
        if p[13] > 0.5:
            target = p[10:12]
            grip = -1.0 if np.linalg.norm(target - ee) < 0.5 * spec.tote_radius else 1.0
        else:
            target = p[8:10]
            grip = 1.0 if np.linalg.norm(target - ee) < 0.6 * eps else -1.0
        v = ARM_GAIN * (target - ee)
        speed = np.linalg.norm(v)
        if speed > 1.0:
            v = v / speed
        J = arm_jacobian(q)
        dq = J.T @ np.linalg.solve(J @ J.T + ARM_DAMPING * np.eye(2), v)
        action = np.concatenate([np.clip(dq / spec.max_speed, -1.0, 1.0), [grip]])
    action = action + _expert_noise(noise_seed, state.step_index, spec.action_dim, noise_scale)
    return np.clip(action, -1.0, 1.0)
