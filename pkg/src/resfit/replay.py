"""Offline/online transition storage, n-step segments and symmetric sampling."""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .exceptions import (
    DimensionError,
    IntegrityError,
    NotReadyError,
    TruncatedStreamError,
    VersionMismatchError,
)
from .utils import atomic_write_bytes, atomic_write_text, sha256_bytes


@dataclass
class Transition:
    obs: np.ndarray
    base_action: np.ndarray
    full_action: np.ndarray
    next_obs: np.ndarray
    next_base_action: np.ndarray
    reward: float
    done: bool
    episode_id: int = 0
    step_index: int = 0


@dataclass
class NStepBatch:
    """Columnar batch of n-step samples.

    ``lookahead_obs``/``lookahead_base`` are s_{t+m} and a^b_{t+m} with
    ``m = effective_n``; ``terminal`` marks samples whose episode ended within
    those m steps, for which no bootstrap term is added.
    """

    obs: np.ndarray
    base_action: np.ndarray
    full_action: np.ndarray
    returns: np.ndarray
    lookahead_obs: np.ndarray
    lookahead_base: np.ndarray
    effective_n: np.ndarray
    terminal: np.ndarray
    source: np.ndarray = None  # 0 offline, 1 online

    def __len__(self):
        return len(self.returns)

    @classmethod
    def concat(cls, a: "NStepBatch", b: "NStepBatch") -> "NStepBatch":
        return cls(**{
            f: np.concatenate([getattr(a, f), getattr(b, f)])
            for f in cls.__dataclass_fields__
        })


class TransitionArray:
    """Column storage for transitions, optionally a fixed-capacity ring.

    Row ``i`` holds the i-th oldest surviving transition.  A head at row i is
    sampleable for n-step returns when its lookahead segment is complete:
    either a ``done`` occurs within n rows, or n rows follow it inside the
    same episode.
    """

    def __init__(self, obs_dim: int, action_dim: int, capacity: int):
        self.obs_dim, self.action_dim, self.capacity = obs_dim, action_dim, int(capacity)
        c = self.capacity
        self.obs = np.zeros((c, obs_dim))
        self.base = np.zeros((c, action_dim))
        self.full = np.zeros((c, action_dim))
        self.next_obs = np.zeros((c, obs_dim))
        self.next_base = np.zeros((c, action_dim))
        self.reward = np.zeros(c)
        self.done = np.zeros(c, dtype=bool)
        self.episode = np.zeros(c, dtype=np.int64)
        self.step = np.zeros(c, dtype=np.int64)
        self._start = 0  # ring index of the oldest row
        self.size = 0
        self.total_pushed = 0
        self._ok = {}

    def _columns(self):
        return (self.obs, self.base, self.full, self.next_obs, self.next_base,
                self.reward, self.done, self.episode, self.step)

    def track(self, n: int) -> None:
        """Maintain the sampleable-head mask for ``n`` incrementally from now on."""
        if n not in self._ok:
            mask = np.zeros(self.capacity, dtype=bool)
            mask[self.ring_index(self._scan_heads(n))] = True
            self._ok[n] = mask

    def append(self, t: Transition) -> None:
        if len(t.obs) != self.obs_dim or len(t.next_obs) != self.obs_dim:
            raise DimensionError(f"transition obs must have length {self.obs_dim}")
        for a in (t.base_action, t.full_action, t.next_base_action):
            if len(a) != self.action_dim:
                raise DimensionError(f"transition actions must have length {self.action_dim}")
        if self.size < self.capacity:
            idx = (self._start + self.size) % self.capacity
            self.size += 1
        else:
            idx = self._start
            self._start = (self._start + 1) % self.capacity
        values = (t.obs, t.base_action, t.full_action, t.next_obs, t.next_base_action,
                  t.reward, t.done, t.episode_id, t.step_index)
        for col, v in zip(self._columns(), values):
            col[idx] = v
        self.total_pushed += 1
        newest = self.size - 1
        for n, mask in self._ok.items():
            mask[idx] = False
            if t.done:
                for j in range(n):
                    row = newest - j
                    if row < 0:
                        break
                    slot = (self._start + row) % self.capacity
                    if self.episode[slot] != t.episode_id:
                        break
                    mask[slot] = True
            elif newest - (n - 1) >= 0:
                slot = (self._start + newest - (n - 1)) % self.capacity
                if self.episode[slot] == t.episode_id:
                    mask[slot] = True

    def ring_index(self, rows: np.ndarray) -> np.ndarray:
        return (self._start + rows) % self.capacity

    def get(self, row: int) -> Transition:
        i = int(self.ring_index(np.asarray(row)))
        return Transition(self.obs[i].copy(), self.base[i].copy(), self.full[i].copy(),
                          self.next_obs[i].copy(), self.next_base[i].copy(),
                          float(self.reward[i]), bool(self.done[i]),
                          int(self.episode[i]), int(self.step[i]))

    def __len__(self):
        return self.size

    def sampleable_heads(self, n: int) -> np.ndarray:
        """Row indices whose n-step lookahead is fully stored."""
        mask = self._ok.get(n)
        if mask is None:
            return self._scan_heads(n)
        return (np.flatnonzero(mask) - self._start) % self.capacity

    def _scan_heads(self, n: int) -> np.ndarray:
        size = self.size
        if size == 0:
            return np.zeros(0, dtype=np.int64)
        idx = self.ring_index(np.arange(size))
        done = self.done[idx]
        ep = self.episode[idx]
        ok = np.zeros(size, dtype=bool)
        # "alive" tracks rows whose segment so far stays in one episode
        alive = np.ones(size, dtype=bool)
        for j in range(n):
            rows = np.arange(size) + j
            valid = rows < size
            rj = np.minimum(rows, size - 1)
            same = valid & (ep[rj] == ep)
            alive &= same
            ok |= alive & done[rj]
            alive &= ~done[rj]
        ok |= alive  # n full steps present without a terminal
        return np.flatnonzero(ok)

    def nstep(self, heads: np.ndarray, n: int, gamma: float) -> NStepBatch:
        """Assemble n-step samples for the given head rows.

        R_n accumulates gamma^i r_{t+i} in increasing i, stopping at the first
        terminal step.
        """
        heads = np.asarray(heads, dtype=np.int64)
        b = len(heads)
        ret = np.zeros(b)
        eff = np.zeros(b, dtype=np.int64)
        term = np.zeros(b, dtype=bool)
        last = heads.copy()
        active = np.ones(b, dtype=bool)
        for j in range(n):
            rows = np.minimum(heads + j, self.size - 1)
            ri = self.ring_index(rows)
            r = self.reward[ri]
            ret = np.where(active, ret + (gamma ** j) * r, ret)
            eff = np.where(active, j + 1, eff)
            last = np.where(active, rows, last)
            d = self.done[ri]
            term |= active & d
            active &= ~d
        hi = self.ring_index(heads)
        li = self.ring_index(last)
        return NStepBatch(
            obs=self.obs[hi], base_action=self.base[hi], full_action=self.full[hi],
            returns=ret, lookahead_obs=self.next_obs[li], lookahead_base=self.next_base[li],
            effective_n=eff, terminal=term,
        )

    def digest(self) -> str:
        idx = self.ring_index(np.arange(self.size))
        h = [c[idx].tobytes() for c in self._columns()]
        return sha256_bytes(b"".join(h))


class ReplayStore:
    """Frozen offline demonstrations plus an append-only online ring buffer."""

    def __init__(self, obs_dim: int, action_dim: int, capacity: int = 200_000,
                 offline: Optional[TransitionArray] = None, n_step: int = 3):
        self.obs_dim, self.action_dim = obs_dim, action_dim
        self.online = TransitionArray(obs_dim, action_dim, capacity)
        self.offline = offline if offline is not None else TransitionArray(obs_dim, action_dim, 1)
        self.online.track(n_step)
        self._episode = 0
        self._prev_done = False
        self._head_cache = {}

    @property
    def capacity(self):
        return self.online.capacity

    def push(self, t: Transition) -> None:
        """Append to the online buffer; episode ids advance after a done."""
        if self._prev_done:
            self._episode += 1
        t.episode_id = self._episode
        self.online.append(t)
        self._prev_done = bool(t.done)
        self._head_cache.pop("online", None)

    def end_episode(self) -> None:
        """Force a new episode id for the next push (used for truncated rollouts)."""
        if not self._prev_done and len(self.online):
            self._prev_done = True

    def _heads(self, which: str, n: int) -> np.ndarray:
        key = (which, n)
        cached = self._head_cache.get(which)
        if cached is not None and cached[0] == key:
            return cached[1]
        buf = self.offline if which == "offline" else self.online
        heads = buf.sampleable_heads(n)
        self._head_cache[which] = (key, heads)
        return heads

    def ready(self, batch_size: int, n: int, use_offline: bool = True) -> bool:
        half = batch_size // 2 if use_offline else batch_size
        if len(self._heads("online", n)) < half:
            return False
        return not use_offline or len(self._heads("offline", n)) >= half

    def sample_symmetric(self, batch_size: int, n: int, gamma: float,
                         rng: np.random.Generator, use_offline: bool = True) -> NStepBatch:
        """Half the batch from offline heads, half from online heads, uniformly.

        With ``use_offline=False`` the whole batch comes from the online buffer.
        """
        if use_offline and batch_size % 2:
            raise ValueError("batch_size must be even for symmetric sampling")
        if not self.ready(batch_size, n, use_offline):
            raise NotReadyError("not enough sampleable transitions yet")
        parts = []
        sources = [("offline", 0), ("online", 1)] if use_offline else [("online", 1)]
        count = batch_size // len(sources)
        for which, tag in sources:
            heads = self._heads(which, n)
            pick = heads[rng.integers(0, len(heads), size=count)]
            buf = self.offline if which == "offline" else self.online
            part = buf.nstep(pick, n, gamma)
            part.source = np.full(count, tag, dtype=np.int8)
            parts.append(part)
        return parts[0] if len(parts) == 1 else NStepBatch.concat(*parts)

    def snapshot(self) -> "ReplayStore":
        """Independent copy for a reader; later pushes do not affect it."""
        return copy.deepcopy(self)


def make_offline(transitions: List[Transition], obs_dim: int, action_dim: int) -> TransitionArray:
    arr = TransitionArray(obs_dim, action_dim, max(1, len(transitions)))
    for t in transitions:
        arr.append(t)
    return arr


def load_offline(demos, base_policy, n_step: int = 3, requery_every_step: bool = False,
                 zero_base: bool = False) -> TransitionArray:
    """Convert successful demonstrations into frozen offline transitions.

    ``full_action`` is the demonstrated action; base-action fields come from
    replaying the frozen base policy's chunk schedule over the demo
    observations.  The last step of each demo carries reward 1 and done.
    With ``zero_base`` every base action is zero (no-base-policy baseline).
    """
    obs_dim = base_policy.obs_dim_
    action_dim = base_policy.action_dim_
    out = []
    for ep, demo in enumerate(demos):
        obs = np.asarray(demo.obs, dtype=np.float64)
        act = np.asarray(demo.act, dtype=np.float64)
        if obs.ndim != 2 or obs.shape[1] != obs_dim or act.shape[1] != action_dim:
            raise DimensionError(
                f"demo {ep} has obs/action dims {obs.shape[1:]}/{act.shape[1:]}, "
                f"policy expects {obs_dim}/{action_dim}"
            )
        T = len(act)
        if zero_base:
            base = np.zeros((T, action_dim))
        else:
            stream = base_policy.stream(requery_every_step=requery_every_step)
            base = np.array([stream(obs[t]) for t in range(T)])
        for t in range(T):
            last = t == T - 1
            out.append(Transition(
                obs=obs[t], base_action=base[t], full_action=act[t], next_obs=obs[t + 1],
                next_base_action=np.zeros(action_dim) if last else base[t + 1],
                reward=1.0 if last and demo.success else 0.0, done=last,
                episode_id=ep, step_index=t,
            ))
    arr = make_offline(out, obs_dim, action_dim)
    arr.track(n_step)
    return arr


# -- segment files ----------------------------------------------------------

SEGMENT_MAGIC = b"RFS1"


def encode_segment(transitions: List[Transition], obs_dim: int, action_dim: int) -> bytes:
    """Serialise transitions as little-endian float64 rows behind a small header."""
    head = SEGMENT_MAGIC + struct.pack("<III", len(transitions), obs_dim, action_dim)
    width = 2 * obs_dim + 3 * action_dim + 4
    rows = np.zeros((len(transitions), width))
    for i, t in enumerate(transitions):
        rows[i] = np.concatenate([t.obs, t.base_action, t.full_action, t.next_obs,
                                  t.next_base_action,
                                  [t.reward, float(t.done), t.episode_id, t.step_index]])
    return head + rows.astype("<f8").tobytes()


def decode_segment(blob: bytes) -> List[Transition]:
    if blob[:4] != SEGMENT_MAGIC:
        raise VersionMismatchError(f"bad segment magic {blob[:4]!r}")
    if len(blob) < 16:
        raise TruncatedStreamError("segment header truncated")
    count, od, ad = struct.unpack("<III", blob[4:16])
    width = 2 * od + 3 * ad + 4
    need = 16 + 8 * width * count
    if len(blob) != need:
        raise TruncatedStreamError(f"segment holds {len(blob)} bytes, expected {need}")
    rows = np.frombuffer(blob[16:], dtype="<f8").reshape(count, width).astype(np.float64)
    out = []
    for r in rows:
        o = 0
        parts = []
        for n in (od, ad, ad, od, ad):
            parts.append(r[o:o + n].copy())
            o += n
        out.append(Transition(*parts, reward=float(r[o]), done=bool(r[o + 1]),
                              episode_id=int(r[o + 2]), step_index=int(r[o + 3])))
    return out


@dataclass
class SegmentLog:
    """Append-only directory of sealed segment files with an order manifest."""

    root: Path
    segments: List[dict] = field(default_factory=list)

    def __post_init__(self):
        self.root = Path(self.root)
        self.root.mkdir(parents=True, exist_ok=True)
        manifest = self.root / "segments.json"
        if manifest.exists():
            self.segments = json.loads(manifest.read_text())["segments"]

    def seal(self, transitions: List[Transition], obs_dim: int, action_dim: int) -> dict:
        blob = encode_segment(transitions, obs_dim, action_dim)
        seg_id = len(self.segments)
        name = f"segment_{seg_id:06d}.bin"
        atomic_write_bytes(self.root / name, blob)
        entry = {"id": seg_id, "file": name, "sha256": sha256_bytes(blob),
                 "count": len(transitions)}
        self.segments.append(entry)
        atomic_write_text(self.root / "segments.json", json.dumps({"segments": self.segments}))
        return entry

    def load(self, entry: dict) -> List[Transition]:
        blob = (self.root / entry["file"]).read_bytes()
        if sha256_bytes(blob) != entry["sha256"]:
            raise IntegrityError(f"segment {entry['id']} failed its hash check")
        return decode_segment(blob)
