"""Episode storage and fixed-length trajectory window materialization."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Transition:
    """One environment step: state/action/reward plus a sub-task stage label."""

    state: np.ndarray
    action: int | np.ndarray
    reward: float
    stage_label: int = 0
    done: bool = False

    def __post_init__(self):
        object.__setattr__(self, "state", np.asarray(self.state, dtype=float))
        if not np.isfinite(self.reward):
            raise ValueError(f"reward must be finite, got {self.reward}")
        if self.stage_label < 0:
            raise ValueError(f"stage_label must be non-negative, got {self.stage_label}")


@dataclass
class Episode:
    id: int
    transitions: list[Transition]

    def __len__(self) -> int:
        return len(self.transitions)

    def validate(self) -> None:
        if len(self.transitions) < 1:
            raise ValueError("episode must contain at least one transition")
        for i, tr in enumerate(self.transitions[:-1]):
            if tr.done:
                raise ValueError(
                    f"episode {self.id}: done=True at step {i} before the final transition"
                )
        dims = {tr.state.shape for tr in self.transitions}
        if len(dims) != 1:
            raise ValueError(f"episode {self.id}: inconsistent state shapes {dims}")


@dataclass(frozen=True)
class TrajectoryWindow:
    """A length-H contiguous slice of one episode.

    ``rtg`` holds the discounted return-to-go computed to the end of the
    *episode*, so ``rtg[j] = rewards[j] + gamma * rtg[j+1]`` holds across the
    window and beyond its right edge.
    """

    episode_id: int
    start: int
    horizon: int
    states: np.ndarray   # (H, d_s)
    actions: np.ndarray  # (H,) discrete or (H, d_a)
    rewards: np.ndarray  # (H,)
    rtg: np.ndarray      # (H,)
    stage_label: int


def discounted_window_return(window: TrajectoryWindow, gamma: float) -> float:
    """Discounted reward sum truncated to the window: sum_k gamma^k * r[k]."""
    if window.horizon < 1:
        raise ValueError("window horizon must be >= 1")
    discounts = gamma ** np.arange(window.horizon)
    return float(np.dot(discounts, window.rewards))


def window_stage_label(labels) -> int:
    """Majority stage label over the window's transitions, ties to the smallest."""
    counts = Counter(int(x) for x in labels)
    best = max(counts.items(), key=lambda kv: (kv[1], -kv[0]))
    return best[0]


class ReplayBuffer:
    """Append-only episode store with whole-episode FIFO eviction.

    Capacity is counted in transitions; appending evicts the oldest whole
    episodes until the total fits again, so every stored window stays valid.
    """

    def __init__(self, capacity: int, gamma: float):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if not 0.0 < gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {gamma}")
        self.capacity = int(capacity)
        self.gamma = float(gamma)
        self._episodes: list[Episode] = []
        self._rtg_cache: dict[int, np.ndarray] = {}
        self._next_id = 0
        self._total = 0

    def __len__(self) -> int:
        return self._total

    @property
    def episodes(self) -> list[Episode]:
        return list(self._episodes)

    @property
    def state_dim(self) -> int | None:
        if not self._episodes:
            return None
        return self._episodes[0].transitions[0].state.shape[0]

    def new_episode_id(self) -> int:
        eid = self._next_id
        self._next_id += 1
        return eid

    def append_episode(self, episode: Episode) -> None:
        episode.validate()
        if len(episode) > self.capacity:
            raise ValueError(
                f"episode of {len(episode)} transitions exceeds capacity {self.capacity}"
            )
        dim = self.state_dim
        ep_dim = episode.transitions[0].state.shape[0]
        if dim is not None and ep_dim != dim:
            raise ValueError(f"state dim mismatch: buffer has {dim}, episode has {ep_dim}")
        if self._episodes and episode.id <= self._episodes[-1].id:
            raise ValueError(
                f"episode ids must be strictly increasing ({episode.id} after {self._episodes[-1].id})"
            )
        self._next_id = max(self._next_id, episode.id + 1)
        self._episodes.append(episode)
        self._total += len(episode)
        self._rtg_cache[episode.id] = self._episode_rtg(episode)
        while self._total > self.capacity:
            evicted = self._episodes.pop(0)
            self._total -= len(evicted)
            self._rtg_cache.pop(evicted.id, None)

    def _episode_rtg(self, episode: Episode) -> np.ndarray:
        rtg = np.zeros(len(episode))
        acc = 0.0
        for t in range(len(episode) - 1, -1, -1):
            acc = episode.transitions[t].reward + self.gamma * acc
            rtg[t] = acc
        return rtg

    def valid_windows(self, horizon: int) -> list[tuple[int, int]]:
        """All (episode_id, start) pairs admitting a length-``horizon`` window."""
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        pairs = []
        for ep in self._episodes:
            for start in range(len(ep) - horizon + 1):
                pairs.append((ep.id, start))
        return pairs

    def materialize(self, episode_id: int, start: int, horizon: int) -> TrajectoryWindow:
        ep = self._find(episode_id)
        if start < 0 or start + horizon > len(ep):
            raise ValueError(
                f"window [{start}, {start + horizon}) out of range for episode of length {len(ep)}"
            )
        chunk = ep.transitions[start:start + horizon]
        states = np.stack([tr.state for tr in chunk])
        if isinstance(chunk[0].action, (int, np.integer)):
            actions = np.array([int(tr.action) for tr in chunk])
        else:
            actions = np.stack([np.asarray(tr.action, dtype=float) for tr in chunk])
        rewards = np.array([tr.reward for tr in chunk])
        rtg = self._rtg_cache[episode_id][start:start + horizon].copy()
        return TrajectoryWindow(
            episode_id=episode_id,
            start=start,
            horizon=horizon,
            states=states,
            actions=actions,
            rewards=rewards,
            rtg=rtg,
            stage_label=window_stage_label(tr.stage_label for tr in chunk),
        )

    def sample_candidate_pool(self, n: int, horizon: int, seed) -> list[TrajectoryWindow]:
        """Draw min(n, #valid starts) windows uniformly without replacement.

        ``seed`` may be an int or a numpy Generator; the draw is deterministic
        for a given seed and buffer contents.
        """
        pairs = self.valid_windows(horizon)
        if not pairs:
            raise ValueError(f"no valid windows: no stored episode has length >= {horizon}")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        count = min(int(n), len(pairs))
        chosen = rng.choice(len(pairs), size=count, replace=False)
        return [self.materialize(*pairs[i], horizon) for i in chosen]

    def _find(self, episode_id: int) -> Episode:
        for ep in self._episodes:
            if ep.id == episode_id:
                return ep
        raise KeyError(f"episode {episode_id} not in buffer (evicted?)")

    def has_episode(self, episode_id: int) -> bool:
        return any(ep.id == episode_id for ep in self._episodes)


def _action_to_json(action):
    if isinstance(action, (int, np.integer)):
        return int(action)
    return [float(x) for x in np.asarray(action).ravel()]


def _action_from_json(value):
    if isinstance(value, list):
        return np.asarray(value, dtype=float)
    return int(value)


def save_jsonl(buffer: ReplayBuffer, path: str | Path) -> None:
    """Export one JSON object per transition with a fixed field order."""
    with open(path, "w") as fh:
        for ep in buffer.episodes:
            for t, tr in enumerate(ep.transitions):
                record = {
                    "episode": ep.id,
                    "t": t,
                    "state": [float(x) for x in tr.state],
                    "action": _action_to_json(tr.action),
                    "reward": float(tr.reward),
                    "stage": int(tr.stage_label),
                    "done": bool(tr.done),
                }
                fh.write(json.dumps(record) + "\n")


class JsonlParseError(ValueError):
    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


def load_jsonl(path: str | Path, capacity: int | None = None, gamma: float = 0.99) -> ReplayBuffer:
    """Rebuild a buffer from the JSON-lines transition format."""
    groups: dict[int, list[tuple[int, Transition]]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise JsonlParseError(lineno, f"invalid JSON ({exc.msg})") from exc
            try:
                tr = Transition(
                    state=np.asarray(rec["state"], dtype=float),
                    action=_action_from_json(rec["action"]),
                    reward=float(rec["reward"]),
                    stage_label=int(rec.get("stage", 0)),
                    done=bool(rec.get("done", False)),
                )
                groups.setdefault(int(rec["episode"]), []).append((int(rec["t"]), tr))
            except (KeyError, TypeError, ValueError) as exc:
                raise JsonlParseError(lineno, str(exc)) from exc
    total = sum(len(v) for v in groups.values())
    if capacity is None:
        capacity = max(total, 1)
    buffer = ReplayBuffer(capacity=capacity, gamma=gamma)
    for eid in sorted(groups):
        steps = sorted(groups[eid], key=lambda pair: pair[0])
        buffer.append_episode(Episode(id=eid, transitions=[tr for _, tr in steps]))
    return buffer
