"""Bounded FIFO replay cache of past episodes and their prediction matrices.

Each entry keeps the post-augmentation arrays of a multi-view episode (so a
replay re-encodes byte-identical inputs) together with the prediction
matrix H the model produced for it and the training step at which H was
taken. Stored arrays are frozen; H may be refreshed after a replay when the
config allows it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .episodes import MultiViewEpisode
from .exceptions import InvalidArgument, ShapeMismatch


@dataclass
class CacheConfig:
    capacity: int = 64
    replay_every: int = 1
    update_h_on_replay: bool = True

    def __post_init__(self):
        if self.capacity < 1 or self.replay_every < 1:
            raise InvalidArgument("capacity and replay_every must be >= 1")


@dataclass
class CacheEntry:
    episode_id: int
    episode: MultiViewEpisode
    h: np.ndarray  # (N, Q) prediction matrix at `stage`
    stage: int

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=np.float64)
        view = self.episode.view1
        if self.h.shape != (view.n_way, view.q_query):
            raise ShapeMismatch(
                f"H shape {self.h.shape} does not match episode "
                f"({view.n_way}, {view.q_query})"
            )
        if self.episode_id != self.episode.episode_id:
            raise InvalidArgument("entry id must match the stored episode id")


def _freeze(a: np.ndarray) -> np.ndarray:
    out = a.copy()
    out.flags.writeable = False
    return out


@dataclass
class ReplayCache:
    config: CacheConfig = field(default_factory=CacheConfig)
    _entries: list[CacheEntry] = field(default_factory=list, init=False)

    def __len__(self) -> int:
        return len(self._entries)

    def push(self, entry: CacheEntry) -> None:
        """Append, freezing stored arrays; evict the oldest beyond capacity."""
        for view in (entry.episode.view1, entry.episode.view2):
            view.support_x = _freeze(view.support_x)
            view.query_x = _freeze(view.query_x)
        entry.h = _freeze(entry.h)
        self._entries.append(entry)
        while len(self._entries) > self.config.capacity:
            self._entries.pop(0)

    def sample_for_replay(self, rng: np.random.Generator) -> CacheEntry | None:
        """Uniform draw over stored entries; the entry stays cached."""
        if not self._entries:
            return None
        return self._entries[int(rng.integers(0, len(self._entries)))]

    def refresh(self, episode_id: int, new_h: np.ndarray, new_stage: int) -> None:
        """Replace H and stage after a replay, if the config allows it."""
        entry = self._find(episode_id)
        if not self.config.update_h_on_replay:
            return
        new_h = np.asarray(new_h, dtype=np.float64)
        if new_h.shape != entry.h.shape:
            raise ShapeMismatch(f"new H shape {new_h.shape} != {entry.h.shape}")
        entry.h = _freeze(new_h)
        entry.stage = new_stage

    def _find(self, episode_id: int) -> CacheEntry:
        for entry in self._entries:
            if entry.episode_id == episode_id:
                return entry
        raise InvalidArgument(f"episode {episode_id} is not cached")

    @property
    def entries(self) -> tuple[CacheEntry, ...]:
        """Snapshot in insertion order (oldest first)."""
        return tuple(self._entries)

    def episode_ids(self) -> list[int]:
        return [e.episode_id for e in self._entries]
