"""Episodic replay buffer with within-episode sequence sampling."""
from __future__ import annotations

from collections import deque

import numpy as np

from safeplan.errors import InsufficientDataError
from safeplan.world_model import SequenceBatch

FIELDS = ("obs", "actions", "rewards", "costs", "terminals")


class ReplayBuffer:
    """Stores whole episodes only; evicts the oldest episodes once ``capacity`` steps are exceeded.

    An episode is a dict of equal-length arrays keyed by ``FIELDS``. Entry 0
    holds the reset observation with a zero placeholder action.
    """

    def __init__(self, capacity: int):
        self.capacity = int(capacity)
        self.episodes: deque = deque()
        self.num_steps = 0
        self.total_added = 0

    def __len__(self):
        return len(self.episodes)

    def add_episode(self, episode: dict):
        lengths = {len(episode[k]) for k in FIELDS}
        if len(lengths) != 1:
            raise ValueError(f"ragged episode: {lengths}")
        n = lengths.pop()
        if n > self.capacity:
            raise ValueError("episode longer than buffer capacity")
        self.episodes.append({k: np.asarray(episode[k], np.float32) for k in FIELDS})
        self.num_steps += n
        self.total_added += 1
        while self.num_steps > self.capacity:
            self.num_steps -= len(self.episodes.popleft()["rewards"])

    def sample_sequences(self, batch: int, seq_len: int, rng: np.random.Generator,
                         zero_first_action: bool = True) -> SequenceBatch:
        """Uniform over all valid (episode, offset) pairs; returns time-major arrays."""
        counts = np.array([max(len(ep["rewards"]) - seq_len + 1, 0) for ep in self.episodes])
        total = int(counts.sum())
        if total == 0:
            raise InsufficientDataError(f"no stored episode has >= {seq_len} steps")
        flat = rng.integers(0, total, size=batch)
        bounds = np.cumsum(counts)
        ep_idx = np.searchsorted(bounds, flat, side="right")
        offsets = flat - (bounds[ep_idx] - counts[ep_idx])
        out = {k: np.stack([self.episodes[e][k][o:o + seq_len] for e, o in zip(ep_idx, offsets)], axis=1)
               for k in FIELDS}
        if zero_first_action:
            out["actions"][0] = 0.0
        batch_out = SequenceBatch(**out)
        batch_out.episode_index = ep_idx
        batch_out.offsets = offsets
        return batch_out
