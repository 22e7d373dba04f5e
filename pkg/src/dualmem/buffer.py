"""Fixed-budget episodic memory maintained by reservoir sampling.

Every sample offered to the buffer has the same probability budget/N of
residing in it, regardless of when it arrived. The buffer knows nothing
about tasks; it stores raw (input, label) pairs only.
"""

from __future__ import annotations

import numpy as np

from .nn import Batch


class ReplayBuffer:
    def __init__(self, budget: int, input_dim: int, seed=None, rng=None):
        if budget <= 0:
            raise ValueError("budget must be positive")
        self.budget = int(budget)
        self.input_dim = int(input_dim)
        self.inputs = np.zeros((self.budget, self.input_dim))
        self.labels = np.zeros(self.budget, dtype=np.int64)
        self.seen_count = 0
        self.rng = rng if rng is not None else np.random.default_rng(seed)

    @property
    def size(self) -> int:
        return min(self.seen_count, self.budget)

    def offer(self, x: np.ndarray, y: int) -> None:
        """Reservoir update for one sample; increments seen_count exactly once."""
        if self.seen_count < self.budget:
            idx = self.seen_count
            self.inputs[idx] = x
            self.labels[idx] = y
        else:
            nu = int(self.rng.integers(0, self.seen_count))
            if nu < self.budget:
                self.inputs[nu] = x
                self.labels[nu] = y
        self.seen_count += 1

    def offer_batch(self, batch: Batch) -> None:
        for i in range(len(batch)):
            self.offer(batch.inputs[i], int(batch.labels[i]))

    def sample_batch(self, k: int) -> Batch:
        """k items drawn uniformly; with replacement only when size < k.

        An empty buffer yields an empty batch so callers can skip replay
        terms at the very start of training.
        """
        if k <= 0:
            raise ValueError("k must be positive")
        if self.size == 0:
            return Batch(np.zeros((0, self.input_dim)), np.zeros(0, dtype=np.int64))
        replace = self.size < k
        idx = self.rng.choice(self.size, size=k, replace=replace)
        return Batch(self.inputs[idx].copy(), self.labels[idx].copy())

    def to_state(self) -> dict:
        return {
            "budget": self.budget,
            "input_dim": self.input_dim,
            "inputs": self.inputs.copy(),
            "labels": self.labels.copy(),
            "seen_count": self.seen_count,
            "rng_state": self.rng.bit_generator.state,
        }

    @classmethod
    def from_state(cls, state: dict) -> "ReplayBuffer":
        buf = cls(state["budget"], state["input_dim"])
        buf.inputs = np.asarray(state["inputs"], dtype=np.float64).copy()
        buf.labels = np.asarray(state["labels"], dtype=np.int64).copy()
        buf.seen_count = int(state["seen_count"])
        buf.rng.bit_generator.state = state["rng_state"]
        return buf
