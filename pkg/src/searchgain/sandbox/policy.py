"""Tabular softmax policy with a value head.

States are hashable keys discovered lazily; each gets a logit vector
(initialized to zeros, so the initial policy is uniform) and a scalar
value estimate.  The sampling distribution is softmax(logits / T) with a
fixed temperature, which the gradient math in the trainer accounts for.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SoftmaxPolicy:
    def __init__(self, temperature: float = 1.0):
        if temperature <= 0:
            raise ValueError("temperature must be > 0")
        self.temperature = temperature
        self.logits: dict[tuple, np.ndarray] = {}
        self.values: dict[tuple, float] = {}

    def ensure(self, state, n_actions: int) -> np.ndarray:
        vec = self.logits.get(state)
        if vec is None:
            vec = np.zeros(n_actions, dtype=np.float64)
            self.logits[state] = vec
        elif len(vec) != n_actions:
            raise ValueError(
                f"state {state!r} has {len(vec)} actions, asked for {n_actions}"
            )
        return vec

    def probs(self, state, n_actions: int) -> np.ndarray:
        scaled = self.ensure(state, n_actions) / self.temperature
        scaled = scaled - scaled.max()
        exp = np.exp(scaled)
        return exp / exp.sum()

    def log_probs(self, state, n_actions: int) -> np.ndarray:
        scaled = self.ensure(state, n_actions) / self.temperature
        scaled = scaled - scaled.max()
        return scaled - np.log(np.exp(scaled).sum())

    def sample(self, state, n_actions: int, rng: np.random.Generator) -> tuple[int, float]:
        probs = self.probs(state, n_actions)
        action = int(rng.choice(n_actions, p=probs))
        return action, float(np.log(probs[action]))

    def value(self, state) -> float:
        return self.values.get(state, 0.0)

    @property
    def state_count(self) -> int:
        return len(self.logits)

    def copy(self) -> "SoftmaxPolicy":
        clone = SoftmaxPolicy(self.temperature)
        clone.logits = {key: vec.copy() for key, vec in self.logits.items()}
        clone.values = dict(self.values)
        return clone


@dataclass
class PolicySnapshot:
    """The live policy paired with its frozen per-update reference."""

    current: SoftmaxPolicy
    reference: SoftmaxPolicy
