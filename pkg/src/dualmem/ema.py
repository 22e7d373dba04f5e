"""Stochastically updated exponential-moving-average parameter snapshots.

A semantic memory is a frozen-topology copy of the working model's
parameters that drifts toward them by EMA with decay `alpha`, firing with
probability `rate` per training step. A pair of them (fast "plastic",
slow "stable") forms the dual memory used by the main learner.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Architecture, Network, ParamVector


@dataclass(frozen=True)
class MemoryPairConfig:
    """Decay/update-rate pairs for the plastic and stable memories.

    The plastic memory must adapt faster than the stable one: either a
    strictly higher update rate or a strictly lower decay. `check=False`
    skips validation (used by degenerate-configuration tests only).
    """

    alpha_P: float
    alpha_S: float
    rate_P: float
    rate_S: float
    check: bool = True

    def __post_init__(self):
        if self.check:
            self.validate()

    def validate(self) -> None:
        for a in (self.alpha_P, self.alpha_S):
            if not (0.0 <= a < 1.0):
                raise ValueError(f"decay must be in [0,1), got {a}")
        for r in (self.rate_P, self.rate_S):
            if not (0.0 < r <= 1.0):
                raise ValueError(f"update rate must be in (0,1], got {r}")
        if self.alpha_P > self.alpha_S:
            raise ValueError("plastic decay must not exceed stable decay")
        if self.rate_P < self.rate_S:
            raise ValueError("plastic update rate must not be below stable rate")
        if self.rate_P == self.rate_S and self.alpha_P == self.alpha_S:
            raise ValueError(
                "plastic memory must adapt faster than stable: "
                "raise rate_P above rate_S or lower alpha_P below alpha_S"
            )


class SemanticMemory:
    def __init__(self, params: ParamVector, alpha: float, rate: float, seed=None, rng=None):
        if not (0.0 <= alpha < 1.0):
            raise ValueError("alpha must be in [0,1)")
        if not (0.0 < rate <= 1.0):
            raise ValueError("rate must be in (0,1]")
        self.params = params.copy()
        self._alpha = float(alpha)
        self._rate = float(rate)
        self.rng = rng if rng is not None else np.random.default_rng(seed)

    @property
    def alpha(self) -> float:
        return self._alpha

    @property
    def rate(self) -> float:
        return self._rate

    def maybe_update(self, working: ParamVector) -> bool:
        """One EMA step with probability `rate`.

        Exactly one uniform draw is consumed per call, fired or not, so a
        run's random stream does not depend on which updates landed.
        Returns whether the update fired.
        """
        self.params.require_same_layout(working)
        u = float(self.rng.random())
        fired = u < self._rate
        if fired:
            self.params = ParamVector(
                self._alpha * self.params.values + (1.0 - self._alpha) * working.values,
                self.params.layout,
            )
        return fired

    def as_network(self, architecture: Architecture) -> Network:
        """Read-only inference view; EMA is the only write path into the memory."""
        return Network(architecture, self.params.copy())

    def to_state(self) -> dict:
        return {
            "params": self.params.values.copy(),
            "alpha": self._alpha,
            "rate": self._rate,
            "rng_state": self.rng.bit_generator.state,
        }

    @classmethod
    def from_state(cls, state: dict, layout) -> "SemanticMemory":
        mem = cls(ParamVector(state["params"], layout), state["alpha"], state["rate"])
        mem.rng.bit_generator.state = state["rng_state"]
        return mem


def init_pair(working: ParamVector, config: MemoryPairConfig, seed):
    """Plastic and stable memories starting as exact copies of the working
    parameters, each with an independent random stream derived from `seed`."""
    if config.check:
        config.validate()
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    ss_plastic, ss_stable = ss.spawn(2)
    plastic = SemanticMemory(working, config.alpha_P, config.rate_P,
                             rng=np.random.default_rng(ss_plastic))
    stable = SemanticMemory(working, config.alpha_S, config.rate_S,
                            rng=np.random.default_rng(ss_stable))
    return plastic, stable
