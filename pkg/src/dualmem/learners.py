"""Training strategies behind a single task-blind interface.

Learners see an undifferentiated stream of batches through `observe`; no
task identity ever crosses this interface. Evaluation-side snapshots are
taken by the harness, which is the only component aware of boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .buffer import ReplayBuffer
from .ema import MemoryPairConfig, SemanticMemory, init_pair
from .nn import (
    Architecture,
    Batch,
    LossReport,
    Network,
    backward,
    init_params,
    sgd_step,
    softmax,
)


@dataclass
class LearnerConfig:
    lr: float
    batch_size: int
    lam: float = 0.0
    memory_batch_size: int = 0
    buffer_budget: int = 0
    memory_pair: MemoryPairConfig | None = None
    # single-memory ablation: (alpha, rate)
    single_memory: tuple[float, float] | None = None
    epochs_per_task: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")


class Learner:
    """Base class: CE-only sequential SGD (the lower-bound strategy)."""

    tag = "sgd"
    components = ("working",)
    default_component = "working"

    def __init__(self, architecture: Architecture, config: LearnerConfig, seed):
        self.architecture = architecture
        self.config = config
        self._seeds = np.random.SeedSequence(seed).spawn(4)
        self.working = Network(architecture, init_params(self._seeds[0], architecture))
        self.step_count = 0

    def observe(self, batch: Batch) -> LossReport:
        report, grad = backward(self.working, batch)
        self.working = self.working.with_params(
            sgd_step(self.working.params, grad, self.config.lr)
        )
        self.step_count += 1
        return report

    def predict(self, inputs: np.ndarray, which: str | None = None) -> np.ndarray:
        which = which or self.default_component
        return self.component_network(which).forward(inputs)

    def component_network(self, which: str) -> Network:
        if which not in self.components:
            raise ValueError(f"{self.tag!r} learner has no {which!r} component")
        return self._component(which)

    def _component(self, which: str) -> Network:
        return self.working

    # -- checkpointing ----------------------------------------------------
    def get_state(self) -> dict:
        return {"working": self.working.params.values.copy(), "step_count": self.step_count}

    def set_state(self, state: dict) -> None:
        layout = self.architecture.layout()
        self.working = Network(
            self.architecture,
            type(self.working.params)(state["working"], layout),
        )
        self.step_count = int(state["step_count"])


class ErLearner(Learner):
    """Experience replay: CE over the stream batch joined with a uniformly
    sampled memory batch; reservoir offer of the stream samples."""

    tag = "er"

    def __init__(self, architecture, config, seed):
        super().__init__(architecture, config, seed)
        if config.buffer_budget <= 0 or config.memory_batch_size <= 0:
            raise ValueError("replay learners need a buffer budget and memory batch size")
        self.buffer = ReplayBuffer(
            config.buffer_budget,
            architecture.input_dim,
            rng=np.random.default_rng(self._seeds[1]),
        )

    def observe(self, batch: Batch) -> LossReport:
        combined = self._combined_batch(batch)[0]
        report, grad = backward(self.working, combined)
        self.working = self.working.with_params(
            sgd_step(self.working.params, grad, self.config.lr)
        )
        self._post_step(batch)
        return report

    def _combined_batch(self, batch: Batch):
        mem = self.buffer.sample_batch(self.config.memory_batch_size)
        if len(mem) == 0:
            return batch, mem
        return Batch.concat(batch, mem), mem

    def _post_step(self, stream_batch: Batch) -> None:
        # memory exemplars are never re-offered: seen_count tracks the stream
        self.buffer.offer_batch(stream_batch)
        self.step_count += 1

    def get_state(self) -> dict:
        state = super().get_state()
        state["buffer"] = self.buffer.to_state()
        return state

    def set_state(self, state: dict) -> None:
        super().set_state(state)
        self.buffer = ReplayBuffer.from_state(state["buffer"])


class ClsErLearner(ErLearner):
    """Dual-memory replay: the working model trains against per-exemplar
    consistency targets selected from plastic/stable EMA snapshots."""

    tag = "cls-er"
    components = ("working", "plastic", "stable")
    default_component = "stable"

    def __init__(self, architecture, config, seed):
        super().__init__(architecture, config, seed)
        if config.memory_pair is None:
            raise ValueError("dual-memory learner needs a MemoryPairConfig")
        self.plastic, self.stable = init_pair(
            self.working.params, config.memory_pair, self._seeds[2]
        )

    def observe(self, batch: Batch) -> LossReport:
        combined, mem = self._combined_batch(batch)
        if len(mem) > 0:
            targets = self._consistency_targets(mem)
            mask = np.zeros(len(combined), dtype=bool)
            mask[len(batch):] = True
            report, grad = backward(
                self.working, combined, consistency_targets=targets,
                memory_mask=mask, lam=self.config.lam,
            )
        else:
            report, grad = backward(self.working, combined, lam=self.config.lam)
        self.working = self.working.with_params(
            sgd_step(self.working.params, grad, self.config.lr)
        )
        self.plastic.maybe_update(self.working.params)
        self.stable.maybe_update(self.working.params)
        self._post_step(batch)
        return report

    def _consistency_targets(self, mem: Batch) -> np.ndarray:
        z_p = self.plastic.as_network(self.architecture).forward(mem.inputs)
        z_s = self.stable.as_network(self.architecture).forward(mem.inputs)
        rows = np.arange(len(mem))
        score_p = softmax(z_p)[rows, mem.labels]
        score_s = softmax(z_s)[rows, mem.labels]
        # ties go to the stable model (strict comparison)
        take_plastic = score_p > score_s
        return np.where(take_plastic[:, None], z_p, z_s)

    def _component(self, which: str) -> Network:
        if which == "working":
            return self.working
        mem = self.plastic if which == "plastic" else self.stable
        return mem.as_network(self.architecture)

    def get_state(self) -> dict:
        state = super().get_state()
        state["plastic"] = self.plastic.to_state()
        state["stable"] = self.stable.to_state()
        return state

    def set_state(self, state: dict) -> None:
        super().set_state(state)
        layout = self.architecture.layout()
        self.plastic = SemanticMemory.from_state(state["plastic"], layout)
        self.stable = SemanticMemory.from_state(state["stable"], layout)


class MeanErLearner(ErLearner):
    """Single-memory ablation: one EMA snapshot provides every consistency
    target (no selection) and serves as the inference model."""

    tag = "mean-er"
    components = ("working", "ema")
    default_component = "ema"

    def __init__(self, architecture, config, seed):
        super().__init__(architecture, config, seed)
        if config.single_memory is None:
            raise ValueError("single-memory learner needs (alpha, rate)")
        alpha, rate = config.single_memory
        self.ema = SemanticMemory(
            self.working.params, alpha, rate, rng=np.random.default_rng(self._seeds[2])
        )

    def observe(self, batch: Batch) -> LossReport:
        combined, mem = self._combined_batch(batch)
        if len(mem) > 0:
            targets = self.ema.as_network(self.architecture).forward(mem.inputs)
            mask = np.zeros(len(combined), dtype=bool)
            mask[len(batch):] = True
            report, grad = backward(
                self.working, combined, consistency_targets=targets,
                memory_mask=mask, lam=self.config.lam,
            )
        else:
            report, grad = backward(self.working, combined, lam=self.config.lam)
        self.working = self.working.with_params(
            sgd_step(self.working.params, grad, self.config.lr)
        )
        self.ema.maybe_update(self.working.params)
        self._post_step(batch)
        return report

    def _component(self, which: str) -> Network:
        if which == "working":
            return self.working
        return self.ema.as_network(self.architecture)

    def get_state(self) -> dict:
        state = super().get_state()
        state["ema"] = self.ema.to_state()
        return state

    def set_state(self, state: dict) -> None:
        super().set_state(state)
        self.ema = SemanticMemory.from_state(state["ema"], self.architecture.layout())


LEARNERS = {
    "sgd": Learner,
    "er": ErLearner,
    "cls-er": ClsErLearner,
    "mean-er": MeanErLearner,
}


def make_learner(tag: str, architecture: Architecture, config: LearnerConfig, seed) -> Learner:
    try:
        cls = LEARNERS[tag]
    except KeyError:
        raise ValueError(f"unknown learner {tag!r}; choose from {sorted(LEARNERS)}") from None
    return cls(architecture, config, seed)


def train_joint(batches, architecture: Architecture, config: LearnerConfig, seed) -> Network:
    """Upper bound: plain SGD over an already-shuffled union of all tasks."""
    learner = Learner(architecture, config, seed)
    for batch in batches:
        learner.observe(batch)
    return learner.working
