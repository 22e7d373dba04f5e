"""Experiment orchestration: multi-seed runs, sweeps, checkpoints, reports.

Task boundaries are consumed here and only here, for evaluation snapshots
and checkpoint cadence; learners never see them.
"""

from __future__ import annotations

import base64
import csv
import dataclasses
import gzip
import hashlib
import itertools
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .ema import MemoryPairConfig
from .learners import LearnerConfig, make_learner, train_joint
from .metrics import AccuracyMatrix, evaluate
from .nn import Architecture
from .streams import RawDataset, TaskData, TaskStream, build_stream

CHECKPOINT_MAGIC = b"DUALMEM-CKPT\x00\x00\x00\x01"  # 16 bytes, last byte = format rev
assert len(CHECKPOINT_MAGIC) == 16


# -- hyperparameter defaults --------------------------------------------------
# Per-protocol, per-budget settings. Baseline (er/sgd/joint) learning rates
# were picked on a held-out validation split.

def _pair(a_p, a_s, r_p, r_s):
    return {"alpha_P": a_p, "alpha_S": a_s, "rate_P": r_p, "rate_S": r_s}


DEFAULT_HPARAMS: dict[tuple[str, str], dict] = {
    ("s-mnist", "cls-er"): {
        "batch_size": 10, "epochs_per_task": 1, "lam": 2.0,
        "by_buffer": {
            200: {"lr": 0.03, "memory_batch_size": 128, "memory_pair": _pair(0.99, 0.99, 1.0, 0.9)},
            500: {"lr": 0.1, "memory_batch_size": 32, "memory_pair": _pair(0.99, 0.99, 1.0, 0.9)},
            5120: {"lr": 0.1, "memory_batch_size": 32, "memory_pair": _pair(0.99, 0.99, 1.0, 0.8)},
        },
    },
    ("r-mnist", "cls-er"): {
        "batch_size": 128, "epochs_per_task": 1, "lam": 0.75, "lr": 0.2,
        "memory_batch_size": 128, "memory_pair": _pair(0.99, 0.999, 1.0, 1.0),
    },
    ("p-mnist", "cls-er"): {
        "batch_size": 128, "epochs_per_task": 1, "lam": 1.0, "lr": 0.2,
        "memory_batch_size": 128,
        "by_buffer": {
            200: {"memory_pair": _pair(0.99, 0.99, 1.0, 0.8)},
            500: {"memory_pair": _pair(0.99, 0.99, 1.0, 0.8)},
            5120: {"memory_pair": _pair(0.99, 0.99, 1.0, 0.9)},
        },
    },
    ("mnist-360", "cls-er"): {
        "batch_size": 16, "epochs_per_task": 1,
        "by_buffer": {
            200: {"lr": 0.2, "memory_batch_size": 16, "lam": 0.75,
                  "memory_pair": _pair(0.99, 0.999, 1.0, 1.0)},
            500: {"lr": 0.2, "memory_batch_size": 32, "lam": 1.25,
                  "memory_pair": _pair(0.99, 0.99, 1.0, 0.9)},
            1000: {"lr": 0.2, "memory_batch_size": 128, "lam": 0.75,
                   "memory_pair": _pair(0.99, 0.99, 1.0, 0.9)},
        },
    },
    ("s-mnist", "mean-er"): {
        "batch_size": 10, "epochs_per_task": 1, "lam": 2.0,
        "by_buffer": {
            200: {"lr": 0.03, "memory_batch_size": 128, "single_memory": (0.99, 1.0)},
            500: {"lr": 0.1, "memory_batch_size": 32, "single_memory": (0.99, 1.0)},
            5120: {"lr": 0.1, "memory_batch_size": 32, "single_memory": (0.99, 1.0)},
        },
    },
    ("r-mnist", "mean-er"): {
        "batch_size": 128, "epochs_per_task": 1, "lam": 0.75, "lr": 0.2,
        "memory_batch_size": 128, "single_memory": (0.999, 1.0),
    },
    ("p-mnist", "mean-er"): {
        "batch_size": 128, "epochs_per_task": 1, "lam": 1.0, "lr": 0.2,
        "memory_batch_size": 128,
        "by_buffer": {
            200: {"single_memory": (0.99, 0.9)},
            500: {"single_memory": (0.99, 1.0)},
            5120: {"single_memory": (0.99, 0.9)},
        },
    },
    ("s-mnist", "er"): {"batch_size": 10, "epochs_per_task": 1,
                        "memory_batch_size": 10,
                        "by_buffer": {200: {"lr": 0.03}, 500: {"lr": 0.1},
                                      5120: {"lr": 0.1}}},
    ("r-mnist", "er"): {"batch_size": 128, "epochs_per_task": 1, "lr": 0.2,
                        "memory_batch_size": 128},
    ("p-mnist", "er"): {"batch_size": 128, "epochs_per_task": 1, "lr": 0.2,
                        "memory_batch_size": 128},
    ("mnist-360", "er"): {"batch_size": 16, "epochs_per_task": 1, "lr": 0.2,
                          "memory_batch_size": 16},
    ("s-mnist", "sgd"): {"batch_size": 10, "epochs_per_task": 1, "lr": 0.03},
    ("r-mnist", "sgd"): {"batch_size": 128, "epochs_per_task": 1, "lr": 0.2},
    ("p-mnist", "sgd"): {"batch_size": 128, "epochs_per_task": 1, "lr": 0.2},
    ("mnist-360", "sgd"): {"batch_size": 16, "epochs_per_task": 1, "lr": 0.2},
    ("s-mnist", "joint"): {"batch_size": 10, "epochs_per_task": 1, "lr": 0.1},
    ("r-mnist", "joint"): {"batch_size": 128, "epochs_per_task": 1, "lr": 0.2},
    ("p-mnist", "joint"): {"batch_size": 128, "epochs_per_task": 1, "lr": 0.2},
    ("mnist-360", "joint"): {"batch_size": 16, "epochs_per_task": 1, "lr": 0.2},
}


def default_hparams(protocol: str, learner: str, buffer_size: int) -> dict:
    key = (protocol, learner)
    if key not in DEFAULT_HPARAMS:
        raise ValueError(f"no default hyperparameters for {key}")
    entry = dict(DEFAULT_HPARAMS[key])
    by_buffer = entry.pop("by_buffer", None)
    if by_buffer is not None:
        if buffer_size not in by_buffer:
            raise ValueError(f"no defaults for {key} at buffer size {buffer_size}")
        entry.update(by_buffer[buffer_size])
    return entry


@dataclass
class ExperimentConfig:
    protocol: str
    learner: str
    buffer_sizes: list[int] = field(default_factory=lambda: [500])
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    lr: float | None = None
    lam: float | None = None
    batch_size: int | None = None
    memory_batch_size: int | None = None
    memory_pair: dict | None = None
    single_memory: tuple[float, float] | None = None
    epochs_per_task: int | None = None
    eval_cadence: str = "task"  # or "final"
    output_dir: str | None = None
    checkpoint_dir: str | None = None

    @classmethod
    def with_base_seed(cls, protocol, learner, buffer_sizes, base_seed=0, n_seeds=10, **kw):
        return cls(protocol, learner, list(buffer_sizes),
                   seeds=[base_seed + i for i in range(n_seeds)], **kw)

    def resolved(self, buffer_size: int) -> dict:
        """Defaults for (protocol, learner, buffer) with explicit overrides on top."""
        params = default_hparams(self.protocol, self.learner, buffer_size)
        for name in ("lr", "lam", "batch_size", "memory_batch_size",
                     "memory_pair", "single_memory", "epochs_per_task"):
            value = getattr(self, name)
            if value is not None:
                params[name] = value
        params["buffer_budget"] = buffer_size
        return params

    def learner_config(self, buffer_size: int) -> LearnerConfig:
        params = self.resolved(buffer_size)
        pair = params.get("memory_pair")
        single = params.get("single_memory")
        return LearnerConfig(
            lr=params["lr"],
            lam=params.get("lam", 0.0),
            batch_size=params["batch_size"],
            memory_batch_size=params.get("memory_batch_size", 0),
            buffer_budget=buffer_size if self.learner not in ("sgd", "joint") else 0,
            memory_pair=MemoryPairConfig(**pair) if pair else None,
            single_memory=tuple(single) if single else None,
            epochs_per_task=params.get("epochs_per_task", 1),
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def config_hash(config: ExperimentConfig, buffer_size: int, seed: int | None = None) -> str:
    payload = {
        "protocol": config.protocol,
        "learner": config.learner,
        "params": config.resolved(buffer_size),
        "eval_cadence": config.eval_cadence,
        "seed": seed,
        "version": __version__,
    }
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# -- checkpoint serialization -------------------------------------------------

def _encode(obj):
    if isinstance(obj, np.ndarray):
        return {
            "__ndarray__": True,
            "dtype": str(obj.dtype),
            "shape": list(obj.shape),
            "data": base64.b64encode(np.ascontiguousarray(obj).tobytes()).decode("ascii"),
        }
    if isinstance(obj, dict):
        return {k: _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def _decode(obj):
    if isinstance(obj, dict):
        if obj.get("__ndarray__"):
            data = base64.b64decode(obj["data"])
            return np.frombuffer(data, dtype=obj["dtype"]).reshape(obj["shape"]).copy()
        return {k: _decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v) for v in obj]
    return obj


def save_checkpoint(path, payload: dict) -> None:
    body = gzip.compress(json.dumps(_encode(payload)).encode())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(body)


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(16)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        return _decode(json.loads(gzip.decompress(fh.read()).decode()))


# -- single-seed training -----------------------------------------------------

ARCHITECTURE = Architecture(input_dim=784, hidden_dims=(100, 100), output_dim=10)


def _snapshot(learner, stream, upto_task, matrices):
    for comp in learner.components:
        accs = evaluate(learner.component_network(comp), stream, upto_task)
        matrices[comp].record(upto_task, accs)


def run_seed(config: ExperimentConfig, buffer_size: int, seed: int, data: RawDataset,
             stop_after_task: int | None = None, resume_from=None):
    """Train one seed end to end (or up to `stop_after_task`).

    Returns a result dict with per-component final accuracies and, when the
    cadence is per-task, the full accuracy matrices. Writes a checkpoint at
    every task boundary when the config names a checkpoint directory.
    """
    chash = config_hash(config, buffer_size, seed)
    stream = build_stream(config.protocol, data, seed)
    lconfig = config.learner_config(buffer_size)

    if config.learner == "joint":
        t0 = time.time()
        batches = stream.joint_batches(lconfig.batch_size,
                                       np.random.SeedSequence([seed, 7]))
        net = train_joint(batches, ARCHITECTURE, lconfig, seed)
        accs = evaluate(net, stream)
        return {
            "seed": seed, "config_hash": chash, "version": __version__,
            "final": {"working": {"per_task": accs.tolist(), "mean": float(accs.mean())}},
            "default_component": "working",
            "matrices": None,
            "wall_clock": time.time() - t0,
        }

    learner = make_learner(config.learner, ARCHITECTURE, lconfig, seed)
    per_task_eval = config.eval_cadence == "task" and stream.shared_test is None
    matrices = {c: AccuracyMatrix(stream.n_tasks) for c in learner.components} \
        if per_task_eval else None
    start_task = 0

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt["config_hash"] != chash:
            raise ValueError("checkpoint was written by a different configuration")
        learner.set_state(ckpt["learner_state"])
        start_task = int(ckpt["completed_task"]) + 1
        if matrices is not None:
            for comp, entries in ckpt["matrices"].items():
                matrices[comp] = AccuracyMatrix(stream.n_tasks, entries)

    t0 = time.time()
    for task_idx in range(start_task, stream.n_tasks):
        task = stream.tasks[task_idx]
        for epoch in range(lconfig.epochs_per_task):
            for batch in task.train_batches(lconfig.batch_size, epoch):
                learner.observe(batch)
        if matrices is not None:
            _snapshot(learner, stream, task_idx, matrices)
        if config.checkpoint_dir is not None:
            path = Path(config.checkpoint_dir) / f"{chash}_seed{seed}_task{task_idx}.ckpt"
            save_checkpoint(path, {
                "config_hash": chash, "version": __version__,
                "protocol": config.protocol, "learner": config.learner,
                "buffer_size": buffer_size, "seed": seed,
                "completed_task": task_idx,
                "learner_state": learner.get_state(),
                "matrices": {c: m.entries for c, m in matrices.items()}
                if matrices is not None else None,
            })
        if stop_after_task is not None and task_idx >= stop_after_task:
            break

    final = {}
    for comp in learner.components:
        accs = evaluate(learner.component_network(comp), stream)
        final[comp] = {"per_task": accs.tolist(), "mean": float(accs.mean())}
    return {
        "seed": seed, "config_hash": chash, "version": __version__,
        "final": final,
        "default_component": learner.default_component,
        "matrices": {c: m.to_lists() for c, m in matrices.items()}
        if matrices is not None else None,
        "wall_clock": time.time() - t0,
        "_learner": learner,  # stripped before persistence; used by analyses
    }


@dataclass
class RunRecord:
    protocol: str
    learner: str
    buffer_size: int
    config_hash: str
    version: str
    resolved_params: dict
    seeds: list[int]
    per_seed: list[dict]
    mean: float
    std: float
    component_means: dict[str, float]
    wall_clock: float

    def cell(self) -> str:
        return f"{self.mean:.2f}±{self.std:.2f}"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for rec in d["per_seed"]:
            rec.pop("_learner", None)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)


def run_experiment(config: ExperimentConfig, data: RawDataset,
                   keep_learners: bool = False) -> list[RunRecord]:
    """One RunRecord per buffer size: all seeds trained, means aggregated over
    the learner's default inference component (unbiased std)."""
    records = []
    buffers = config.buffer_sizes if config.learner not in ("sgd", "joint") else [0]
    for buffer_size in buffers:
        t0 = time.time()
        per_seed = []
        for seed in config.seeds:
            result = run_seed(config, buffer_size, seed, data)
            if not keep_learners:
                result.pop("_learner", None)
            per_seed.append(result)
        default_comp = per_seed[0]["default_component"]
        means = np.array([r["final"][default_comp]["mean"] for r in per_seed])
        comp_means = {
            comp: float(np.mean([r["final"][comp]["mean"] for r in per_seed]))
            for comp in per_seed[0]["final"]
        }
        records.append(RunRecord(
            protocol=config.protocol,
            learner=config.learner,
            buffer_size=buffer_size,
            config_hash=config_hash(config, buffer_size),
            version=__version__,
            resolved_params=_encode_params(config.resolved(buffer_size)),
            seeds=list(config.seeds),
            per_seed=per_seed,
            mean=float(means.mean()),
            std=float(means.std(ddof=1)) if means.size > 1 else 0.0,
            component_means=comp_means,
            wall_clock=time.time() - t0,
        ))
    return records


def _encode_params(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


# -- sweeps -------------------------------------------------------------------

SWEEPABLE = ("lam", "alpha_S", "alpha_P", "rate_S", "rate_P")


def split_validation(stream: TaskStream, frac: float, seed) -> tuple[TaskStream, list]:
    """Carve a seeded validation split out of every task's training data."""
    rng = np.random.default_rng(np.random.SeedSequence([int(stream.seed), int(seed), 99]))
    train_tasks, val_sets = [], []
    for t in stream.tasks:
        order = rng.permutation(t.n_train)
        n_val = max(1, int(round(frac * t.n_train)))
        val_idx, train_idx = order[:n_val], order[n_val:]
        val_sets.append((t.train_rows(val_idx), t.train_y[val_idx]))
        transform = t.transform
        if transform is not None and transform["kind"] == "per_sample_rotation":
            transform = {"kind": "per_sample_rotation",
                         "angles": transform["angles"][train_idx]}
        train_tasks.append(TaskData(
            t.train_x[train_idx], t.train_y[train_idx],
            t.test_x, t.test_y, t.class_ids, transform, seed=t.seed,
        ))
    carved = TaskStream(train_tasks, stream.protocol_tag, stream.total_classes,
                        stream.seed, shared_test=stream.shared_test)
    return carved, val_sets


@dataclass
class SweepPoint:
    params: dict
    record: RunRecord | None
    validation_mean: float | None
    skipped_reason: str | None = None


def sweep(base: ExperimentConfig, grid: dict[str, list], data: RawDataset,
          val_frac: float = 0.1) -> list[SweepPoint]:
    """Grid over {lam, alpha_S, alpha_P, rate_S, rate_P}; infeasible memory
    configurations are skipped with a reason. Points are ordered by the
    hash of their resolved configuration for a stable report."""
    for name in grid:
        if name not in SWEEPABLE:
            raise ValueError(f"cannot sweep {name!r}; choose from {SWEEPABLE}")
    names = sorted(grid)
    points = []
    for combo in itertools.product(*(grid[n] for n in names)):
        overrides = dict(zip(names, combo))
        cfg = replace(base)
        if "lam" in overrides:
            cfg.lam = overrides["lam"]
        pair_over = {k: v for k, v in overrides.items() if k != "lam"}
        if pair_over:
            pair = dict(base.resolved(base.buffer_sizes[0]).get("memory_pair") or {})
            pair.update({
                "alpha_P": pair_over.get("alpha_P", pair.get("alpha_P")),
                "alpha_S": pair_over.get("alpha_S", pair.get("alpha_S")),
                "rate_P": pair_over.get("rate_P", pair.get("rate_P")),
                "rate_S": pair_over.get("rate_S", pair.get("rate_S")),
            })
            try:
                MemoryPairConfig(**pair)
            except ValueError as err:
                points.append(SweepPoint(overrides, None, None, str(err)))
                continue
            cfg.memory_pair = pair
        record, val_mean = _run_sweep_point(cfg, data, val_frac)
        points.append(SweepPoint(overrides, record, val_mean))
    evaluated = [p for p in points if p.record is not None]
    evaluated.sort(key=lambda p: p.record.config_hash)
    skipped = [p for p in points if p.record is None]
    return evaluated + skipped


def _run_sweep_point(config: ExperimentConfig, data: RawDataset, val_frac: float):
    buffer_size = config.buffer_sizes[0]
    lconfig = config.learner_config(buffer_size)
    val_means, per_seed = [], []
    for seed in config.seeds:
        stream = build_stream(config.protocol, data, seed)
        carved, val_sets = split_validation(stream, val_frac, seed)
        learner = make_learner(config.learner, ARCHITECTURE, lconfig, seed)
        for task in carved.tasks:
            for epoch in range(lconfig.epochs_per_task):
                for batch in task.train_batches(lconfig.batch_size, epoch):
                    learner.observe(batch)
        net = learner.component_network(learner.default_component)
        from .metrics import accuracy  # local import avoids a cycle at module load

        val_accs = [accuracy(net, x, y) for x, y in val_sets]
        val_means.append(float(np.mean(val_accs)))
        accs = evaluate(net, carved)
        per_seed.append({
            "seed": seed,
            "config_hash": config_hash(config, buffer_size, seed),
            "version": __version__,
            "final": {learner.default_component: {"per_task": accs.tolist(),
                                                  "mean": float(accs.mean())}},
            "default_component": learner.default_component,
            "matrices": None,
            "wall_clock": 0.0,
        })
    means = np.array([r["final"][r["default_component"]]["mean"] for r in per_seed])
    record = RunRecord(
        protocol=config.protocol, learner=config.learner, buffer_size=buffer_size,
        config_hash=config_hash(config, buffer_size), version=__version__,
        resolved_params=_encode_params(config.resolved(buffer_size)),
        seeds=list(config.seeds), per_seed=per_seed,
        mean=float(means.mean()),
        std=float(means.std(ddof=1)) if means.size > 1 else 0.0,
        component_means={}, wall_clock=0.0,
    )
    return record, float(np.mean(val_means))


# -- reporting ----------------------------------------------------------------

REPORT_COLUMNS = ("protocol", "learner", "buffer", "mean", "std", "cell",
                  "seeds", "config_hash", "version")


def emit_report(records: list[RunRecord], outdir) -> dict[str, str]:
    """Write records.json, results.csv, and a human-readable results.txt."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    json_path = outdir / "records.json"
    with open(json_path, "w") as fh:
        json.dump([r.to_dict() for r in records], fh, indent=1)

    csv_path = outdir / "results.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in records:
            w.writerow([r.protocol, r.learner, r.buffer_size,
                        f"{r.mean:.6f}", f"{r.std:.6f}", r.cell(),
                        " ".join(str(s) for s in r.seeds), r.config_hash, r.version])

    txt_path = outdir / "results.txt"
    with open(txt_path, "w") as fh:
        fh.write(f"{'protocol':<12}{'learner':<10}{'buffer':>8}  accuracy\n")
        for r in records:
            fh.write(f"{r.protocol:<12}{r.learner:<10}{r.buffer_size:>8}  {r.cell()}\n")
    return {"json": str(json_path), "csv": str(csv_path), "txt": str(txt_path)}


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def load_records(path) -> list[RunRecord]:
    with open(path) as fh:
        return [RunRecord.from_dict(d) for d in json.load(fh)]
