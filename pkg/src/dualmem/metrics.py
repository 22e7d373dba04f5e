"""Evaluation and analysis: accuracy matrices, recency-bias probabilities,
calibration, and weight-perturbation robustness."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Network, cross_entropy_loss, softmax
from .streams import TaskStream

#: default noise grid for the flat-minima probe (logged with every result)
DEFAULT_SIGMAS = (0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5)

_EVAL_CHUNK = 4096  # forward-pass chunk; keeps peak memory flat


def _predict_logits(net: Network, inputs: np.ndarray) -> np.ndarray:
    outs = [net.forward(inputs[i : i + _EVAL_CHUNK]) for i in range(0, inputs.shape[0], _EVAL_CHUNK)]
    return np.concatenate(outs) if len(outs) > 1 else outs[0]


def accuracy(net: Network, inputs: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy in percent, argmax over the full output head."""
    pred = _predict_logits(net, inputs).argmax(axis=1)
    return 100.0 * float(np.mean(pred == labels))


def evaluate(net: Network, stream: TaskStream, upto_task: int | None = None) -> np.ndarray:
    """Per-task accuracies on test sets 0..upto_task (single-head: the argmax
    always ranges over every class, never only the task's own)."""
    if stream.shared_test is not None:
        x, y = stream.shared_test_set()
        return np.array([accuracy(net, x, y)])
    if upto_task is None:
        upto_task = stream.n_tasks - 1
    accs = []
    for task in stream.tasks[: upto_task + 1]:
        x, y = task.test_set()
        accs.append(accuracy(net, x, y))
    return np.array(accs)


@dataclass
class AccuracyMatrix:
    """entries[i][j]: accuracy on task j's test set after training task i."""

    n_tasks: int
    entries: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.entries is None:
            self.entries = np.full((self.n_tasks, self.n_tasks), np.nan)
        else:
            self.entries = np.asarray(self.entries, dtype=np.float64)

    def record(self, after_task: int, accs: np.ndarray) -> None:
        self.entries[after_task, : accs.size] = accs

    def final_mean(self) -> float:
        return float(np.mean(self.entries[-1]))

    def to_lists(self):
        return [[None if np.isnan(v) else float(v) for v in row] for row in self.entries]


def task_probabilities(net: Network, stream: TaskStream) -> np.ndarray:
    """Average softmax mass assigned to each task's class group over the whole
    test set, normalized to a probability vector. Measures recency bias."""
    groups = stream.task_class_groups()
    if stream.shared_test is not None:
        parts = [stream.shared_test_set()]
    else:
        parts = [t.test_set() for t in stream.tasks]
    probs = np.concatenate([softmax(_predict_logits(net, x)) for x, _ in parts])
    mass = np.array([probs[:, list(g)].sum(axis=1).mean() for g in groups])
    return mass / mass.sum()


@dataclass
class CalibrationReport:
    bin_edges: np.ndarray
    bin_confidence: np.ndarray
    bin_accuracy: np.ndarray
    bin_count: np.ndarray
    ece: float


def calibration(net: Network, inputs: np.ndarray, labels: np.ndarray,
                n_bins: int = 10) -> CalibrationReport:
    """Reliability bins over max-softmax confidence and the expected
    calibration error (count-weighted |accuracy - confidence|)."""
    probs = softmax(_predict_logits(net, inputs))
    confidence = probs.max(axis=1)
    correct = probs.argmax(axis=1) == labels
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    # bin b covers (edges[b], edges[b+1]]; confidence 0 lands in bin 0
    which = np.clip(np.ceil(confidence * n_bins).astype(int) - 1, 0, n_bins - 1)
    conf = np.zeros(n_bins)
    acc = np.zeros(n_bins)
    count = np.zeros(n_bins, dtype=np.int64)
    for b in range(n_bins):
        m = which == b
        count[b] = int(m.sum())
        if count[b]:
            conf[b] = float(confidence[m].mean())
            acc[b] = float(correct[m].mean())
    n = confidence.size
    ece = float(np.sum(count / n * np.abs(acc - conf)))
    return CalibrationReport(edges, conf, acc, count, ece)


@dataclass
class PerturbationCurve:
    sigmas: np.ndarray
    mean_loss: np.ndarray
    mean_accuracy: np.ndarray
    draws_per_sigma: int
    mode: str


def perturbation_curve(net: Network, inputs: np.ndarray, labels: np.ndarray,
                       sigmas=DEFAULT_SIGMAS, draws_per_sigma: int = 20,
                       seed=0, mode: str = "absolute") -> PerturbationCurve:
    """Loss/accuracy under independent Gaussian weight noise of growing
    strength. `relative` mode scales sigma by each layer's weight std.
    The model itself is never mutated."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if sigmas[0] != 0.0 or np.any(np.diff(sigmas) < 0):
        raise ValueError("sigmas must be sorted ascending and start at 0")
    if mode not in ("absolute", "relative"):
        raise ValueError("mode must be 'absolute' or 'relative'")
    rng = np.random.default_rng(seed)
    base = net.params.values
    layer_scale = np.ones_like(base)
    if mode == "relative":
        offset = 0
        for name, shape in net.params.layout:
            size = int(np.prod(shape))
            seg = base[offset : offset + size]
            layer_scale[offset : offset + size] = max(float(seg.std()), 1e-12)
            offset += size

    def measure(params_values):
        probe = net.with_params(type(net.params)(params_values, net.params.layout))
        logits = _predict_logits(probe, inputs)
        loss, _ = cross_entropy_loss(logits, labels)
        acc = 100.0 * float(np.mean(logits.argmax(axis=1) == labels))
        return loss, acc

    loss0, acc0 = measure(base)
    mean_loss, mean_acc = [loss0], [acc0]
    for sigma in sigmas[1:]:
        losses, accs = [], []
        for _ in range(draws_per_sigma):
            noise = rng.normal(0.0, sigma, size=base.size) * layer_scale
            loss, acc = measure(base + noise)
            losses.append(loss)
            accs.append(acc)
        mean_loss.append(float(np.mean(losses)))
        mean_acc.append(float(np.mean(accs)))
    return PerturbationCurve(sigmas, np.array(mean_loss), np.array(mean_acc),
                             draws_per_sigma, mode)


# -- CSV / SVG emission -------------------------------------------------------

def write_matrix_csv(path, matrix: AccuracyMatrix) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["after_task"] + [f"task_{j}" for j in range(matrix.n_tasks)])
        for i, row in enumerate(matrix.entries):
            w.writerow([i] + ["" if np.isnan(v) else f"{v:.4f}" for v in row])


def write_curve_csv(path, curve: PerturbationCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sigma", "mean_loss", "mean_accuracy", "draws", "mode"])
        for s, l, a in zip(curve.sigmas, curve.mean_loss, curve.mean_accuracy):
            w.writerow([s, l, a, curve.draws_per_sigma, curve.mode])


def write_calibration_csv(path, report: CalibrationReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_low", "bin_high", "confidence", "accuracy", "count", "ece"])
        for b in range(report.bin_count.size):
            w.writerow([
                report.bin_edges[b], report.bin_edges[b + 1],
                report.bin_confidence[b], report.bin_accuracy[b],
                report.bin_count[b], report.ece,
            ])


def plot_analysis_svg(outdir, matrix: AccuracyMatrix | None = None,
                      curves: dict[str, PerturbationCurve] | None = None,
                      calib: dict[str, CalibrationReport] | None = None,
                      task_probs: dict[str, np.ndarray] | None = None) -> list[str]:
    """Optional SVG renderings of the analysis artifacts."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    if matrix is not None:
        fig, ax = plt.subplots(figsize=(4, 4))
        im = ax.imshow(matrix.entries, vmin=0, vmax=100, cmap="viridis")
        ax.set_xlabel("task evaluated")
        ax.set_ylabel("evaluated after task")
        fig.colorbar(im, ax=ax, label="accuracy (%)")
        p = outdir / "accuracy_matrix.svg"
        fig.savefig(p)
        plt.close(fig)
        written.append(str(p))
    if curves:
        fig, axes = plt.subplots(1, 2, figsize=(9, 4))
        for label, c in curves.items():
            axes[0].plot(c.sigmas, c.mean_loss, marker="o", label=label)
            axes[1].plot(c.sigmas, c.mean_accuracy, marker="o", label=label)
        axes[0].set_xlabel("noise sigma"); axes[0].set_ylabel("train loss")
        axes[1].set_xlabel("noise sigma"); axes[1].set_ylabel("train accuracy (%)")
        axes[1].legend()
        p = outdir / "perturbation.svg"
        fig.savefig(p)
        plt.close(fig)
        written.append(str(p))
    if calib:
        fig, axes = plt.subplots(1, len(calib), figsize=(4 * len(calib), 4), squeeze=False)
        for ax, (label, r) in zip(axes[0], calib.items()):
            centers = (r.bin_edges[:-1] + r.bin_edges[1:]) / 2
            ax.bar(centers, r.bin_accuracy, width=0.1, edgecolor="k", label="accuracy")
            ax.plot([0, 1], [0, 1], "k--", lw=1)
            ax.set_title(f"{label} (ECE={r.ece:.3f})")
            ax.set_xlabel("confidence")
        p = outdir / "reliability.svg"
        fig.savefig(p)
        plt.close(fig)
        written.append(str(p))
    if task_probs:
        fig, ax = plt.subplots(figsize=(5, 4))
        for label, v in task_probs.items():
            ax.plot(np.arange(v.size), v, marker="o", label=label)
        ax.set_xlabel("task")
        ax.set_ylabel("prediction probability")
        ax.legend()
        p = outdir / "task_probabilities.svg"
        fig.savefig(p)
        plt.close(fig)
        written.append(str(p))
    return written
