"""Benchmark protocols as ordered task streams over MNIST.

A stream exposes per-task training batches to the harness, which feeds
them to learners without any task identity attached. Test sets, class
groupings, and transform descriptors live on the evaluation side only.

Protocols: class-incremental digit splits, fixed-rotation and
pixel-permutation domain shifts, the rotating two-digit stream, and a
generic probabilistic phase sampler with recurring classes.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Batch

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DatasetError(RuntimeError):
    pass


@dataclass
class RawDataset:
    train_x: np.ndarray  # float32, [n, 784], scaled to [0,1]
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def n_classes(self) -> int:
        return int(self.train_y.max()) + 1


def _read_idx(path: Path, expect_magic: int) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        header = fh.read(4)
        if len(header) < 4:
            raise DatasetError(f"{path}: truncated header")
        (magic,) = struct.unpack(">I", header)
        if magic != expect_magic:
            raise DatasetError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
        ndim = magic & 0xFF
        dims = struct.unpack(f">{ndim}I", fh.read(4 * ndim))
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    expected = int(np.prod(dims))
    if data.size != expected:
        raise DatasetError(f"{path}: truncated payload ({data.size} bytes, expected {expected})")
    return data.reshape(dims)


def _find_file(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        p = root / name
        if p.exists():
            return p
    raise DatasetError(f"missing {stem}[.gz] under {root}")


def load_mnist(path) -> RawDataset:
    """Read the four IDX files (raw or gzipped) and scale pixels to [0,1]."""
    root = Path(path)
    ti = _read_idx(_find_file(root, MNIST_FILES["train_images"]), IMAGE_MAGIC)
    tl = _read_idx(_find_file(root, MNIST_FILES["train_labels"]), LABEL_MAGIC)
    vi = _read_idx(_find_file(root, MNIST_FILES["test_images"]), IMAGE_MAGIC)
    vl = _read_idx(_find_file(root, MNIST_FILES["test_labels"]), LABEL_MAGIC)
    if ti.shape[0] != tl.shape[0] or vi.shape[0] != vl.shape[0]:
        raise DatasetError("image/label count mismatch")
    return RawDataset(
        train_x=(ti.reshape(ti.shape[0], -1).astype(np.float32) / 255.0),
        train_y=tl.astype(np.int64),
        test_x=(vi.reshape(vi.shape[0], -1).astype(np.float32) / 255.0),
        test_y=vl.astype(np.int64),
    )


def rotate_images(flat: np.ndarray, angle_deg) -> np.ndarray:
    """Rotate 28x28 images about their centre with bilinear interpolation.

    `angle_deg` is a scalar (one angle for the whole stack) or a per-image
    array. Pixels sampled from outside the frame are zero.
    """
    flat = np.asarray(flat)
    angle = np.asarray(angle_deg, dtype=np.float64)
    if angle.ndim == 0 and float(angle) == 0.0:
        return flat.copy()
    n = flat.shape[0]
    side = 28
    img = flat.reshape(n, side, side).astype(np.float64)
    theta = np.deg2rad(angle).reshape(-1, 1, 1)  # broadcast over pixels
    cos, sin = np.cos(theta), np.sin(theta)
    ys, xs = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    yc = ys - (side - 1) / 2.0
    xc = xs - (side - 1) / 2.0
    # inverse map: source coordinates in the unrotated image
    src_y = cos * yc + sin * xc + (side - 1) / 2.0
    src_x = -sin * yc + cos * xc + (side - 1) / 2.0
    if src_y.shape[0] == 1:
        src_y = np.broadcast_to(src_y, (n, side, side))
        src_x = np.broadcast_to(src_x, (n, side, side))
    y0 = np.floor(src_y).astype(np.int64)
    x0 = np.floor(src_x).astype(np.int64)
    wy = src_y - y0
    wx = src_x - x0
    out = np.zeros((n, side, side))
    rows = np.arange(n)[:, None, None]
    for dy, dx, w in (
        (0, 0, (1 - wy) * (1 - wx)),
        (0, 1, (1 - wy) * wx),
        (1, 0, wy * (1 - wx)),
        (1, 1, wy * wx),
    ):
        yi = y0 + dy
        xi = x0 + dx
        valid = (yi >= 0) & (yi < side) & (xi >= 0) & (xi < side)
        yi = np.clip(yi, 0, side - 1)
        xi = np.clip(xi, 0, side - 1)
        out += np.where(valid, w * img[rows, yi, xi], 0.0)
    return out.reshape(n, side * side)


def permute_images(flat: np.ndarray, perm: np.ndarray) -> np.ndarray:
    return np.asarray(flat)[:, perm]


def _apply_transform(x: np.ndarray, transform: dict | None) -> np.ndarray:
    if transform is None:
        return np.asarray(x, dtype=np.float64)
    kind = transform["kind"]
    if kind == "rotation":
        return rotate_images(x, transform["angle"])
    if kind == "per_sample_rotation":
        return rotate_images(x, transform["angles"])
    if kind == "permutation":
        return np.asarray(permute_images(x, transform["perm"]), dtype=np.float64)
    raise ValueError(f"unknown transform kind {kind!r}")


def _transform_descriptor(transform: dict | None) -> dict | None:
    if transform is None:
        return None
    kind = transform["kind"]
    if kind == "rotation":
        return {"kind": kind, "angle": float(transform["angle"])}
    if kind == "per_sample_rotation":
        angles = np.asarray(transform["angles"])
        return {
            "kind": kind,
            "angle_start": float(angles[0]),
            "angle_end": float(angles[-1]),
            "count": int(angles.size),
        }
    if kind == "permutation":
        perm = np.asarray(transform["perm"])
        return {"kind": kind, "identity": bool(np.array_equal(perm, np.arange(perm.size)))}
    raise ValueError(kind)


@dataclass
class TaskData:
    """One task: a shuffled training slice, its test set, and the transform
    applied identically to both. Class ids are reporting-side metadata."""

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray | None
    test_y: np.ndarray | None
    class_ids: tuple[int, ...]
    transform: dict | None = None
    seed: int = 0
    # optional lazy shuffle into a shared train_x (domain-shift protocols
    # reuse the full base set per task; copying it 20 times would not fit)
    train_order: np.ndarray | None = None
    _test_cache: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_train(self) -> int:
        if self.train_order is not None:
            return int(self.train_order.size)
        return self.train_x.shape[0]

    def train_batches(self, batch_size: int, epoch: int = 0):
        """Yield transformed training batches. Epochs past the first reshuffle
        with a derived seed; per-sample transforms pin the emitted order."""
        n = self.n_train
        order = np.arange(n)
        per_sample = self.transform is not None and self.transform["kind"] == "per_sample_rotation"
        if epoch > 0 and not per_sample:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, epoch]))
            order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            x = self.train_x[self._rows(idx)]
            if per_sample:
                x = rotate_images(x, self.transform["angles"][idx])
            else:
                x = _apply_transform(x, self.transform)
            yield Batch(x, self.train_y[idx])

    def _rows(self, idx: np.ndarray) -> np.ndarray:
        return idx if self.train_order is None else self.train_order[idx]

    def train_rows(self, idx: np.ndarray) -> np.ndarray:
        """Transformed training inputs at the given positions (joint training)."""
        x = self.train_x[self._rows(idx)]
        if self.transform is not None and self.transform["kind"] == "per_sample_rotation":
            return rotate_images(x, self.transform["angles"][idx])
        return _apply_transform(x, self.transform)

    def test_set(self):
        """Transformed test inputs/labels; inputs cached as float32."""
        if self.test_x is None:
            return None
        if self._test_cache is None:
            self._test_cache = _apply_transform(self.test_x, self.transform).astype(np.float32)
        return np.asarray(self._test_cache, dtype=np.float64), self.test_y

    def descriptor(self) -> dict:
        return {
            "class_ids": list(self.class_ids),
            "n_train": int(self.n_train),
            "n_test": 0 if self.test_y is None else int(self.test_y.shape[0]),
            "transform": _transform_descriptor(self.transform),
        }


@dataclass
class TaskStream:
    tasks: list[TaskData]
    protocol_tag: str
    total_classes: int
    seed: int
    # protocols with a single evaluation set (no per-task test split)
    shared_test: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def shared_test_set(self):
        if self.shared_test is None:
            return None
        x, y = self.shared_test
        return np.asarray(x, dtype=np.float64), y

    def task_class_groups(self) -> list[tuple[int, ...]]:
        return [t.class_ids for t in self.tasks]

    def joint_batches(self, batch_size: int, seed):
        """Shuffled union of every task's training data, transforms applied."""
        rng = np.random.default_rng(seed)
        pairs = np.concatenate(
            [
                np.stack([np.full(t.n_train, ti), np.arange(t.n_train)], axis=1)
                for ti, t in enumerate(self.tasks)
            ]
        )
        pairs = pairs[rng.permutation(pairs.shape[0])]
        for start in range(0, pairs.shape[0], batch_size):
            chunk = pairs[start : start + batch_size]
            xs, ys = [], []
            for ti in np.unique(chunk[:, 0]):
                idx = chunk[chunk[:, 0] == ti, 1]
                task = self.tasks[ti]
                xs.append(task.train_rows(idx))
                ys.append(task.train_y[idx])
            yield Batch(np.concatenate(xs), np.concatenate(ys))

    def manifest(self) -> dict:
        return {
            "protocol": self.protocol_tag,
            "seed": int(self.seed),
            "total_classes": int(self.total_classes),
            "n_tasks": self.n_tasks,
            "shared_test": None
            if self.shared_test is None
            else {"n_test": int(self.shared_test[1].shape[0])},
            "tasks": [t.descriptor() for t in self.tasks],
        }


def _shuffled(x, y, rng):
    order = rng.permutation(x.shape[0])
    return x[order], y[order]


def build_s_mnist(data: RawDataset, seed) -> TaskStream:
    """Five two-class splits in fixed class order {0,1},...,{8,9}."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    tasks = []
    for t in range(5):
        classes = (2 * t, 2 * t + 1)
        tr = np.isin(data.train_y, classes)
        te = np.isin(data.test_y, classes)
        x, y = _shuffled(data.train_x[tr], data.train_y[tr], rng)
        tasks.append(
            TaskData(x, y, data.test_x[te], data.test_y[te], classes, None, seed=int(seed))
        )
    return TaskStream(tasks, "s-mnist", 10, int(seed))


def build_r_mnist(data: RawDataset, seed, n_tasks: int = 20) -> TaskStream:
    """Fixed-rotation domain shifts: angles evenly spaced in [0, 180), order
    shuffled per seed; every task keeps all ten classes."""
    ss = np.random.SeedSequence([int(seed), 1])
    rng = np.random.default_rng(ss)
    angles = 180.0 * np.arange(n_tasks) / n_tasks
    angles = angles[rng.permutation(n_tasks)]
    all_classes = tuple(range(10))
    tasks = []
    for t in range(n_tasks):
        order = rng.permutation(data.train_x.shape[0])
        transform = {"kind": "rotation", "angle": float(angles[t])}
        tasks.append(
            TaskData(data.train_x, data.train_y[order], data.test_x, data.test_y,
                     all_classes, transform, seed=int(seed), train_order=order)
        )
    return TaskStream(tasks, "r-mnist", 10, int(seed))


def build_p_mnist(data: RawDataset, seed, n_tasks: int = 20) -> TaskStream:
    """Pixel-permutation domain shifts; task 0 is the identity permutation."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    all_classes = tuple(range(10))
    tasks = []
    for t in range(n_tasks):
        perm = np.arange(784) if t == 0 else rng.permutation(784)
        order = rng.permutation(data.train_x.shape[0])
        transform = {"kind": "permutation", "perm": perm}
        tasks.append(
            TaskData(data.train_x, data.train_y[order], data.test_x, data.test_y,
                     all_classes, transform, seed=int(seed), train_order=order)
        )
    return TaskStream(tasks, "p-mnist", 10, int(seed))


def build_mnist360(data: RawDataset, seed, rounds: int = 3) -> TaskStream:
    """Rotating two-digit stream: digit pairs (0,1),(1,2),...,(8,9) cycled for
    `rounds` rounds, every sample rotated by an angle that grows monotonically
    along the stream and spans 360 degrees in total. Evaluation uses the full
    test set at canonical orientation."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3]))
    groups = [(d, d + 1) for d in range(9)]
    # occurrences of each digit: (round, group) slots its samples are split over
    slots: dict[int, list[tuple[int, int]]] = {d: [] for d in range(10)}
    for r in range(rounds):
        for g, (a, b) in enumerate(groups):
            slots[a].append((r, g))
            slots[b].append((r, g))
    chunk: dict[tuple[int, int, int], np.ndarray] = {}
    for d in range(10):
        idx = np.flatnonzero(data.train_y == d)
        idx = idx[rng.permutation(idx.size)]
        parts = np.array_split(idx, len(slots[d]))
        for (r, g), part in zip(slots[d], parts):
            chunk[(r, g, d)] = part

    # assemble segments; sizes first so angles can be assigned globally
    segment_idx = []
    for r in range(rounds):
        for g, (a, b) in enumerate(groups):
            ia, ib = chunk[(r, g, a)], chunk[(r, g, b)]
            # interleave the two digits so any contiguous batch mixes both
            merged = np.empty(ia.size + ib.size, dtype=np.int64)
            k = min(ia.size, ib.size)
            merged[0 : 2 * k : 2] = ia[:k]
            merged[1 : 2 * k : 2] = ib[:k]
            merged[2 * k :] = np.concatenate([ia[k:], ib[k:]])
            segment_idx.append((r, (a, b), merged))

    total = sum(m.size for _, _, m in segment_idx)
    tasks = []
    pos = 0
    for r, classes, merged in segment_idx:
        angles = 360.0 * (pos + np.arange(merged.size)) / total
        pos += merged.size
        transform = {"kind": "per_sample_rotation", "angles": angles}
        tasks.append(
            TaskData(
                data.train_x[merged], data.train_y[merged],
                None, None, classes, transform, seed=int(seed),
            )
        )
    return TaskStream(
        tasks, "mnist-360", 10, int(seed),
        shared_test=(data.test_x, data.test_y),
    )


@dataclass(frozen=True)
class GcilSpec:
    num_phases: int = 20
    samples_per_phase: int = 1000
    max_classes_per_phase: int = 50
    distribution: str = "uniform"  # or "longtail"
    dataset_seed: int = 1993
    min_classes_per_phase: int = 2
    longtail_ratio: float = 0.9

    def __post_init__(self):
        if self.distribution not in ("uniform", "longtail"):
            raise ValueError("distribution must be 'uniform' or 'longtail'")
        if self.samples_per_phase <= 0 or self.num_phases <= 0:
            raise ValueError("phase counts must be positive")


def _phase_quotas(k: int, total: int, spec: GcilSpec) -> np.ndarray:
    """Per-class sample quotas for one phase, summing to `total` exactly."""
    if spec.distribution == "uniform":
        base = total // k
        quotas = np.full(k, base, dtype=np.int64)
        quotas[: total - base * k] += 1
        return quotas
    weights = spec.longtail_ratio ** np.arange(k)
    ideal = total * weights / weights.sum()
    quotas = np.floor(ideal).astype(np.int64)
    # largest-remainder rounding keeps the decay monotone after sorting
    rem = ideal - quotas
    for i in np.argsort(-rem)[: total - int(quotas.sum())]:
        quotas[i] += 1
    return quotas


def build_gcil(data: RawDataset, spec: GcilSpec, seed=None) -> TaskStream:
    """Probabilistic phase sampler: each phase draws a class subset (classes
    may recur across phases) and splits its sample budget uniformly or with a
    geometric long-tail profile. Fixed entirely by the dataset seed."""
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.dataset_seed), 4]))
    n_classes = data.n_classes
    max_k = min(spec.max_classes_per_phase, n_classes)
    min_k = min(spec.min_classes_per_phase, max_k)
    pools = {c: np.flatnonzero(data.train_y == c) for c in range(n_classes)}
    tasks = []
    for _ in range(spec.num_phases):
        k = int(rng.integers(min_k, max_k + 1))
        classes = np.sort(rng.choice(n_classes, size=k, replace=False))
        quotas = _phase_quotas(k, spec.samples_per_phase, spec)
        # exhausted classes hand their shortfall to classes with room left
        capacity = np.array([pools[c].size for c in classes])
        if int(quotas.sum()) > int(capacity.sum()):
            raise DatasetError("phase requests more samples than the drawn classes hold")
        surplus = int(np.maximum(quotas - capacity, 0).sum())
        quotas = np.minimum(quotas, capacity)
        for i in range(k):
            if surplus == 0:
                break
            take = min(int(capacity[i] - quotas[i]), surplus)
            quotas[i] += take
            surplus -= take
        idx = np.concatenate(
            [rng.choice(pools[c], size=int(q), replace=False) for c, q in zip(classes, quotas)]
        )
        idx = idx[rng.permutation(idx.size)]
        tasks.append(
            TaskData(
                data.train_x[idx], data.train_y[idx],
                None, None, tuple(int(c) for c in classes), None,
                seed=int(spec.dataset_seed),
            )
        )
    tag = f"gcil-{spec.distribution}"
    return TaskStream(
        tasks, tag, n_classes, int(spec.dataset_seed),
        shared_test=(data.test_x, data.test_y),
    )


BUILDERS = {
    "s-mnist": build_s_mnist,
    "r-mnist": build_r_mnist,
    "p-mnist": build_p_mnist,
    "mnist-360": build_mnist360,
}


def build_stream(protocol: str, data: RawDataset, seed) -> TaskStream:
    if protocol in BUILDERS:
        return BUILDERS[protocol](data, seed)
    if protocol.startswith("gcil"):
        dist = "longtail" if protocol.endswith("longtail") else "uniform"
        return build_gcil(data, GcilSpec(distribution=dist))
    raise ValueError(f"unknown protocol {protocol!r}")
