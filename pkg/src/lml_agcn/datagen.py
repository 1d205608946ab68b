"""Class-incremental multi-label task streams.

A stream is a sequence of tasks with disjoint class sets. Each example keeps
its full ground truth over every generated class (used for evaluation only)
while training sees just the columns of its own task.
"""
from __future__ import annotations

import hashlib
import io
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"LMLD"
FORMAT_VERSION = 1
BASE_RATE = 0.05
# affinity = AFFINITY_SCALE * u ** AFFINITY_POWER: skewed towards weak pairs,
# but bounded so the direct pair term dominates shared-anchor co-occurrence
AFFINITY_POWER = 2.0
AFFINITY_SCALE = 0.3


class DataFormatError(ValueError):
    """Malformed dataset file; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int | None = None) -> None:
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LabelSpace:
    """Global class ordering: task order first, then order within the task."""

    task_classes: tuple[tuple[int, ...], ...]
    class_names: tuple[str, ...]

    def __post_init__(self) -> None:
        flat = [c for cls in self.task_classes for c in cls]
        if len(flat) != len(set(flat)):
            raise ConfigError("task class sets must be pairwise disjoint")
        if flat != list(range(len(flat))):
            raise ConfigError("class indices must follow task order")
        if len(self.class_names) != len(flat):
            raise ConfigError("one name per class required")

    @classmethod
    def contiguous(cls, classes_per_task: list[int], names: list[str] | None = None) -> "LabelSpace":
        tasks, start = [], 0
        for k in classes_per_task:
            tasks.append(tuple(range(start, start + k)))
            start += k
        if names is None:
            names = [f"c{i:03d}" for i in range(start)]
        return cls(tuple(tasks), tuple(names))

    @property
    def num_tasks(self) -> int:
        return len(self.task_classes)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def task_range(self, t: int) -> tuple[int, int]:
        """Half-open global index range of task ``t`` (0-based)."""
        cls = self.task_classes[t]
        return (cls[0], cls[-1] + 1) if cls else (self.seen_count(t - 1), self.seen_count(t - 1))

    def seen_count(self, t: int) -> int:
        """|C_seen| after tasks 0..t; ``t = -1`` gives 0."""
        return sum(len(c) for c in self.task_classes[: t + 1])


@dataclass(frozen=True)
class TrainView:
    """What the trainer is allowed to see for one task: features and the
    labels of that task's classes, nothing else."""

    features: np.ndarray
    task_labels: np.ndarray
    task_index: int

    def __len__(self) -> int:
        return len(self.features)


@dataclass
class Task:
    index: int
    classes: tuple[int, ...]
    train_features: np.ndarray
    train_labels: np.ndarray  # full ground truth, all classes
    test_features: np.ndarray
    test_labels: np.ndarray

    def train_view(self) -> TrainView:
        lo, hi = self.classes[0], self.classes[-1] + 1
        return TrainView(self.train_features, np.ascontiguousarray(self.train_labels[:, lo:hi]), self.index)


@dataclass
class TaskStream:
    labels: LabelSpace
    tasks: list[Task]
    feature_dim: int
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def checksum(self) -> str:
        return hashlib.sha256(to_bytes(self)).hexdigest()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TaskStream):
            return NotImplemented
        return to_bytes(self) == to_bytes(other)


def project_partial(full_labels: np.ndarray, labels: LabelSpace, task_index: int) -> np.ndarray:
    """Restrict ground truth to the classes of ``task_index``.

    Works on a single label vector or a batch (rows are examples).
    """
    lo, hi = labels.task_range(task_index)
    return np.asarray(full_labels)[..., lo:hi]


@dataclass(frozen=True)
class SyntheticConfig:
    num_tasks: int = 10
    classes_per_task: int = 4
    feature_dim: int = 64
    train_per_task: int = 2000
    test_per_task: int = 300
    cooccurrence_strength: float = 0.8
    noise_std: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        for name in ("num_tasks", "classes_per_task", "feature_dim", "train_per_task", "test_per_task"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.cooccurrence_strength <= 1.0:
            raise ConfigError("cooccurrence_strength must lie in [0, 1]")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")


@dataclass
class SyntheticTruth:
    """Generator internals, exposed for recovery tests."""

    affinity: np.ndarray
    prototypes: np.ndarray


def draw_affinity(num_classes: int, rng: np.random.Generator) -> np.ndarray:
    u = rng.random((num_classes, num_classes))
    a = AFFINITY_SCALE * np.triu(u, 1) ** AFFINITY_POWER
    a = a + a.T
    return a


def sample_example_labels(anchor: int, affinity: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    p = np.clip(BASE_RATE + strength * affinity[anchor], 0.0, 1.0)
    y = rng.random(len(p)) < p
    y[anchor] = True
    return y.astype(np.uint8)


def generate_synthetic(config: SyntheticConfig, *, return_truth: bool = False):
    """Sample a task stream with controllable label co-occurrence.

    Labels: one anchor class drawn uniformly from the task, plus each other
    class independently with probability ``BASE_RATE + strength * affinity``.
    Features: sum of unit-norm class prototypes over positive labels, plus
    Gaussian noise. Features are stored as float32, matching the file format.
    """
    config.validate()
    n_cls = config.num_tasks * config.classes_per_task
    if config.feature_dim < n_cls:
        warnings.warn(
            f"feature_dim {config.feature_dim} < {n_cls} classes: prototypes will crowd",
            stacklevel=2,
        )
    rng = np.random.default_rng(config.seed)
    affinity = draw_affinity(n_cls, rng)
    protos = rng.standard_normal((n_cls, config.feature_dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)

    space = LabelSpace.contiguous([config.classes_per_task] * config.num_tasks)

    def draw(task_classes: tuple[int, ...], count: int) -> tuple[np.ndarray, np.ndarray]:
        anchors = rng.choice(np.asarray(task_classes), size=count)
        y = np.stack([sample_example_labels(a, affinity, config.cooccurrence_strength, rng) for a in anchors])
        x = y.astype(np.float64) @ protos
        if config.noise_std > 0:
            x = x + config.noise_std * rng.standard_normal(x.shape)
        return x.astype(np.float32), y

    tasks = []
    for t, cls in enumerate(space.task_classes):
        xtr, ytr = draw(cls, config.train_per_task)
        xte, yte = draw(cls, config.test_per_task)
        tasks.append(Task(t, cls, xtr, ytr, xte, yte))
    stream = TaskStream(space, tasks, config.feature_dim, seed=config.seed)
    if return_truth:
        return stream, SyntheticTruth(affinity, protos)
    return stream


# -- binary format ---------------------------------------------------------

def to_bytes(stream: TaskStream) -> bytes:
    buf = io.BytesIO()
    n_cls = stream.labels.num_classes
    buf.write(MAGIC)
    buf.write(struct.pack("<IIII", FORMAT_VERSION, n_cls, stream.feature_dim, stream.num_tasks))
    for t in range(stream.num_tasks):
        buf.write(struct.pack("<II", *stream.labels.task_range(t)))
    n_rec = sum(len(task.train_features) + len(task.test_features) for task in stream.tasks)
    buf.write(struct.pack("<Q", n_rec))
    for task in stream.tasks:
        for tag, xs, ys in ((0, task.train_features, task.train_labels), (1, task.test_features, task.test_labels)):
            packed = np.packbits(np.asarray(ys, dtype=np.uint8), axis=1, bitorder="little")
            feats = np.asarray(xs, dtype="<f4")
            for i in range(len(xs)):
                buf.write(struct.pack("<BI", tag, task.index))
                buf.write(feats[i].tobytes())
                buf.write(packed[i].tobytes())
    return buf.getvalue()


def save_dataset(stream: TaskStream, path: str | Path) -> str:
    data = to_bytes(stream)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise DataFormatError(f"truncated while reading {what}", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(data: bytes) -> TaskStream:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise DataFormatError("bad magic, expected b'LMLD'", 0)
    version, n_cls, dim, n_tasks = r.unpack("<IIII", "header")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"unsupported version {version}", 4)
    ranges = []
    expect = 0
    for t in range(n_tasks):
        off = r.pos
        lo, hi = r.unpack("<II", f"class range of task {t}")
        if lo != expect or hi < lo or hi > n_cls:
            raise DataFormatError(f"task {t} class range [{lo},{hi}) inconsistent with {n_cls} classes", off)
        ranges.append(hi - lo)
        expect = hi
    if expect != n_cls:
        raise DataFormatError(f"task ranges cover {expect} classes, header declares {n_cls}", r.pos)
    (n_rec,) = r.unpack("<Q", "record count")
    label_bytes = (n_cls + 7) // 8
    rec_size = 5 + 4 * dim + label_bytes
    body = len(data) - r.pos
    if body != n_rec * rec_size:
        # locate the first record that does not fit
        bad = r.pos + min(n_rec, body // rec_size) * rec_size
        if body > n_rec * rec_size:
            raise DataFormatError(
                f"{body - n_rec * rec_size} trailing bytes after {n_rec} records; "
                f"label or feature width disagrees with header", r.pos + n_rec * rec_size
            )
        raise DataFormatError(f"truncated record (expected {n_rec} records of {rec_size} bytes)", bad)

    space = LabelSpace.contiguous(ranges)
    buckets: dict[int, dict[int, tuple[list, list]]] = {t: {0: ([], []), 1: ([], [])} for t in range(n_tasks)}
    pad_mask = 0xFF << (n_cls % 8) & 0xFF if n_cls % 8 else 0
    for i in range(n_rec):
        off = r.pos
        tag, tid = r.unpack("<BI", "record header")
        if tag not in (0, 1):
            raise DataFormatError(f"record {i}: split tag {tag} is neither 0 (train) nor 1 (test)", off)
        if tid >= n_tasks:
            raise DataFormatError(f"record {i}: task id {tid} >= {n_tasks}", off + 1)
        feats = np.frombuffer(r.take(4 * dim, "features"), dtype="<f4").astype(np.float32)
        raw = r.take(label_bytes, "labels")
        if pad_mask and raw[-1] & pad_mask:
            raise DataFormatError(f"record {i}: label row has bits set beyond {n_cls} classes", r.pos - 1)
        bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")[:n_cls]
        buckets[tid][tag][0].append(feats)
        buckets[tid][tag][1].append(bits)

    def stack(rows: list, width: int, dtype) -> np.ndarray:
        return np.stack(rows).astype(dtype) if rows else np.zeros((0, width), dtype=dtype)

    tasks = []
    for t in range(n_tasks):
        (xtr, ytr), (xte, yte) = buckets[t][0], buckets[t][1]
        tasks.append(
            Task(
                t,
                space.task_classes[t],
                stack(xtr, dim, np.float32),
                stack(ytr, n_cls, np.uint8),
                stack(xte, dim, np.float32),
                stack(yte, n_cls, np.uint8),
            )
        )
    return TaskStream(space, tasks, dim)


def load_dataset(path: str | Path) -> TaskStream:
    path = Path(path)
    data = path.read_bytes()
    stream = from_bytes(data)
    stream.meta["path"] = str(path)
    return stream


def label_statistics(stream: TaskStream) -> list[dict]:
    """Per-task counts used by the ``gen`` command's summary."""
    rows = []
    for task in stream.tasks:
        lo, hi = task.classes[0], task.classes[-1] + 1
        ytr = task.train_labels
        rows.append(
            {
                "task": task.index,
                "classes": f"{lo}-{hi - 1}",
                "train": len(ytr),
                "test": len(task.test_labels),
                "labels_per_example": float(ytr.sum(axis=1).mean()) if len(ytr) else 0.0,
                "in_task_positives": int(ytr[:, lo:hi].sum()),
                "out_of_task_positives": int(ytr.sum() - ytr[:, lo:hi].sum()),
            }
        )
    return rows
