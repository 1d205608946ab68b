"""Single-pass class-incremental training loop.

Each task's training examples are streamed once, in order, in mini-batches.
Per batch: expert soft labels, ACM statistics update, ACM assembly and
normalization, forward pass, weighted loss, backward pass, optimizer step.
At each task boundary the live model is evaluated, the expert is replaced by
a snapshot of the live model and the ACM is frozen into the next task's
old-old block.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import acm as acm_mod
from . import numerics as nx
from .acm import PROPAGATION_SCHEMES, AcmState, AssembledAcm, propagation_matrix
from .datagen import SyntheticConfig, TaskStream, TrainView, generate_synthetic, load_dataset
from .expert import AutoUpdatedExpert, ExpertSnapshot
from .losses import LossWeights, total_loss
from .metrics import METRICS, MetricsReport, evaluate_seen
from .model import AgcnModel, ModelConfig, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

RESULTS_SCHEMA = "lml-agcn-results/1"


class RunConfigError(ValueError):
    def __init__(self, field_name: str, message: str) -> None:
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    preset: str = "agcn-default"
    weights: LossWeights = field(default_factory=lambda: LossWeights(0.85, 0.15, 1e5))
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    grad_clip: float | None = None
    batch_size: int = 16
    seed: int = 0
    embed_dim: int = 16
    gcn_hidden: int = 32
    repr_dim: int = 32
    backbone_hidden: int = 64
    slope: float = 0.2
    threshold: float = 0.5
    ablate_inter_task: bool = False
    propagation: str = "reweighted"
    reweight_p: float = 0.2
    synthetic: SyntheticConfig | None = field(default_factory=SyntheticConfig)
    data_path: str | None = None

    def validate(self) -> None:
        try:
            self.weights.validate()
        except ValueError as exc:
            raise RunConfigError("weights", str(exc)) from None
        if self.optimizer not in ("sgd", "adam"):
            raise RunConfigError("optimizer", f"unknown optimizer {self.optimizer!r}")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise RunConfigError("lr", "must be a positive finite number")
        if not 0 <= self.momentum < 1:
            raise RunConfigError("momentum", "must lie in [0, 1)")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise RunConfigError("grad_clip", "must be positive when set")
        if self.batch_size < 1:
            raise RunConfigError("batch_size", "must be >= 1")
        for name in ("embed_dim", "gcn_hidden", "repr_dim", "backbone_hidden"):
            if getattr(self, name) < 1:
                raise RunConfigError(name, "must be >= 1")
        if self.propagation not in PROPAGATION_SCHEMES:
            raise RunConfigError("propagation", f"must be one of {PROPAGATION_SCHEMES}")
        if not 0 <= self.reweight_p < 1:
            raise RunConfigError("reweight_p", "must lie in [0, 1)")
        if not 0 < self.threshold < 1:
            raise RunConfigError("threshold", "must lie in (0, 1)")
        if (self.synthetic is None) == (self.data_path is None):
            raise RunConfigError("data", "exactly one of synthetic config or data path is required")
        if self.synthetic is not None:
            try:
                self.synthetic.validate()
            except ValueError as exc:
                raise RunConfigError("synthetic", str(exc)) from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"])
        if d.get("synthetic") is not None:
            d["synthetic"] = SyntheticConfig(**d["synthetic"])
        return cls(**d)

    def model_config(self, feature_dim: int) -> ModelConfig:
        return ModelConfig(
            feature_dim=feature_dim,
            embed_dim=self.embed_dim,
            gcn_hidden=self.gcn_hidden,
            repr_dim=self.repr_dim,
            backbone_hidden=self.backbone_hidden,
            slope=self.slope,
            seed=self.seed,
        )


class Optimizer:
    """SGD with heavy-ball momentum, or Adam."""

    def __init__(self, kind: str, lr: float, momentum: float = 0.9, clip: float | None = None) -> None:
        self.kind = kind
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self.state: dict[str, np.ndarray] = {}
        self.steps = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        if self.clip is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > self.clip:
                grads = {k: g * (self.clip / norm) for k, g in grads.items()}
        self.steps += 1
        for name, g in grads.items():
            if self.kind == "sgd":
                v = self.state.setdefault(f"v.{name}", np.zeros_like(g))
                v *= self.momentum
                v += g
                params[name] -= self.lr * v
            else:
                b1, b2, eps = self.momentum, 0.999, 1e-8
                m = self.state.setdefault(f"m.{name}", np.zeros_like(g))
                s = self.state.setdefault(f"s.{name}", np.zeros_like(g))
                m *= b1
                m += (1 - b1) * g
                s *= b2
                s += (1 - b2) * g * g
                mhat = m / (1 - b1**self.steps)
                shat = s / (1 - b2**self.steps)
                params[name] -= self.lr * mhat / (np.sqrt(shat) + eps)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"opt.{k}": v for k, v in self.state.items()}
        out["opt.steps"] = np.array([float(self.steps)])
        return out

    def load(self, tensors: dict[str, np.ndarray]) -> None:
        self.state = {k[4:]: np.array(v) for k, v in tensors.items() if k.startswith("opt.") and k != "opt.steps"}
        self.steps = int(tensors["opt.steps"][0])


@dataclass
class RunState:
    config: RunConfig
    stream: TaskStream
    model: AgcnModel
    optimizer: Optimizer
    expert: AutoUpdatedExpert
    acm_state: AcmState
    current_acm: AssembledAcm
    completed: int = 0  # number of tasks already trained
    trained: bool = False  # current task trained, boundary pending
    first_trained: list[dict[str, float]] = field(default_factory=list)
    reports: list[MetricsReport] = field(default_factory=list)
    acm_history: list[AssembledAcm] = field(default_factory=list)
    forward_examples: int = 0
    steps: int = 0
    last_loss: dict[str, float] = field(default_factory=dict)

    @property
    def num_old(self) -> int:
        return self.acm_state.num_old

    def a_hat(self) -> np.ndarray:
        return propagation_matrix(self.current_acm, self.config.propagation, self.config.reweight_p)


def init_state(config: RunConfig, stream: TaskStream) -> RunState:
    config.validate()
    model = AgcnModel(config.model_config(stream.feature_dim))
    first = stream.labels.task_classes[0]
    model.grow_label_space([stream.labels.class_names[c] for c in first])
    acm_state = AcmState(len(first), ablate_inter_task=config.ablate_inter_task)
    opt = Optimizer(config.optimizer, config.lr, config.momentum, config.grad_clip)
    return RunState(config, stream, model, opt, AutoUpdatedExpert(), acm_state, acm_state.assemble())


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield start, min(start + size, n)


def train_task(state: RunState, view: TrainView) -> RunState:
    """Stream one task's partial-label training view through the model once."""
    if state.trained:
        raise ProtocolError("task boundary pending: call task_boundary before training again")
    if view.task_index != state.completed:
        raise ProtocolError(f"expected task {state.completed}, got task {view.task_index}")
    if view.task_labels.shape[1] != state.acm_state.num_new:
        raise ProtocolError(
            f"training view has {view.task_labels.shape[1]} label columns, task has {state.acm_state.num_new} classes"
        )
    cfg = state.config
    expert_sum = state.expert.checksum()
    has_expert = bool(state.expert)
    g_prev = state.expert.stored_graph() if has_expert else None
    num_old = state.num_old

    for lo, hi in _batches(len(view), cfg.batch_size):
        x = np.asarray(view.features[lo:hi], dtype=np.float64)
        y = np.asarray(view.task_labels[lo:hi], dtype=np.float64)
        z = state.expert.soft_labels(x) if has_expert else None

        state.acm_state.update_hard(y)
        if has_expert:
            state.acm_state.update_soft(z, y)
        state.current_acm = state.acm_state.assemble()

        fwd = state.model.forward(x, state.a_hat(), num_old)
        state.forward_examples += hi - lo
        terms = total_loss(
            y,
            fwd.new_probs,
            z,
            fwd.old_probs if has_expert else None,
            g_prev,
            fwd.graph,
            cfg.weights,
        )
        nx.backward(terms.total)
        grads = {k: n.grad for k, n in fwd.params.items()}
        state.optimizer.step(state.model.params, grads)
        state.steps += 1
        state.last_loss = {"total": terms.total.item(), "cls": terms.cls, "dst": terms.dst, "gph": terms.gph}
        if state.expert.checksum() != expert_sum:
            raise ProtocolError("expert snapshot changed during training")
        if not all(np.all(np.isfinite(p)) for p in state.model.params.values()):
            raise nx.NonFiniteError(f"parameters diverged at step {state.steps} (task {view.task_index})")

    logger.debug("task %d trained, last loss %s", view.task_index, state.last_loss)
    state.trained = True
    return state


def task_boundary(state: RunState) -> RunState:
    """Evaluate, snapshot the expert, freeze the ACM and grow the label space."""
    if not state.trained:
        raise ProtocolError("task boundary before training")
    t = state.completed
    stream = state.stream
    a_hat = state.a_hat()
    report = evaluate_seen(lambda x: state.model.predict(x, a_hat), stream, t, state.first_trained, state.config.threshold)
    if len(state.first_trained) == t:
        state.first_trained.append(report.per_task[t])
    if state.reports:
        report.aggregate_delta = _aggregate_delta(state.reports + [report])
    state.reports.append(report)
    state.acm_history.append(state.current_acm)

    cfg = state.config
    state.expert.rotate(
        state.model.params, state.current_acm, state.model.embeddings.matrix, cfg.slope, cfg.propagation, cfg.reweight_p
    )
    frozen = acm_mod.freeze_into_old(state.current_acm)
    state.completed = t + 1
    state.trained = False
    if state.completed < stream.num_tasks:
        nxt = stream.labels.task_classes[state.completed]
        state.model.grow_label_space([stream.labels.class_names[c] for c in nxt])
        state.acm_state = AcmState(len(nxt), frozen, ablate_inter_task=state.config.ablate_inter_task)
        state.current_acm = state.acm_state.assemble()
    logger.info(
        "after task %d: mAP %.2f CF1 %.2f OF1 %.2f",
        t + 1,
        report.aggregate["mAP"],
        report.aggregate["CF1"],
        report.aggregate["OF1"],
    )
    return state


def _aggregate_delta(reports: list[MetricsReport]) -> dict[str, float]:
    """Mean aggregate score over earlier boundaries minus the latest one."""
    last = reports[-1].aggregate
    return {m: float(np.mean([r.aggregate[m] for r in reports[:-1]]) - last[m]) for m in METRICS}


@dataclass
class RunResult:
    config: RunConfig
    dataset_checksum: str
    reports: list[MetricsReport]
    acm_history: list[AssembledAcm]
    class_names: list[str]
    forward_examples: int
    train_examples: int
    steps: int
    samples: list[dict] = field(default_factory=list)

    @property
    def final(self) -> MetricsReport:
        return self.reports[-1]

    def header(self) -> dict:
        return {
            "schema": RESULTS_SCHEMA,
            "preset": self.config.preset,
            "config": self.config.to_dict(),
            "dataset_checksum": self.dataset_checksum,
        }


def load_stream(config: RunConfig) -> TaskStream:
    if config.data_path is not None:
        return load_dataset(config.data_path)
    return generate_synthetic(config.synthetic)


def run(config: RunConfig, stream: TaskStream | None = None, checkpoint_dir: str | Path | None = None, resume: bool = False) -> RunResult:
    config.validate()
    if stream is None:
        stream = load_stream(config)
    if config.synthetic is not None and stream.num_tasks != config.synthetic.num_tasks:
        raise RunConfigError("synthetic.num_tasks", f"config says {config.synthetic.num_tasks}, stream has {stream.num_tasks}")
    checksum = stream.checksum()
    state = None
    if resume:
        if checkpoint_dir is None:
            raise RunConfigError("resume", "needs a checkpoint directory")
        state = load_boundary_checkpoint(checkpoint_dir, config, stream, checksum)
    if state is None:
        state = init_state(config, stream)
    while state.completed < stream.num_tasks:
        task = stream.tasks[state.completed]
        train_task(state, task.train_view())
        task_boundary(state)
        if checkpoint_dir is not None:
            save_boundary_checkpoint(checkpoint_dir, state, checksum)
    return RunResult(
        config,
        checksum,
        state.reports,
        state.acm_history,
        list(stream.labels.class_names),
        state.forward_examples,
        sum(len(t.train_features) for t in stream.tasks),
        state.steps,
        sample_predictions(state),
    )


def sample_predictions(state: RunState, per_task: int = 2) -> list[dict]:
    """Final-model probabilities for the first few test examples of each task."""
    names = state.stream.labels.class_names
    a_hat = state.a_hat()
    out = []
    for task in state.stream.tasks[: state.completed]:
        n = min(per_task, len(task.test_features))
        if n == 0:
            continue
        probs = state.model.predict(np.asarray(task.test_features[:n], dtype=np.float64), a_hat)
        for i in range(n):
            truth = [names[c] for c in np.flatnonzero(task.test_labels[i][: probs.shape[1]])]
            out.append({"task": task.index + 1, "example": i, "truth": truth, "probs": dict(zip(names, map(float, probs[i])))})
    return out


# -- boundary checkpoints --------------------------------------------------

def save_boundary_checkpoint(directory: str | Path, state: RunState, dataset_checksum: str) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensors = {f"model.{k}": v for k, v in state.model.params.items()}
    tensors.update(state.optimizer.tensors())
    tensors.update(state.expert.snapshot.tensors())
    tensors["acm.frozen"] = state.acm_state.frozen if state.completed < state.stream.num_tasks else state.current_acm.matrix
    for k, a in enumerate(state.acm_history):
        tensors[f"acm.history.{k}"] = a.matrix
    save_checkpoint(d / "state.lmlw", tensors)
    names = state.stream.labels.class_names[: state.expert.snapshot.num_classes]
    acm_mod.write_csv(state.expert.snapshot.acm, d / "acm.csv", names)
    header = {
        "schema": RESULTS_SCHEMA,
        "completed": state.completed,
        "config": state.config.to_dict(),
        "dataset_checksum": dataset_checksum,
        "first_trained": state.first_trained,
        "reports": [dataclasses.asdict(r) for r in state.reports],
        "forward_examples": state.forward_examples,
        "steps": state.steps,
        "acm_num_old": [a.num_old for a in state.acm_history],
    }
    (d / "run_state.json").write_text(json.dumps(header, indent=1, sort_keys=True))


def load_boundary_checkpoint(directory: str | Path, config: RunConfig, stream: TaskStream, dataset_checksum: str) -> RunState | None:
    d = Path(directory)
    if not (d / "run_state.json").exists():
        return None
    header = json.loads((d / "run_state.json").read_text())
    if header["config"] != json.loads(json.dumps(config.to_dict())):
        raise RunConfigError("resume", "checkpoint was written with a different configuration")
    if header["dataset_checksum"] != dataset_checksum:
        raise RunConfigError("resume", "checkpoint was written for a different dataset")
    tensors = load_checkpoint(d / "state.lmlw")
    state = init_state(config, stream)
    completed = header["completed"]
    for t in range(1, completed + 1):
        if t < stream.num_tasks:
            nxt = stream.labels.task_classes[t]
            state.model.grow_label_space([stream.labels.class_names[c] for c in nxt])
    state.model.params = {k[6:]: np.array(v) for k, v in tensors.items() if k.startswith("model.")}
    state.optimizer.load(tensors)
    state.expert.restore(ExpertSnapshot.from_tensors(tensors, config.slope, config.propagation, config.reweight_p))
    if completed < stream.num_tasks:
        n_new = len(stream.labels.task_classes[completed])
        state.acm_state = AcmState(n_new, tensors["acm.frozen"], ablate_inter_task=config.ablate_inter_task)
        state.current_acm = state.acm_state.assemble()
    state.completed = completed
    state.first_trained = header["first_trained"]
    state.reports = [MetricsReport(**r) for r in header["reports"]]
    state.forward_examples = header["forward_examples"]
    state.steps = header["steps"]
    state.acm_history = [AssembledAcm(tensors[f"acm.history.{k}"], n) for k, n in enumerate(header["acm_num_old"])]
    if completed == stream.num_tasks:
        state.current_acm = state.acm_history[-1]
    return state
