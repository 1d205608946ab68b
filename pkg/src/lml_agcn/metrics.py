"""Multi-label metrics (mAP, CF1, OF1) and the forgetting measure.

All reported values are percentages.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

METRICS = ("mAP", "CF1", "OF1")


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean of precision-at-rank over the positives, ranked by descending
    score; ties keep their original order."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("average precision is undefined without positives")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, n_pos + 1) / ranks))


def mean_average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """mAP over columns that have at least one positive; NaN if none do."""
    scores = np.atleast_2d(scores)
    labels = np.atleast_2d(labels)
    aps = [average_precision(scores[:, k], labels[:, k]) for k in range(labels.shape[1]) if labels[:, k].any()]
    if not aps:
        return float("nan")
    return 100.0 * float(np.mean(aps))


def cf1_of1(scores: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> tuple[float, float]:
    """Per-class F1 averaged over classes (CF1) and micro F1 (OF1).

    A class with no predicted and no actual positives scores F1 = 0 and still
    counts in the CF1 average.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    pred = np.atleast_2d(scores) >= threshold
    gt = np.atleast_2d(labels).astype(bool)
    tp = (pred & gt).sum(axis=0).astype(np.float64)
    fp = (pred & ~gt).sum(axis=0).astype(np.float64)
    fn = (~pred & gt).sum(axis=0).astype(np.float64)
    return _f1_from_counts(tp, fp, fn)


def _f1_from_counts(tp: np.ndarray, fp: np.ndarray, fn: np.ndarray) -> tuple[float, float]:
    denom = 2 * tp + fp + fn
    with np.errstate(divide="ignore", invalid="ignore"):
        per_class = np.where(denom > 0, 2 * tp / denom, 0.0)
    cf1 = float(per_class.mean()) if len(per_class) else 0.0
    total = 2 * tp.sum() + fp.sum() + fn.sum()
    of1 = float(2 * tp.sum() / total) if total > 0 else 0.0
    return 100.0 * cf1, 100.0 * of1


def score_all(scores: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> dict[str, float]:
    cf1, of1 = cf1_of1(scores, labels, threshold)
    return {"mAP": mean_average_precision(scores, labels), "CF1": cf1, "OF1": of1}


def forgetting(first: list[dict[str, float]], final: list[dict[str, float]]) -> dict[str, float] | None:
    """Mean over old tasks of (score right after the task) - (final score).

    ``first`` and ``final`` are per-task metric dicts over all T tasks; the
    last task is excluded. Returns None for a single-task run.
    """
    if len(first) != len(final):
        raise ValueError("first and final must cover the same tasks")
    if len(first) < 2:
        return None
    out = {}
    for m in first[0]:
        diffs = [f[m] - g[m] for f, g in zip(first[:-1], final[:-1]) if np.isfinite(f[m]) and np.isfinite(g[m])]
        out[m] = float(np.mean(diffs)) if diffs else float("nan")
    return out


@dataclass
class MetricsReport:
    task: int  # 0-based index of the last trained task
    aggregate: dict[str, float]
    per_task: list[dict[str, float]]
    first_trained: list[dict[str, float]] = field(default_factory=list)
    forgetting: dict[str, float] | None = None
    aggregate_delta: dict[str, float] | None = None

    def rows(self, run_id: str) -> list[dict]:
        out = []
        for m in METRICS:
            out.append(
                {
                    "run": run_id,
                    "t": self.task + 1,
                    "metric": m,
                    "value": self.aggregate[m],
                    "forgetting": None if self.forgetting is None else self.forgetting[m],
                }
            )
        return out


def evaluate_seen(predict_fn, stream, t: int, first_trained: list[dict[str, float]] | None = None, threshold: float = 0.5) -> MetricsReport:
    """Score the model after task ``t`` on the union of test sets 0..t.

    ``predict_fn(x)`` must return probabilities over the seen classes.
    ``first_trained`` holds per-task scores recorded right after each earlier
    task; the row for task ``t`` is appended here.
    """
    n_seen = stream.labels.seen_count(t)
    per_task = []
    all_scores, all_labels = [], []
    for k in range(t + 1):
        task = stream.tasks[k]
        scores = predict_fn(task.test_features)
        gt = task.test_labels[:, :n_seen]
        per_task.append(score_all(scores, gt, threshold))
        all_scores.append(scores)
        all_labels.append(gt)
    aggregate = score_all(np.concatenate(all_scores), np.concatenate(all_labels), threshold)

    first = list(first_trained or [])
    if len(first) == t:
        first.append(per_task[t])
    report = MetricsReport(t, aggregate, per_task, first)
    if t > 0 and len(first) == t + 1:
        report.forgetting = forgetting(first, per_task)
    return report
