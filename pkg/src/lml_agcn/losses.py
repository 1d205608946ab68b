"""Classification, distillation and relationship-preserving losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Node

PROB_EPS = 1e-12


class LossConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    cls: float = 0.07
    dst: float = 0.93
    gph: float = 1e5
    # reductions: "batch" averages the distillation sum over examples,
    # "sum" leaves it summed; graph loss is summed over old rows unless "mean"
    dst_reduction: str = "batch"
    gph_reduction: str = "sum"

    def validate(self) -> None:
        for name in ("cls", "dst", "gph"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise LossConfigError(f"loss weight {name} must be a non-negative finite number, got {v!r}")
        if self.dst_reduction not in ("batch", "sum"):
            raise LossConfigError(f"dst_reduction must be 'batch' or 'sum', got {self.dst_reduction!r}")
        if self.gph_reduction not in ("sum", "mean"):
            raise LossConfigError(f"gph_reduction must be 'sum' or 'mean', got {self.gph_reduction!r}")


def _binary_xent_sum(target: np.ndarray, probs: Node) -> Node:
    """Sum over all entries of -[t log p + (1 - t) log(1 - p)], p clamped."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != probs.shape:
        raise DimensionError(f"targets {target.shape} vs predictions {probs.shape}")
    p = nx.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    one_minus = nx.add_scalar(nx.scalar_mul(p, -1.0), 1.0)
    pos = nx.mul(nx.constant(target), nx.log(p))
    neg = nx.mul(nx.constant(1.0 - target), nx.log(one_minus))
    return nx.scalar_mul(nx.total(nx.add(pos, neg)), -1.0)


def cls_loss(y: np.ndarray, y_new: Node) -> Node:
    """Binary cross-entropy over the current task's classes, mean over
    classes and batch."""
    y = np.atleast_2d(y)
    if y_new.value.size == 0:
        return nx.constant(0.0)
    return nx.scalar_mul(_binary_xent_sum(y, y_new), 1.0 / y_new.value.size)


def dst_loss(z: np.ndarray | None, y_old: Node | None, reduction: str = "batch") -> Node:
    """Cross-entropy of live old-class predictions against expert soft labels,
    summed over old classes."""
    if z is None or y_old is None or y_old.shape[1] == 0:
        return nx.constant(0.0)
    z = np.atleast_2d(z)
    loss = _binary_xent_sum(z, y_old)
    if reduction == "batch":
        loss = nx.scalar_mul(loss, 1.0 / y_old.shape[0])
    return loss


def gph_loss(g_prev: np.ndarray | None, h: Node, reduction: str = "sum") -> Node:
    """Squared distance between the stored and live graph rows of old classes.

    New-class rows of ``h`` are left free.
    """
    if g_prev is None or len(g_prev) == 0:
        return nx.constant(0.0)
    g_prev = np.asarray(g_prev, dtype=np.float64)
    n_old = g_prev.shape[0]
    if h.shape[0] < n_old or h.shape[1] != g_prev.shape[1]:
        raise DimensionError(f"stored graph {g_prev.shape} does not fit live graph {h.shape}")
    diff = nx.sub(nx.constant(g_prev), nx.slice_rows(h, 0, n_old))
    loss = nx.total(nx.square(diff))
    if reduction == "mean":
        loss = nx.scalar_mul(loss, 1.0 / g_prev.size)
    return loss


@dataclass
class LossTerms:
    total: Node
    cls: float
    dst: float
    gph: float


def total_loss(
    y: np.ndarray,
    y_new: Node,
    z: np.ndarray | None,
    y_old: Node | None,
    g_prev: np.ndarray | None,
    h: Node,
    weights: LossWeights,
) -> LossTerms:
    weights.validate()
    lc = cls_loss(y, y_new)
    terms = [nx.scalar_mul(lc, weights.cls)]
    ld = lg = None
    if weights.dst > 0:
        ld = dst_loss(z, y_old, weights.dst_reduction)
        terms.append(nx.scalar_mul(ld, weights.dst))
    if weights.gph > 0:
        lg = gph_loss(g_prev, h, weights.gph_reduction)
        terms.append(nx.scalar_mul(lg, weights.gph))
    out = terms[0]
    for t in terms[1:]:
        out = nx.add(out, t)
    return LossTerms(
        out,
        lc.item(),
        0.0 if ld is None else ld.item(),
        0.0 if lg is None else lg.item(),
    )
