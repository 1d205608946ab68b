"""Augmented correlation matrix over all seen classes.

Layout over the seen classes of task t (old classes first)::

    [[ A_prev  R ]
     [ Q       B ]]

``A_prev`` is frozen from the previous task. ``B`` holds hard-label
conditionals among the new classes, ``R`` old-given-new conditionals built
from expert soft labels, and ``Q`` the new-given-old block obtained from
``R`` by Bayes' rule. All counters are streamed one mini-batch at a time.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class AcmShapeError(ValueError):
    pass


@dataclass(frozen=True)
class AssembledAcm:
    matrix: np.ndarray
    num_old: int
    normalization: str = "none"

    @property
    def num_seen(self) -> int:
        return self.matrix.shape[0]

    @property
    def num_new(self) -> int:
        return self.num_seen - self.num_old

    @property
    def old_old(self) -> np.ndarray:
        return self.matrix[: self.num_old, : self.num_old]

    @property
    def old_new(self) -> np.ndarray:
        return self.matrix[: self.num_old, self.num_old :]

    @property
    def new_old(self) -> np.ndarray:
        return self.matrix[self.num_old :, : self.num_old]

    @property
    def new_new(self) -> np.ndarray:
        return self.matrix[self.num_old :, self.num_old :]


class AcmState:
    """Streaming statistics for one task plus the frozen block from before it.

    Counters:
      ``n``   per new class, examples with that class (N_j)
      ``nn``  per new-class pair, examples with both (N_ij, symmetric)
      ``s``   per old class, summed soft label (sum_x z_i)
      ``sy``  old x new, summed soft label times hard label (sum_x z_i y_j)
    """

    def __init__(self, num_new: int, frozen: np.ndarray | None = None, *, ablate_inter_task: bool = False) -> None:
        if frozen is None:
            frozen = np.zeros((0, 0))
        frozen = np.array(frozen, dtype=np.float64)
        if frozen.ndim != 2 or frozen.shape[0] != frozen.shape[1]:
            raise AcmShapeError(f"frozen block must be square, got {frozen.shape}")
        frozen.setflags(write=False)
        self.frozen = frozen
        self.num_old = frozen.shape[0]
        self.num_new = num_new
        self.ablate_inter_task = ablate_inter_task
        self.n = np.zeros(num_new)
        self.nn = np.zeros((num_new, num_new))
        self.s = np.zeros(self.num_old)
        self.sy = np.zeros((self.num_old, num_new))

    def update_hard(self, y: np.ndarray) -> None:
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1:
            y = y[None, :]
        if y.shape[1] != self.num_new:
            raise AcmShapeError(f"hard labels have width {y.shape[1]}, task has {self.num_new} classes")
        self.n += y.sum(axis=0)
        self.nn += y.T @ y

    def update_soft(self, z: np.ndarray, y: np.ndarray) -> None:
        z = np.asarray(z, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if z.ndim == 1:
            z = z[None, :]
        if y.ndim == 1:
            y = y[None, :]
        if z.shape[0] != y.shape[0]:
            raise AcmShapeError(f"soft labels have {z.shape[0]} rows, hard labels {y.shape[0]}")
        if z.shape[1] != self.num_old or y.shape[1] != self.num_new:
            raise AcmShapeError(
                f"expected soft width {self.num_old} and hard width {self.num_new}, got {z.shape[1]} and {y.shape[1]}"
            )
        self.s += z.sum(axis=0)
        self.sy += z.T @ y

    def new_new_block(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            b = np.where(self.n > 0, self.nn / self.n, 0.0)
        np.fill_diagonal(b, 1.0)
        return b

    def old_new_block(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.n > 0, self.sy / self.n, 0.0)

    def new_old_block(self, r: np.ndarray) -> np.ndarray:
        # Q_ji = R_ij N_j / S_i
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(self.s[:, None] > 0, r * self.n[None, :] / self.s[:, None], 0.0)
        return q.T

    def assemble(self) -> AssembledAcm:
        b = self.new_new_block()
        if self.num_old == 0:
            return AssembledAcm(np.clip(b, 0.0, 1.0), 0)
        if self.ablate_inter_task:
            r = np.zeros((self.num_old, self.num_new))
            q = np.zeros((self.num_new, self.num_old))
        else:
            r = self.old_new_block()
            q = self.new_old_block(r)
        full = np.block([[self.frozen, r], [q, b]])
        return AssembledAcm(np.clip(full, 0.0, 1.0), self.num_old)

    def checksum(self) -> str:
        return hashlib.sha256(self.frozen.tobytes()).hexdigest()


def normalize_for_gcn(acm: AssembledAcm | np.ndarray) -> np.ndarray:
    """Row-stochastic propagation matrix D^-1 (A + I)."""
    a = acm.matrix if isinstance(acm, AssembledAcm) else np.asarray(acm, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise AcmShapeError(f"ACM must be square, got {a.shape}")
    a = a + np.eye(a.shape[0])
    return a / a.sum(axis=1, keepdims=True)


def reweight_for_gcn(acm: AssembledAcm | np.ndarray, p: float = 0.2) -> np.ndarray:
    """Fixed self weight ``1 - p``; the off-diagonal row mass is rescaled to ``p``.

    Rows without any off-diagonal mass keep weight 1 on themselves, so every
    row sums to 1. Unlike ``D^-1 (A + I)`` the self weight does not shrink as
    the seen-class set (and with it each row sum) grows.
    """
    a = acm.matrix if isinstance(acm, AssembledAcm) else np.asarray(acm, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise AcmShapeError(f"ACM must be square, got {a.shape}")
    if not 0.0 <= p < 1.0:
        raise ValueError("p must lie in [0, 1)")
    off = a.copy()
    np.fill_diagonal(off, 0.0)
    mass = off.sum(axis=1, keepdims=True)
    has = mass[:, 0] > 0
    out = np.zeros_like(off)
    out[has] = p * off[has] / mass[has]
    out[np.diag_indices_from(out)] = np.where(has, 1.0 - p, 1.0)
    return out


PROPAGATION_SCHEMES = ("reweighted", "row-stochastic")


def propagation_matrix(acm: AssembledAcm | np.ndarray, scheme: str = "reweighted", p: float = 0.2) -> np.ndarray:
    if scheme == "reweighted":
        return reweight_for_gcn(acm, p)
    if scheme == "row-stochastic":
        return normalize_for_gcn(acm)
    raise ValueError(f"unknown propagation scheme {scheme!r}; expected one of {PROPAGATION_SCHEMES}")


def freeze_into_old(acm: AssembledAcm) -> np.ndarray:
    out = np.array(acm.matrix, dtype=np.float64)
    out.setflags(write=False)
    return out


def write_csv(acm: AssembledAcm | np.ndarray, path: str | Path, names: Sequence[str]) -> None:
    m = acm.matrix if isinstance(acm, AssembledAcm) else np.asarray(acm)
    if len(names) != m.shape[0]:
        raise AcmShapeError(f"{len(names)} names for a {m.shape[0]}-class matrix")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(names))
        for row in m:
            w.writerow([repr(float(v)) for v in row])


def read_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0]
    m = np.array([[float(v) for v in row] for row in rows[1:]], dtype=np.float64).reshape(len(rows) - 1, len(names))
    return names, m
