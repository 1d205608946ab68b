"""Frozen expert taken at each task boundary.

The expert serves soft labels for old classes and the stored graph output
that the relationship-preserving loss pulls the live graph towards.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .acm import AssembledAcm, propagation_matrix
from .model import agcn_forward, params_checksum, predict
from . import numerics as nx


class MissingExpertError(RuntimeError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ExpertSnapshot:
    params: Mapping[str, np.ndarray]
    acm: np.ndarray  # un-normalized A^{t-1}
    embeddings: np.ndarray  # H^{t-1,0}
    graph: np.ndarray  # G^{t-1}
    slope: float
    scheme: str = "reweighted"
    p: float = 0.2

    @classmethod
    def create(
        cls,
        params: Mapping[str, np.ndarray],
        acm: AssembledAcm | np.ndarray,
        embeddings: np.ndarray,
        slope: float = 0.2,
        scheme: str = "reweighted",
        p: float = 0.2,
    ) -> "ExpertSnapshot":
        frozen_params = {k: _frozen(v) for k, v in params.items()}
        a = _frozen(acm.matrix if isinstance(acm, AssembledAcm) else acm)
        h0 = _frozen(embeddings)
        g = agcn_forward(
            nx.constant(propagation_matrix(a, scheme, p)),
            nx.constant(h0),
            nx.constant(frozen_params["W1"]),
            nx.constant(frozen_params["W2"]),
            slope,
        ).value
        return cls(frozen_params, a, h0, _frozen(g), slope, scheme, p)

    @property
    def num_classes(self) -> int:
        return self.acm.shape[0]

    def soft_labels(self, x: np.ndarray) -> np.ndarray:
        return predict(x, self.a_hat(), self.embeddings, self.params, self.slope)

    def a_hat(self) -> np.ndarray:
        return propagation_matrix(self.acm, self.scheme, self.p)

    def stored_graph(self) -> np.ndarray:
        return self.graph

    def checksum(self) -> str:
        h = hashlib.sha256(params_checksum(self.params).encode())
        for arr in (self.acm, self.embeddings, self.graph):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"expert.{k}": v for k, v in self.params.items()}
        out["expert.acm"] = self.acm
        out["expert.embeddings"] = self.embeddings
        out["expert.graph"] = self.graph
        return out

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray], slope: float = 0.2, scheme: str = "reweighted", p: float = 0.2) -> "ExpertSnapshot":
        params = {k.split(".", 1)[1]: _frozen(v) for k, v in tensors.items() if k.startswith("expert.") and k.split(".", 1)[1] in ("V1", "V2", "W1", "W2")}
        return cls(
            params,
            _frozen(tensors["expert.acm"]),
            _frozen(tensors["expert.embeddings"]),
            _frozen(tensors["expert.graph"]),
            slope,
            scheme,
            p,
        )


class AutoUpdatedExpert:
    """Holds at most one snapshot; replaced wholesale at task boundaries."""

    def __init__(self) -> None:
        self._snapshot: ExpertSnapshot | None = None

    @property
    def snapshot(self) -> ExpertSnapshot | None:
        return self._snapshot

    def __bool__(self) -> bool:
        return self._snapshot is not None

    def _require(self) -> ExpertSnapshot:
        if self._snapshot is None:
            raise MissingExpertError("no expert yet: the first task has no old classes")
        return self._snapshot

    def rotate(self, params, acm, embeddings, slope: float = 0.2, scheme: str = "reweighted", p: float = 0.2) -> ExpertSnapshot:
        self._snapshot = ExpertSnapshot.create(params, acm, embeddings, slope, scheme, p)
        return self._snapshot

    def restore(self, snapshot: ExpertSnapshot) -> None:
        self._snapshot = snapshot

    def soft_labels(self, x: np.ndarray) -> np.ndarray:
        return self._require().soft_labels(x)

    def stored_graph(self) -> np.ndarray:
        return self._require().stored_graph()

    def checksum(self) -> str | None:
        return None if self._snapshot is None else self._snapshot.checksum()
