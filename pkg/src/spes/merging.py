"""Expert-merging warm-up.

Per layer, every expert is pulled toward its K most cosine-similar peers:

    phi_j <- phi_j + alpha_t / K * sum_{k in Q_j} (phi_k - phi_j)

with alpha_t decaying linearly to zero at T_merge. All experts are updated
simultaneously from a pre-merge snapshot.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .model import EXPERT_MATS, ModelConfig, Params, expert_block_name

log = logging.getLogger(__name__)

SOURCES = ("gate", "up", "concat")


@dataclass(frozen=True)
class MergeSchedule:
    """Schedule in server rounds. ``t`` is the 0-based index of the aggregation event."""

    T_merge: int
    interval: int = 1
    alpha0: float = 0.1
    K: int = 4
    source: str = "gate"

    def __post_init__(self):
        if self.T_merge < 0 or self.interval < 1 or self.K < 1 or self.alpha0 < 0:
            raise ValueError(f"invalid merge schedule {self}")
        if self.source not in SOURCES:
            raise ValueError(f"similarity source must be one of {SOURCES}")

    def alpha_at(self, t: int) -> float:
        if self.T_merge == 0:
            return 0.0
        return self.alpha0 * max(0.0, 1.0 - t / self.T_merge)

    def active(self, t: int) -> bool:
        return t < self.T_merge and t % self.interval == 0

    def to_dict(self) -> dict:
        return asdict(self)


def similarity_matrix(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Cosine similarity between flattened vectors; zero-norm vectors get 0 off the diagonal."""
    W = np.stack([np.asarray(v, dtype=np.float64).ravel() for v in vectors])
    if W.shape[0] < 2:
        raise ValueError("need at least two experts")
    norms = np.linalg.norm(W, axis=1)
    zero = norms == 0
    if zero.any():
        log.warning("zero-norm expert projection(s) %s; similarity set to 0", np.flatnonzero(zero).tolist())
    safe = np.where(zero, 1.0, norms)
    U = W / safe[:, None]
    A = np.clip(U @ U.T, -1.0, 1.0)
    A[zero, :] = 0.0
    A[:, zero] = 0.0
    np.fill_diagonal(A, 1.0)
    return A


def select_peers(A: np.ndarray, j: int, K: int) -> list[int]:
    """Top-K most similar experts to j, self excluded, ties to the lowest index."""
    if K < 1:
        raise ValueError("K must be >= 1")
    others = [k for k in range(A.shape[0]) if k != j]
    row = A[j, others]
    order = np.argsort(-row, kind="stable")
    return sorted(others[i] for i in order[:K])


def merge_vectors(phis: Sequence[Mapping[str, np.ndarray]], peers: Sequence[Sequence[int]], alpha: float):
    """Task-arithmetic merge of expert parameter dicts using a frozen snapshot.

    Returns the merged dicts (original dtype) and the squared displacement norm.
    """
    snap = [{m: np.asarray(p[m], dtype=np.float64) for m in p} for p in phis]
    out, disp = [], 0.0
    for j, Q in enumerate(peers):
        merged = {}
        for m, base in snap[j].items():
            acc = np.zeros_like(base)
            for k in Q:
                acc += snap[k][m] - base
            new = (base + alpha * (acc / len(Q))).astype(phis[j][m].dtype)
            disp += float(np.sum((new.astype(np.float64) - base) ** 2))
            merged[m] = new
        out.append(merged)
    return out, disp


def triangle_bound(phis: Sequence[Mapping[str, np.ndarray]], peers: Sequence[Sequence[int]]) -> float:
    """sum_j ((1/K) sum_k ||phi_k - phi_j||)^2, an upper bound on ||Delta||^2 / alpha^2."""
    total = 0.0
    for j, Q in enumerate(peers):
        s = 0.0
        for k in Q:
            s += np.sqrt(sum(float(np.sum((phis[k][m].astype(np.float64) - phis[j][m]) ** 2)) for m in phis[j]))
        total += (s / len(Q)) ** 2
    return total


def _projection(phi: Mapping[str, np.ndarray], source: str) -> np.ndarray:
    if source == "concat":
        return np.concatenate([phi["gate"].ravel(), phi["up"].ravel()])
    return phi[source]


@dataclass
class MergeEvent:
    round: int
    alpha: float
    peers: list[list[list[int]]] = field(default_factory=list)
    displacement_sq: list[float] = field(default_factory=list)
    triangle_sq: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def layer_experts(cfg: ModelConfig, theta: Mapping[str, np.ndarray], layer: int) -> list[dict[str, np.ndarray]]:
    return [{m: theta[expert_block_name(layer, j, m)] for m in EXPERT_MATS} for j in range(cfg.experts_total)]


def merge_model(cfg: ModelConfig, theta: Mapping[str, np.ndarray], schedule: MergeSchedule, t: int) -> tuple[Params, MergeEvent]:
    """Apply one merging event at schedule index t to every layer independently."""
    alpha = schedule.alpha_at(t)
    K = min(schedule.K, cfg.experts_total - 1)
    out = dict(theta)
    ev = MergeEvent(round=t, alpha=alpha)
    for l in range(cfg.layers):
        phis = layer_experts(cfg, theta, l)
        A = similarity_matrix([_projection(p, schedule.source) for p in phis])
        peers = [select_peers(A, j, K) for j in range(len(phis))]
        merged, disp = merge_vectors(phis, peers, alpha)
        for j, p in enumerate(merged):
            for m, a in p.items():
                out[expert_block_name(l, j, m)] = a
        ev.peers.append(peers)
        ev.displacement_sq.append(disp)
        ev.triangle_sq.append(triangle_bound(phis, peers))
    return out, ev
