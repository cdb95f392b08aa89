"""Analytic per-node memory and per-round communication, in parameter units.

    SPES    memory 4|psi| + |Phi| + 3|Phi_i|     comm N(2|psi| + |Phi| + |Phi_i|)
    DiLoCo  memory 4(|psi| + |Phi|)              comm 2N(|psi| + |Phi|)

Memory units: parameters plus three optimizer-state scalars (m, v, gradient)
per trainable parameter. Communication: every node downloads the full model
and uploads what it trained.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .model import ModelConfig, count_params, expert_blocks, param_partition, param_shapes


@dataclass(frozen=True)
class CostReport:
    psi: int
    phi: int
    phi_i: int
    nodes: int
    memory_centralized: int
    memory_diloco: int
    memory_spes: int
    comm_diloco: int
    comm_spes: int
    comm_spes_exact: int
    upload_spes_per_node: int
    upload_diloco_per_node: int
    bytes_per_param: int = 4

    @property
    def comm_ratio(self) -> float:
        return self.comm_spes / self.comm_diloco

    @property
    def memory_ratio(self) -> float:
        return self.memory_spes / self.memory_diloco

    def to_dict(self) -> dict:
        d = asdict(self)
        d["comm_ratio"] = self.comm_ratio
        d["memory_ratio"] = self.memory_ratio
        w = self.bytes_per_param
        d["bytes"] = {k: getattr(self, k) * w for k in ("memory_spes", "memory_diloco", "comm_spes", "comm_diloco", "upload_spes_per_node", "upload_diloco_per_node")}
        return d


def owned_params(cfg: ModelConfig, experts) -> int:
    shapes = dict(param_shapes(cfg))
    return sum(math.prod(shapes[n]) for n in expert_blocks(cfg, experts))


def cost_report(cfg: ModelConfig, N: int, bytes_per_param: int = 4) -> CostReport:
    """Formulas instantiated from live shapes; |Phi_i| is the largest per-node expert share."""
    psi, phi = count_params(cfg)
    parts = param_partition(cfg.experts_total, N)
    shares = [owned_params(cfg, p) for p in parts]
    phi_i = max(shares)
    return CostReport(
        psi=psi,
        phi=phi,
        phi_i=phi_i,
        nodes=N,
        memory_centralized=4 * (psi + phi),
        memory_diloco=4 * (psi + phi),
        memory_spes=4 * psi + phi + 3 * phi_i,
        comm_diloco=2 * N * (psi + phi),
        comm_spes=N * (2 * psi + phi + phi_i),
        comm_spes_exact=sum(2 * psi + phi + s for s in shares),
        upload_spes_per_node=psi + phi_i,
        upload_diloco_per_node=psi + phi,
        bytes_per_param=bytes_per_param,
    )
