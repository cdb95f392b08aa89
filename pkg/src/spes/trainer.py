"""Per-node inner optimisation and the server-side outer step.

A node trains the shared blocks plus the experts it owns; everything else is
frozen. Optimizer state (first/second moment and a gradient buffer) is
allocated for trainable blocks only, so its size never depends on the
experts a node does not own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .model import ModelConfig, Params, expert_blocks, loss_and_grads, param_shapes, shared_block_names
from .tensor import NonFiniteError


@dataclass(frozen=True)
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1


@dataclass(frozen=True)
class LRSchedule:
    """Linear warmup to ``peak``, then cosine decay to ``min_ratio * peak`` at ``total`` steps."""

    peak: float
    warmup: int = 0
    total: int = 1
    min_ratio: float = 0.1

    def __call__(self, step: int) -> float:
        if step < self.warmup:
            return self.peak * (step + 1) / self.warmup
        span = max(1, self.total - self.warmup)
        frac = min(1.0, (step - self.warmup) / span)
        lo = self.peak * self.min_ratio
        return lo + 0.5 * (self.peak - lo) * (1.0 + math.cos(math.pi * frac))

    @classmethod
    def constant(cls, lr: float) -> LRSchedule:
        return cls(peak=lr, warmup=0, total=1, min_ratio=1.0)


@dataclass(frozen=True)
class TrainMask:
    """Block mask U_i: shared blocks plus the owned experts' blocks."""

    node: int
    trainable: frozenset[str]

    @classmethod
    def for_node(cls, cfg: ModelConfig, node: int, experts: Iterable[int]) -> TrainMask:
        names = set(shared_block_names(cfg)) | set(expert_blocks(cfg, experts))
        return cls(node, frozenset(names))

    @classmethod
    def full(cls, cfg: ModelConfig, node: int = 0) -> TrainMask:
        return cls(node, frozenset(n for n, _ in param_shapes(cfg)))

    def __contains__(self, name: str) -> bool:
        return name in self.trainable

    def apply(self, v: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Zero every block outside the mask."""
        return {n: (a if n in self.trainable else np.zeros_like(a)) for n, a in v.items()}


class MaskedAdamW:
    """AdamW with bias correction and decoupled weight decay, state only for trainable blocks."""

    def __init__(self, params: Mapping[str, np.ndarray], mask: TrainMask, cfg: AdamWConfig = AdamWConfig()):
        self.cfg = cfg
        self.mask = mask
        self.step_count = 0
        self.allocated = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.grad_buf: dict[str, np.ndarray] = {}
        for name in sorted(mask.trainable):
            a = params[name]
            self.m[name] = self._alloc(a)
            self.v[name] = self._alloc(a)
            self.grad_buf[name] = self._alloc(a)

    def _alloc(self, like: np.ndarray) -> np.ndarray:
        self.allocated += like.size
        return np.zeros_like(like)

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> None:
        """Update the trainable blocks of ``params`` in place; frozen blocks are never touched."""
        c = self.cfg
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - c.beta1**t
        bc2 = 1.0 - c.beta2**t
        for name in self.mask.trainable:
            if name not in self.m:
                raise KeyError(f"no optimizer state for trainable block {name!r}")
            g = self.grad_buf[name]
            src = grads.get(name)
            if src is None:
                g.fill(0)
            else:
                np.copyto(g, src)
            m, v = self.m[name], self.v[name]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            denom = np.sqrt(v / bc2) + c.eps
            p = params[name]
            p *= 1 - lr * c.weight_decay
            p -= lr * (m / bc1) / denom


class MaskedSGD:
    """Plain SGD on trainable blocks; used by the theory checks."""

    def __init__(self, params: Mapping[str, np.ndarray], mask: TrainMask):
        self.mask = mask
        self.step_count = 0
        self.allocated = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> None:
        self.step_count += 1
        for name in self.mask.trainable:
            g = grads.get(name)
            if g is not None:
                params[name] -= lr * g


def make_optimizer(kind: str, params, mask: TrainMask, adam: AdamWConfig = AdamWConfig()):
    if kind == "adamw":
        return MaskedAdamW(params, mask, adam)
    if kind == "sgd":
        return MaskedSGD(params, mask)
    raise ValueError(f"unknown inner optimizer {kind!r}")


def static_units(params: Mapping[str, np.ndarray], opt) -> int:
    """Parameters held by a node plus allocated optimizer-state scalars."""
    return sum(a.size for a in params.values()) + opt.allocated


def block_digest(params: Mapping[str, np.ndarray], names: Iterable[str]) -> dict[str, bytes]:
    return {n: params[n].tobytes() for n in names}


@dataclass
class LocalRoundResult:
    params: Params
    steps: int
    losses: list[dict[str, float]]
    optimizer: object
    drift_sq: list[float] = field(default_factory=list)
    update_norms: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    expert_counts: np.ndarray | None = None


def local_round(
    cfg: ModelConfig,
    theta: Mapping[str, np.ndarray],
    batch_at: Callable[[int], np.ndarray],
    H: int,
    mask: TrainMask,
    lr: LRSchedule | float,
    *,
    step0: int = 0,
    optimizer=None,
    inner: str = "adamw",
    adam: AdamWConfig = AdamWConfig(),
    track_drift: bool = False,
) -> LocalRoundResult:
    """Run H masked optimizer steps starting from ``theta``.

    ``batch_at(h)`` returns the h-th mini-batch of the node's shard for this
    round. ``step0`` is the global step index of h=0 (drives the LR schedule).
    Pass an existing ``optimizer`` to carry its state across rounds.
    """
    if H < 1:
        raise ValueError(f"H must be >= 1, got {H}")
    sched = lr if isinstance(lr, LRSchedule) else LRSchedule.constant(float(lr))
    params = {n: (a.copy() if n in mask else a) for n, a in theta.items()}
    frozen = [n for n in params if n not in mask]
    before = block_digest(params, frozen)
    opt = optimizer if optimizer is not None else make_optimizer(inner, params, mask, adam)
    origin = {n: np.asarray(theta[n], dtype=np.float64) for n in mask.trainable} if track_drift else None
    res = LocalRoundResult(params, 0, [], opt)
    counts = None
    for h in range(H):
        bundle, grads = loss_and_grads(cfg, params, batch_at(h), mask.trainable)
        vals = bundle.floats()
        if not all(math.isfinite(x) for x in vals.values()):
            raise NonFiniteError(f"non-finite loss at local step {h}: {vals}")
        res.losses.append(vals)
        counts = bundle.expert_counts if counts is None else counts + bundle.expert_counts
        eta = sched(step0 + h)
        res.lrs.append(eta)
        prev = {n: params[n].astype(np.float64) for n in mask.trainable} if track_drift else None
        opt.step(params, grads, eta)
        if track_drift:
            step_sq = sum(float(np.sum((params[n] - prev[n]) ** 2)) for n in mask.trainable)
            res.update_norms.append(math.sqrt(step_sq) / eta)
            res.drift_sq.append(sum(float(np.sum((params[n] - origin[n]) ** 2)) for n in mask.trainable))
        res.steps += 1
    if block_digest(params, frozen) != before:
        raise AssertionError("frozen block modified during local round")
    res.expert_counts = counts
    return res


# --- outer optimiser ----------------------------------------------------------


@dataclass
class OuterOptimizer:
    """Server-side step on the mean node delta: SGD or Nesterov momentum.

    The pseudo-gradient is ``g = -mean_i(theta_i - theta)``. Nesterov follows
    the usual form ``buf = mu*buf + g; theta -= lr*(g + mu*buf)``.
    """

    kind: str = "sgd"
    lr: float = 1.0
    momentum: float = 0.9
    buf: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "nesterov"):
            raise ValueError(f"unknown outer optimizer {self.kind!r}")

    def step(self, theta: Mapping[str, np.ndarray], deltas: Sequence[Mapping[str, np.ndarray]], expected: int | None = None) -> Params:
        if expected is not None and len(deltas) != expected:
            raise RuntimeError(f"barrier violation: {len(deltas)} of {expected} node deltas present")
        if not deltas:
            raise RuntimeError("barrier violation: no node deltas")
        out = dict(theta)
        names = sorted({n for d in deltas for n in d})
        for name in names:
            parts = [d[name] for d in deltas if name in d]
            acc = np.zeros(theta[name].shape, dtype=np.float64)
            for p in parts:
                acc += p
            g = -(acc / len(parts))
            if self.kind == "nesterov":
                b = self.buf.get(name)
                b = g.copy() if b is None else self.momentum * b + g
                self.buf[name] = b
                g = g + self.momentum * b
            out[name] = (theta[name].astype(np.float64) - self.lr * g).astype(theta[name].dtype)
        return out


def deltas_of(theta: Mapping[str, np.ndarray], local: Mapping[str, np.ndarray], names: Iterable[str]) -> dict[str, np.ndarray]:
    return {n: local[n].astype(np.float64) - theta[n].astype(np.float64) for n in names}


@dataclass
class NodeTrainer:
    """Everything a worker needs to run its local rounds.

    ``batch_at(node, round, h)`` must be a pure function so that runs are
    reproducible regardless of transport or message interleaving.
    """

    cfg: ModelConfig
    H: int
    lr: LRSchedule
    batch_at: Callable[[int, int, int], np.ndarray]
    inner: str = "adamw"
    adam: AdamWConfig = AdamWConfig()
    carry_state: bool = False
    track_drift: bool = False
    _opt: object = field(default=None, repr=False)

    def run(self, node: int, t: int, theta: Mapping[str, np.ndarray], experts: Iterable[int]) -> tuple[LocalRoundResult, TrainMask]:
        mask = TrainMask.for_node(self.cfg, node, experts)
        res = local_round(
            self.cfg,
            theta,
            lambda h: self.batch_at(node, t, h),
            self.H,
            mask,
            self.lr,
            step0=(t - 1) * self.H,
            optimizer=self._opt if self.carry_state else None,
            inner=self.inner,
            adam=self.adam,
            track_drift=self.track_drift,
        )
        if self.carry_state:
            self._opt = res.optimizer
        return res, mask
