"""Desk-scale MoE language model.

embedding -> L x (RMSNorm -> routed SwiGLU experts, residual) -> output head.

Parameters live in a flat ``dict[str, np.ndarray]`` keyed by block name:

    psi.embed            V x d
    psi.norm.{l}         d
    psi.router.{l}       d x M
    psi.head             d x V      (absent when the head is tied)
    phi.{l}.{j}.gate     d x f
    phi.{l}.{j}.up       d x f
    phi.{l}.{j}.down     f x d

``psi.*`` blocks are shared, ``phi.*`` blocks are experts.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, Mapping

import numpy as np

from . import tensor as tc
from .tensor import Tape, Tensor

Params = dict[str, np.ndarray]

EXPERT_MATS = ("gate", "up", "down")


@dataclass(frozen=True)
class LossCoefficients:
    ce: float = 1.0
    lb: float = 0.01
    moe_z: float = 0.001
    z: float = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    vocab: int
    hidden: int
    intermediate: int
    layers: int
    experts_total: int
    experts_active: int
    renormalize_after_topk: bool = False
    coefficients: LossCoefficients = field(default_factory=LossCoefficients)
    tie_head: bool = False
    norm_eps: float = 1e-6
    init_std: float = 0.02
    # Attention shapes are accounted for in cost reports only; the desk model has no attention kernel.
    attn_heads: int = 0
    attn_kv_heads: int = 0
    attn_head_dim: int = 0

    def __post_init__(self):
        for name in ("vocab", "hidden", "intermediate", "layers", "experts_total", "experts_active"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 1 <= self.experts_active <= self.experts_total:
            raise ValueError(f"need 1 <= k <= M, got k={self.experts_active}, M={self.experts_total}")
        c = self.coefficients
        if min(c.ce, c.lb, c.moe_z, c.z) < 0:
            raise ValueError("loss coefficients must be non-negative")
        if self.attn_heads and (self.attn_kv_heads < 1 or self.attn_head_dim < 1):
            raise ValueError("attention accounting needs kv heads and head dim")

    @property
    def has_attention(self) -> bool:
        return self.attn_heads > 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelConfig:
        d = dict(d)
        if isinstance(d.get("coefficients"), Mapping):
            d["coefficients"] = LossCoefficients(**d["coefficients"])
        return cls(**d)


def shared_block_names(cfg: ModelConfig) -> list[str]:
    return [n for n, _ in param_shapes(cfg) if n.startswith("psi.")]


def expert_block_name(layer: int, expert: int, mat: str) -> str:
    return f"phi.{layer}.{expert}.{mat}"


def expert_blocks(cfg: ModelConfig, experts) -> list[str]:
    return [expert_block_name(l, j, m) for l in range(cfg.layers) for j in sorted(experts) for m in EXPERT_MATS]


def is_expert_block(name: str) -> bool:
    return name.startswith("phi.")


def expert_index(name: str) -> int:
    return int(name.split(".")[2])


def param_shapes(cfg: ModelConfig) -> Iterator[tuple[str, tuple[int, ...]]]:
    """Every parameter block with its shape, in canonical order."""
    V, d, f, M = cfg.vocab, cfg.hidden, cfg.intermediate, cfg.experts_total
    yield "psi.embed", (V, d)
    for l in range(cfg.layers):
        if cfg.has_attention:
            q = cfg.attn_heads * cfg.attn_head_dim
            kv = cfg.attn_kv_heads * cfg.attn_head_dim
            yield f"psi.attn_norm.{l}", (d,)
            yield f"psi.attn.{l}.q", (d, q)
            yield f"psi.attn.{l}.k", (d, kv)
            yield f"psi.attn.{l}.v", (d, kv)
            yield f"psi.attn.{l}.o", (q, d)
            yield f"psi.attn.{l}.q_norm", (cfg.attn_head_dim,)
            yield f"psi.attn.{l}.k_norm", (cfg.attn_head_dim,)
        yield f"psi.norm.{l}", (d,)
        yield f"psi.router.{l}", (d, M)
    if cfg.has_attention:
        yield "psi.final_norm", (d,)
    if not cfg.tie_head:
        yield "psi.head", (d, V)
    for l in range(cfg.layers):
        for j in range(M):
            yield expert_block_name(l, j, "gate"), (d, f)
            yield expert_block_name(l, j, "up"), (d, f)
            yield expert_block_name(l, j, "down"), (f, d)


def count_params(cfg: ModelConfig) -> tuple[int, int]:
    """(|psi|, |Phi|) enumerated from block shapes."""
    shared = expert = 0
    for name, shape in param_shapes(cfg):
        n = math.prod(shape)
        if is_expert_block(name):
            expert += n
        else:
            shared += n
    return shared, expert


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Params:
    if cfg.has_attention:
        raise ValueError("attention blocks are accounting-only; build desk models with attn_heads=0")
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in param_shapes(cfg):
        if name.startswith("psi.norm"):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = (rng.standard_normal(shape) * cfg.init_std).astype(dtype)
    return params


def head_name(cfg: ModelConfig) -> str:
    return "psi.embed" if cfg.tie_head else "psi.head"


@dataclass
class RoutingDecision:
    indices: np.ndarray  # T x k, distinct per row
    weights: Tensor  # T x k
    probs: Tensor  # T x M full softmax
    logits: Tensor  # T x M


@dataclass
class LossBundle:
    total: Tensor
    ce: Tensor
    lb: Tensor
    moe_z: Tensor
    z: Tensor
    expert_counts: np.ndarray  # L x M, (token, slot) assignments
    expert_evals: int = 0

    def floats(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("total", "ce", "lb", "moe_z", "z")}


def topk_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Top-k columns per row; ties go to the lowest expert index."""
    return np.argsort(-probs, axis=1, kind="stable")[:, :k]


class MoEModel:
    """Forward computation over a set of parameter tensors.

    ``tensors`` maps block name to :class:`Tensor`; blocks that should not
    receive gradients are simply created with ``requires_grad=False``.
    """

    def __init__(self, cfg: ModelConfig, tensors: Mapping[str, Tensor]):
        self.cfg = cfg
        self.t = tensors

    @classmethod
    def from_params(cls, cfg: ModelConfig, params: Mapping[str, np.ndarray], trainable=None) -> MoEModel:
        trainable = set(params) if trainable is None else set(trainable)
        return cls(cfg, {n: Tensor(p, requires_grad=n in trainable, name=n) for n, p in params.items()})

    def route(self, h: Tensor, layer: int) -> RoutingDecision:
        cfg = self.cfg
        if not 0 <= layer < cfg.layers:
            raise IndexError(f"layer {layer} out of range")
        logits = tc.matmul(h, self.t[f"psi.router.{layer}"])
        probs = tc.softmax(logits)
        idx = topk_indices(probs.data, cfg.experts_active)
        w = tc.gather_cols(probs, idx)
        if cfg.renormalize_after_topk:
            w = tc.normalize_rows(w)
        return RoutingDecision(idx, w, probs, logits)

    def expert(self, x: Tensor, layer: int, j: int) -> Tensor:
        t = self.t
        return tc.swiglu_expert(
            x, t[expert_block_name(layer, j, "gate")], t[expert_block_name(layer, j, "up")], t[expert_block_name(layer, j, "down")]
        )

    def moe_forward(self, h: Tensor, layer: int, routing: RoutingDecision | None = None) -> tuple[Tensor, RoutingDecision, int]:
        """Dropless MoE: every token is evaluated by each of its k selected experts."""
        if routing is None:
            routing = self.route(h, layer)
        T = h.shape[0]
        idx = routing.indices
        parts = []
        evals = 0
        for j in range(self.cfg.experts_total):
            tok, slot = np.nonzero(idx == j)
            if tok.size == 0:
                continue
            y = self.expert(tc.take_rows(h, tok), layer, j)
            w = tc.take_entries(routing.weights, tok, slot)
            parts.append((tc.scale_rows(y, w), tok))
            evals += tok.size
        return tc.scatter_rows(T, parts), routing, evals

    def hidden_states(self, ids: np.ndarray):
        cfg = self.cfg
        h = tc.embedding(self.t["psi.embed"], ids)
        routings = []
        evals = 0
        for l in range(cfg.layers):
            x = tc.rmsnorm(h, self.t[f"psi.norm.{l}"], cfg.norm_eps)
            y, r, e = self.moe_forward(x, l)
            routings.append(r)
            evals += e
            h = tc.add(h, y)
        return h, routings, evals

    def logits(self, ids: np.ndarray) -> tuple[Tensor, list[RoutingDecision], int]:
        h, routings, evals = self.hidden_states(ids)
        W = self.t[head_name(self.cfg)]
        if self.cfg.tie_head:
            # tied head: logits = h @ embed^T
            out = tc.matmul(h, _transpose(W))
        else:
            out = tc.matmul(h, W)
        return out, routings, evals

    def loss(self, batch: np.ndarray) -> LossBundle:
        cfg = self.cfg
        batch = np.asarray(batch)
        if batch.ndim != 2 or batch.shape[1] < 2:
            raise ValueError(f"batch must be B x (S+1) with S >= 1, got {batch.shape}")
        if batch.min() < 0 or batch.max() >= cfg.vocab:
            raise IndexError(f"token id out of range [0, {cfg.vocab})")
        ids = batch[:, :-1].reshape(-1)
        targets = batch[:, 1:].reshape(-1)
        logits, routings, evals = self.logits(ids)
        ce, lse = tc.softmax_cross_entropy(logits, targets)
        z = tc.mean(tc.square(lse))
        M, k = cfg.experts_total, cfg.experts_active
        T = ids.size
        moe_z_terms, lb_terms = [], []
        counts = np.zeros((cfg.layers, M), dtype=np.int64)
        for l, r in enumerate(routings):
            moe_z_terms.append(tc.mean(tc.square(tc.logsumexp(r.logits))))
            c = np.bincount(r.indices.reshape(-1), minlength=M)
            counts[l] = c
            frac = c / (T * k)
            lb_terms.append(tc.dot_const(tc.col_mean(r.probs), M * frac))
        inv_layers = 1.0 / cfg.layers
        moe_z = tc.scale(tc.add_all(moe_z_terms), inv_layers)
        lb = tc.scale(tc.add_all(lb_terms), inv_layers)
        co = cfg.coefficients
        total = tc.add_all([tc.scale(ce, co.ce), tc.scale(lb, co.lb), tc.scale(moe_z, co.moe_z), tc.scale(z, co.z)])
        return LossBundle(total, ce, lb, moe_z, z, counts, evals)


def _transpose(t: Tensor) -> Tensor:
    return tc._record(Tensor(t.data.T), (t,), lambda g: (g.T,))


def model_loss(cfg: ModelConfig, params: Mapping[str, np.ndarray], batch: np.ndarray) -> LossBundle:
    """Loss components for a batch without recording gradients."""
    return MoEModel.from_params(cfg, params, trainable=()).loss(batch)


def loss_and_grads(cfg: ModelConfig, params: Mapping[str, np.ndarray], batch: np.ndarray, trainable=None):
    """Loss bundle and gradients for the trainable blocks (all blocks by default)."""
    model = MoEModel.from_params(cfg, params, trainable)
    with Tape() as tape:
        bundle = model.loss(batch)
    grads = tape.backward(bundle.total)
    out = {n: grads[t] for n, t in model.t.items() if t.requires_grad}
    return bundle, out


# --- upcycling and partition ------------------------------------------------


def upcycle_from_dense(
    cfg: ModelConfig,
    dense: Mapping[str, np.ndarray],
    experts: int,
    noise_frac: float = 0.5,
    noise_std: float = 0.02,
    seed: int = 0,
    experts_active: int | None = None,
) -> tuple[ModelConfig, Params]:
    """Replicate the single FFN of a dense (M=1) model into ``experts`` noisy copies.

    Routers are re-initialised for the wider expert set; every other shared
    block is copied. The returned config renormalises gate weights after top-k.
    """
    if cfg.experts_total != 1:
        raise ValueError("upcycling needs a dense source with exactly one expert")
    if experts < 2:
        raise ValueError("upcycling needs at least two experts")
    k = experts_active if experts_active is not None else cfg.experts_active
    out_cfg = replace(cfg, experts_total=experts, experts_active=k, renormalize_after_topk=True)
    rng = np.random.default_rng(seed)
    out: Params = {}
    for name, shape in param_shapes(out_cfg):
        if name.startswith("psi.router"):
            out[name] = (rng.standard_normal(shape) * cfg.init_std).astype(dense[name].dtype)
        elif name.startswith("psi."):
            out[name] = dense[name].copy()
    for l in range(cfg.layers):
        for j in range(experts):
            for m in EXPERT_MATS:
                src = dense[expert_block_name(l, 0, m)]
                w = src.copy()
                flat = w.reshape(-1)
                n_noisy = int(round(noise_frac * flat.size))
                if n_noisy and noise_std > 0:
                    sel = rng.choice(flat.size, size=n_noisy, replace=False)
                    flat[sel] += (rng.standard_normal(n_noisy) * noise_std).astype(w.dtype)
                out[expert_block_name(l, j, m)] = w
    return out_cfg, out


def param_partition(M: int, N: int) -> list[list[int]]:
    """Contiguous blocks of ceil(M/N) expert indices per node, same for every layer."""
    if N < 1:
        raise ValueError("need at least one node")
    if N > M:
        raise ValueError(f"{N} nodes cannot each own an expert out of {M}")
    size = -(-M // N)
    parts = [list(range(i * size, min((i + 1) * size, M))) for i in range(N)]
    empty = [i for i, p in enumerate(parts) if not p]
    if empty:
        raise ValueError(f"contiguous partition of {M} experts over {N} nodes leaves nodes {empty} without experts")
    return parts


def owner_of(partition: list[list[int]]) -> dict[int, int]:
    return {j: i for i, part in enumerate(partition) for j in part}


# --- presets ------------------------------------------------------------------

QWEN_VOCAB = 151936

PRESETS = {
    # Full-size MoE shapes used for cost accounting; vocab is the Qwen tokenizer's padded size.
    # The 7B/9B presets use grouped-query attention with 8 KV heads.
    "moe-1b": ModelConfig(QWEN_VOCAB, 768, 2048, 12, 16, 2, attn_heads=12, attn_kv_heads=12, attn_head_dim=64),
    "moe-2b": ModelConfig(QWEN_VOCAB, 1536, 1280, 16, 16, 2, attn_heads=24, attn_kv_heads=24, attn_head_dim=64),
    "moe-7b": ModelConfig(QWEN_VOCAB, 2048, 2048, 16, 32, 4, attn_heads=16, attn_kv_heads=8, attn_head_dim=128),
    "moe-9b": ModelConfig(
        QWEN_VOCAB, 2048, 6144, 28, 8, 2, renormalize_after_topk=True,
        attn_heads=16, attn_kv_heads=8, attn_head_dim=128,
    ),
}
