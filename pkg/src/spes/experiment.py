"""Experiment runner: corpus, sharding, the three training paradigms, metrics and reports.

A run directory holds ``metrics.csv`` (one MetricsRow per round, appended as
rounds finish), ``manifest.json`` (config, hash, totals, cost report, status)
and ``checkpoint.bin`` (final parameters, tensor-block format).
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .cost import cost_report
from .data import SyntheticCorpus, ShardSampler, gen_corpus, make_shards, split_heldout
from .merging import MergeSchedule
from .model import PRESETS, MoEModel, ModelConfig, init_params, param_partition
from .protocol import Server, ServerSpec, Worker, save_checkpoint
from .trainer import AdamWConfig, LRSchedule, NodeTrainer, OuterOptimizer, TrainMask, local_round
from .transport import InProcessTransport, run_socket_local

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
PARADIGMS = ("centralized", "diloco", "spes")
METRICS_ENV = "SPES_METRICS"

DESK_MODEL = ModelConfig(vocab=32, hidden=16, intermediate=32, layers=2, experts_total=8, experts_active=2, init_std=0.1)


class ExperimentError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "desk"
    paradigm: str = "spes"
    model: ModelConfig = DESK_MODEL
    N: int = 4
    H: int = 10
    rounds: int = 20
    # inner optimiser and schedule
    lr: float = 3e-3
    warmup: int = 0
    min_lr_ratio: float = 0.1
    schedule: str = "cosine"
    inner: str = "adamw"
    weight_decay: float = 0.1
    carry_state: bool = False
    # outer step (diloco); spes aggregates literally
    outer: str = "nesterov"
    outer_lr: float = 0.7
    outer_momentum: float = 0.9
    # expert merging (T_merge=0 disables)
    merge_T: int = 0
    merge_interval: int = 1
    merge_alpha: float = 0.1
    merge_K: int = 4
    merge_source: str = "gate"
    # data
    batch: int = 8
    seq_len: int = 32
    sources: int = 4
    sequences: int = 2000
    concentration: float = 0.2
    home_weight: float = 0.0
    shard: str = "random"
    heldout: float = 0.1
    eval_sequences: int = 64
    eval_every: int = 1
    # optional second phase: after this fraction of rounds switch to (phase2_H, phase2_batch)
    phase2_fraction: float | None = None
    phase2_H: int | None = None
    phase2_batch: int | None = None
    # seeds and execution
    seed: int = 0
    data_seed: int = 0
    interleave_seed: int | None = None
    transport: str = "inprocess"

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"paradigm must be one of {PARADIGMS}")
        if self.paradigm == "centralized":
            object.__setattr__(self, "N", 1)
            object.__setattr__(self, "H", 1)
        if min(self.N, self.H, self.rounds, self.batch) < 1:
            raise ValueError("N, H, rounds and batch must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError("schedule must be cosine or constant")
        if self.transport not in ("inprocess", "socket"):
            raise ValueError("transport must be inprocess or socket")
        if self.model.vocab < self.sources:
            raise ValueError("need vocab >= sources")
        if (self.phase2_fraction is None) != (self.phase2_H is None):
            raise ValueError("phase2_fraction and phase2_H go together")

    # derived ---------------------------------------------------------------
    @property
    def merge(self) -> MergeSchedule | None:
        if self.merge_T <= 0:
            return None
        return MergeSchedule(self.merge_T, self.merge_interval, self.merge_alpha, self.merge_K, self.merge_source)

    @property
    def phase2_round(self) -> int | None:
        """First round (1-based) of the second phase."""
        if self.phase2_fraction is None:
            return None
        return int(math.floor(self.phase2_fraction * self.rounds)) + 1

    def H_at(self, t: int) -> int:
        p = self.phase2_round
        return self.phase2_H if p is not None and t >= p else self.H

    def batch_at(self, t: int) -> int:
        p = self.phase2_round
        return (self.phase2_batch or self.batch) if p is not None and t >= p else self.batch

    def steps_before(self, t: int) -> int:
        """Local steps a node has taken before round t."""
        return sum(self.H_at(r) for r in range(1, t))

    @property
    def total_steps(self) -> int:
        return self.steps_before(self.rounds + 1)

    def tokens_in_round(self, t: int) -> int:
        return self.N * self.H_at(t) * self.batch_at(t) * self.seq_len

    @property
    def token_budget(self) -> int:
        return sum(self.tokens_in_round(t) for t in range(1, self.rounds + 1))

    def lr_schedule(self) -> LRSchedule:
        if self.schedule == "constant":
            return LRSchedule.constant(self.lr)
        return LRSchedule(self.lr, self.warmup, self.total_steps, self.min_lr_ratio)

    # serialisation -----------------------------------------------------------
    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = self.model.to_dict()
        return {"schema": SCHEMA_VERSION, **d}

    @classmethod
    def from_dict(cls, d: Mapping) -> ExperimentConfig:
        d = dict(d)
        schema = d.pop("schema", SCHEMA_VERSION)
        if schema != SCHEMA_VERSION:
            raise ValueError(f"config schema {schema} is not supported (expected {SCHEMA_VERSION})")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        if "model" in d:
            d["model"] = d["model"] if isinstance(d["model"], ModelConfig) else ModelConfig.from_dict(d["model"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> bytes:
        """sha256 of the canonical JSON; exchanged at HELLO."""
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()

    def replace(self, **kw) -> ExperimentConfig:
        return dataclasses.replace(self, **kw)

    def with_token_budget(self, tokens: int) -> ExperimentConfig:
        """Same config with the number of rounds chosen to spend ``tokens`` (single phase)."""
        per = self.N * self.H * self.batch * self.seq_len
        if tokens % per:
            raise ValueError(f"token budget {tokens} is not a multiple of {per} tokens per round")
        return self.replace(rounds=tokens // per)


# Named presets. "ref-2b" records the reference 2B recipe (H=100 then 50 after
# 70% of tokens, merge every 500 steps until step 12500, alpha 0.1, K=4) on
# the full-size shapes; it is for cost accounting and is far beyond a desk run.
PRESETS_EXPERIMENT: dict[str, dict] = {
    "desk": {},
    "desk-hetero": {"shard": "by_source", "sources": 8},
    "desk-2b-like": {
        "shard": "by_source",
        "sources": 8,
        "H": 20,
        "merge_T": 25,
        "merge_interval": 1,
        "merge_alpha": 0.1,
        "merge_K": 4,
        "phase2_fraction": 0.7,
        "phase2_H": 10,
        "phase2_batch": 4,
    },
    "ref-2b": {"H": 100, "merge_T": 125, "merge_interval": 5, "merge_alpha": 0.1, "merge_K": 4, "phase2_fraction": 0.7, "phase2_H": 50},
}


def preset(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS_EXPERIMENT:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS_EXPERIMENT)}")
    kw = {"name": name, **PRESETS_EXPERIMENT[name], **overrides}
    if name == "ref-2b":
        kw.setdefault("model", PRESETS["moe-2b"])
    return ExperimentConfig(**kw)


# --- metrics ---------------------------------------------------------------------------


@dataclass
class MetricsRow:
    round: int
    tokens: int
    total: float
    ce: float
    lb: float
    moe_z: float
    z: float
    eval_ce: float
    specialization_mi: float
    expert_util: list[int]
    bytes_up: int
    bytes_down: int
    sync_param_bytes: int
    merge_alpha: float
    merge_disp_sq: float
    wall_time: float

    CSV_FIELDS = (
        "round", "tokens", "total", "ce", "lb", "moe_z", "z", "eval_ce", "specialization_mi",
        "expert_util", "bytes_up", "bytes_down", "sync_param_bytes", "merge_alpha", "merge_disp_sq", "wall_time",
    )  # fmt: skip
    # columns that must be bit-identical across reruns of the same config
    DETERMINISTIC = tuple(f for f in CSV_FIELDS if f != "wall_time")

    def to_csv(self) -> dict:
        d = {k: getattr(self, k) for k in self.CSV_FIELDS}
        d["expert_util"] = " ".join(str(c) for c in self.expert_util)
        for k in ("total", "ce", "lb", "moe_z", "z", "eval_ce", "specialization_mi", "merge_alpha", "merge_disp_sq", "wall_time"):
            d[k] = repr(float(d[k]))
        return d

    @classmethod
    def from_csv(cls, d: Mapping[str, str]) -> MetricsRow:
        ints = ("round", "tokens", "bytes_up", "bytes_down", "sync_param_bytes")
        kw = {k: (int(d[k]) if k in ints else float(d[k])) for k in cls.CSV_FIELDS if k != "expert_util"}
        kw["expert_util"] = [int(x) for x in d["expert_util"].split()] if d["expert_util"] else []
        return cls(**kw)


def mutual_information(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in MI (nats) between two discrete label arrays."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    joint /= joint.sum()
    pa, pb = joint.sum(1, keepdims=True), joint.sum(0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])))


def evaluate(cfg: ModelConfig, theta: Mapping[str, np.ndarray], tokens: np.ndarray, sources: np.ndarray) -> tuple[float, float]:
    """Held-out cross-entropy and MI between source id and layer-0 top-1 expert."""
    model = MoEModel.from_params(cfg, theta, trainable=())
    ce = float(model.loss(tokens).ce.item())
    _, routings, _ = model.hidden_states(tokens[:, :-1].reshape(-1))
    per_token_source = np.repeat(sources, tokens.shape[1] - 1)
    return ce, mutual_information(per_token_source, routings[0].indices[:, 0])


# --- running -----------------------------------------------------------------------------


class PhasedTrainer(NodeTrainer):
    """NodeTrainer whose H and batch may change at a configured round."""

    def __init__(self, exp: ExperimentConfig, sampler: ShardSampler, **kw):
        super().__init__(exp.model, exp.H, exp.lr_schedule(), sampler, **kw)
        self.exp = exp
        self.sampler = sampler

    def run(self, node, t, theta, experts):
        e = self.exp
        mask = TrainMask.for_node(self.cfg, node, experts)
        batch = e.batch_at(t)
        res = local_round(
            self.cfg,
            theta,
            lambda h: self.sampler(node, t, h)[:batch],
            e.H_at(t),
            mask,
            self.lr,
            step0=e.steps_before(t),
            optimizer=self._opt if self.carry_state else None,
            inner=self.inner,
            adam=self.adam,
            track_drift=self.track_drift,
        )
        if self.carry_state:
            self._opt = res.optimizer
        return res, mask


@dataclass
class RunResult:
    config: ExperimentConfig
    rows: list[MetricsRow]
    theta: dict
    manifest: dict
    out_dir: Path | None = None
    server: Server | None = None
    workers: list = field(default_factory=list)

    @property
    def final_eval_ce(self) -> float:
        return self.rows[-1].eval_ce

    def eval_curve(self) -> list[float]:
        return [r.eval_ce for r in self.rows]


def metrics_root() -> Path:
    return Path(os.environ.get(METRICS_ENV, "metrics"))


def run_dir_for(cfg: ExperimentConfig, root: Path | None = None) -> Path:
    return (root or metrics_root()) / f"{cfg.name}-{cfg.paradigm}-{cfg.digest().hex()[:10]}"


def build_corpus(cfg: ExperimentConfig) -> SyntheticCorpus:
    return gen_corpus(cfg.model.vocab, cfg.seq_len, cfg.sources, cfg.sequences, cfg.data_seed, cfg.concentration, cfg.home_weight)


class _CsvSink:
    def __init__(self, path: Path | None):
        self.path = path
        if path is not None:
            with open(path, "w", newline="") as fh:
                csv.DictWriter(fh, MetricsRow.CSV_FIELDS).writeheader()

    def append(self, row: MetricsRow) -> None:
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.DictWriter(fh, MetricsRow.CSV_FIELDS).writerow(row.to_csv())


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    corpus: SyntheticCorpus | None = None,
    write: bool = True,
    track_drift: bool = False,
) -> RunResult:
    """Run one configuration end to end; ``write=False`` keeps everything in memory."""
    start = time.perf_counter()
    corpus = build_corpus(cfg) if corpus is None else corpus
    if corpus.vocab != cfg.model.vocab:
        raise ValueError(f"corpus vocab {corpus.vocab} != model vocab {cfg.model.vocab}")
    train_idx, held_idx = split_heldout(corpus, cfg.heldout, cfg.data_seed)
    shards = make_shards(corpus, cfg.N, cfg.shard, cfg.data_seed, train_idx)
    sampler = ShardSampler(corpus, shards, max(cfg.batch, cfg.phase2_batch or 0), cfg.seed)
    held = held_idx[: cfg.eval_sequences]
    eval_tokens, eval_sources = corpus.tokens[held], corpus.sources[held]

    out = None
    if write:
        out = Path(out_dir) if out_dir is not None else run_dir_for(cfg)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json())
    sink = _CsvSink(out / "metrics.csv" if out else None)
    rows: list[MetricsRow] = []
    theta0 = init_params(cfg.model, cfg.seed)
    adam = AdamWConfig(weight_decay=cfg.weight_decay)
    current = {"round": 0}

    def make_row(t, theta, losses, util, event, ledger=None):
        if t % cfg.eval_every == 0 or t == cfg.rounds:
            ev, mi = evaluate(cfg.model, theta, eval_tokens, eval_sources)
        else:
            ev, mi = float("nan"), float("nan")
        up = down = sync = 0
        if ledger is not None:
            sync = ledger.sync_cycle(t)["param_bytes"]
            for e in ledger.entries:
                if e.direction == "up" and e.round == t and e.kind.name in ("LOCAL_UPDATE", "ROUND_DONE"):
                    up += e.nbytes
                elif e.direction == "down" and e.kind.name == "GLOBAL_MODEL" and e.round == t - 1:
                    down += e.nbytes
                elif e.direction == "down" and e.kind.name == "MERGE_APPLIED" and e.round == t - 1:
                    down += e.nbytes
        row = MetricsRow(
            round=t,
            tokens=cfg.tokens_in_round(t),
            **{k: float(losses[k]) for k in ("total", "ce", "lb", "moe_z", "z")},
            eval_ce=ev,
            specialization_mi=mi,
            expert_util=[int(c) for c in util],
            bytes_up=up,
            bytes_down=down,
            sync_param_bytes=sync,
            merge_alpha=event.alpha if event is not None else 0.0,
            merge_disp_sq=float(sum(event.displacement_sq)) if event is not None else 0.0,
            wall_time=time.perf_counter() - start,
        )
        rows.append(row)
        sink.append(row)
        current["round"] = t

    server = None
    workers: list[Worker] = []
    status, error = "ok", None
    try:
        if cfg.paradigm == "centralized":
            theta = run_centralized(cfg, theta0, sampler, adam, make_row)
        else:
            server, workers = build_federation(cfg, theta0, sampler, adam, make_row, track_drift)
            pending: list = []

            def on_round(t, theta, metrics, event):
                pending.append((t, theta, metrics, event))

            server.on_round = on_round
            if cfg.transport == "socket":
                run_socket_local(server, workers)
            else:
                InProcessTransport(server, workers, seed=cfg.interleave_seed).run()
            # rows are built after the run so the ledger holds the full sync cycle of each round
            for t, th, metrics, event in pending:
                node_losses = [m["losses"] for m in metrics.values()]
                losses = {k: float(np.mean([l[k] for l in node_losses])) for k in node_losses[0]}
                util = np.sum([m["expert_counts"] for m in metrics.values()], axis=0)
                make_row(t, th, losses, util, event, server.ledger)
            theta = server.theta
    except Exception as exc:
        status, error = "failed", f"{type(exc).__name__}: {exc}"
        if out is not None:
            _write_manifest(out, cfg, rows, status, error, time.perf_counter() - start, server)
        raise ExperimentError(f"{cfg.paradigm} run {cfg.name!r} failed after round {current['round']}: {error}") from exc

    manifest = _write_manifest(out, cfg, rows, status, error, time.perf_counter() - start, server)
    if out is not None:
        save_checkpoint(out / "checkpoint.bin", theta, cfg.rounds)
    return RunResult(cfg, rows, theta, manifest, out, server, workers)


def run_centralized(cfg, theta0, sampler, adam, make_row) -> dict:
    """Plain AdamW loop over one shard; a "round" is one optimizer step."""
    mask = TrainMask.full(cfg.model)
    sched = cfg.lr_schedule()
    theta = dict(theta0)
    opt = None
    for t in range(1, cfg.rounds + 1):
        b = cfg.batch_at(t)
        res = local_round(cfg.model, theta, lambda h: sampler(0, t, h)[:b], 1, mask, sched, step0=t - 1, optimizer=opt, inner=cfg.inner, adam=adam)
        opt = res.optimizer
        theta = res.params
        make_row(t, theta, res.losses[0], res.expert_counts.sum(axis=0), None)
    return theta


def build_federation(cfg, theta0, sampler, adam, make_row=None, track_drift=False):
    M = cfg.model.experts_total
    partition = param_partition(M, cfg.N) if cfg.paradigm == "spes" else [list(range(M))] * cfg.N
    outer = OuterOptimizer(cfg.outer, cfg.outer_lr, cfg.outer_momentum) if cfg.paradigm == "diloco" else None
    spec = ServerSpec(cfg.model, cfg.N, cfg.rounds, partition, cfg.digest(), mode=cfg.paradigm, merge=cfg.merge, outer=outer)
    server = Server(spec, theta0)
    workers = [
        Worker(i, cfg.model, cfg.digest(), PhasedTrainer(cfg, sampler, inner=cfg.inner, adam=adam, carry_state=cfg.carry_state, track_drift=track_drift))
        for i in range(cfg.N)
    ]
    return server, workers


def _write_manifest(out, cfg, rows, status, error, wall, server) -> dict:
    cost = cost_report(cfg.model, cfg.N).to_dict() if cfg.model.experts_total >= cfg.N else None
    manifest = {
        "schema": SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest().hex(),
        "status": status,
        "error": error,
        "rounds_completed": len(rows),
        "token_budget": cfg.token_budget,
        "tokens_seen": sum(r.tokens for r in rows),
        "final": {k: getattr(rows[-1], k) for k in ("total", "ce", "eval_ce", "specialization_mi")} if rows else None,
        "cost": cost,
        "ledger": server.ledger.snapshot() if server is not None else None,
        "merge_events": [e.to_dict() for e in server.merge_events] if server is not None else [],
        "wall_time": wall,  # excluded from determinism comparisons
    }
    if server is not None:
        manifest["ledger"].pop("per_node_round")
    if out is not None:
        (Path(out) / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default))
    return manifest


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def read_rows(path: str | Path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        return [MetricsRow.from_csv(r) for r in csv.DictReader(fh)]


# --- ablations -------------------------------------------------------------------------------


ABLATION_KEYS = {"H", "N", "merge_alpha", "merge_K", "merge_T", "merge_interval", "paradigm", "lr", "seed"}


def run_ablation(
    base: ExperimentConfig,
    grid: Mapping[str, Sequence],
    root: str | Path | None = None,
    corpus: SyntheticCorpus | None = None,
    adjust: Callable[[ExperimentConfig], ExperimentConfig] | None = None,
    write: bool = True,
) -> list[dict]:
    """One run per grid cell over a shared corpus and seeds; failures are recorded, not raised.

    ``adjust`` may rewrite each cell's config (e.g. to hold the token budget fixed).
    """
    bad = set(grid) - ABLATION_KEYS
    if bad:
        raise ValueError(f"cannot ablate over {sorted(bad)}")
    keys = sorted(grid)
    corpus = build_corpus(base) if corpus is None else corpus
    root = Path(root) if root is not None else metrics_root() / f"ablation-{base.name}"
    summary = []
    for values in itertools.product(*(grid[k] for k in keys)):
        cell = dict(zip(keys, values))
        row = {**cell, "status": "ok", "error": "", "final_eval_ce": float("nan"), "final_ce": float("nan"), "rounds": 0, "tokens": 0}
        try:
            cfg = base.replace(**cell)
            if adjust is not None:
                cfg = adjust(cfg)
            tag = "-".join(f"{k}{v}" for k, v in cell.items())
            res = run_experiment(cfg.replace(name=f"{base.name}-{tag}"), root / tag if write else None, corpus, write=write)
            row.update(final_eval_ce=res.final_eval_ce, final_ce=res.rows[-1].ce, rounds=len(res.rows), tokens=sum(r.tokens for r in res.rows))
            row["result"] = res
        except Exception as exc:  # recorded per cell; the grid continues
            log.warning("ablation cell %s failed: %s", cell, exc)
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        summary.append(row)
    if write:
        root.mkdir(parents=True, exist_ok=True)
        cols = keys + ["status", "final_eval_ce", "final_ce", "rounds", "tokens", "error"]
        with open(root / "summary.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, cols, extrasaction="ignore")
            w.writeheader()
            w.writerows(summary)
    return summary


# --- reporting ---------------------------------------------------------------------------------


def emit_report(run_dir: str | Path) -> tuple[str, dict]:
    """Human-readable summary plus machine JSON for a run directory."""
    run_dir = Path(run_dir)
    report: dict = {"run_dir": str(run_dir), "problems": []}
    rows: list[MetricsRow] = []
    csv_path = run_dir / "metrics.csv"
    if csv_path.exists():
        try:
            rows = read_rows(csv_path)
        except (KeyError, ValueError, TypeError) as exc:
            report["problems"].append(f"corrupt metrics.csv: {type(exc).__name__}: {exc}")
    else:
        report["problems"].append("metrics.csv missing")
    manifest = None
    mpath = run_dir / "manifest.json"
    if mpath.exists():
        try:
            manifest = json.loads(mpath.read_text())
        except json.JSONDecodeError as exc:
            report["problems"].append(f"corrupt manifest.json: {exc}")
    report["rounds"] = len(rows)
    if not rows:
        report["status"] = "no rounds"
        text = f"{run_dir}: no rounds recorded"
        if report["problems"]:
            text += "\n  " + "\n  ".join(report["problems"])
        return text, report
    rounds = [r.round for r in rows]
    if rounds != list(range(rounds[0], rounds[0] + len(rounds))):
        report["problems"].append("round numbers are not consecutive")
    report["status"] = manifest.get("status", "unknown") if manifest else "unknown"
    report["totals"] = {k: sum(getattr(r, k) for r in rows) for k in ("tokens", "bytes_up", "bytes_down", "sync_param_bytes")}
    last = rows[-1]
    report["final"] = {k: getattr(last, k) for k in ("round", "total", "ce", "eval_ce", "specialization_mi")}
    evals = [r.eval_ce for r in rows if not math.isnan(r.eval_ce)]
    report["best_eval_ce"] = min(evals) if evals else None
    lines = [
        f"run {run_dir.name}: {len(rows)} rounds, status {report['status']}",
        f"  tokens {report['totals']['tokens']}, bytes up {report['totals']['bytes_up']}, down {report['totals']['bytes_down']}",
        f"  final train total {last.total:.4f} ce {last.ce:.4f}; eval ce {last.eval_ce:.4f}; MI(source, expert) {last.specialization_mi:.4f}",
    ]
    if manifest and manifest.get("cost"):
        cost = manifest["cost"]
        report["cost"] = {k: cost[k] for k in ("comm_ratio", "memory_ratio", "comm_spes", "comm_diloco", "memory_spes", "memory_diloco")}
        lines.append(f"  cost model: comm ratio SPES/DiLoCo {cost['comm_ratio']:.4f}, memory ratio {cost['memory_ratio']:.4f}")
        paradigm = manifest["config"]["paradigm"]
        if paradigm in ("spes", "diloco") and last.sync_param_bytes:
            formula = cost["comm_spes_exact"] if paradigm == "spes" else cost["comm_diloco"]
            measured = [r.sync_param_bytes / cost["bytes_per_param"] for r in rows]
            overhead = [(r.bytes_up + r.bytes_down - r.sync_param_bytes) / max(1, r.sync_param_bytes) for r in rows]
            ledger = {
                "formula_units_per_round": formula,
                "measured_units_per_round": measured[-1],
                "all_rounds_match_formula": all(m == formula for m in measured),
                "max_overhead_fraction": max(overhead),
                "measured_ratio_vs_diloco_formula": measured[-1] / cost["comm_diloco"],
            }
            report["ledger"] = ledger
            lines.append(
                f"  ledger: {measured[-1]:.0f} param units/round vs formula {formula}; "
                f"ratio vs DiLoCo {ledger['measured_ratio_vs_diloco_formula']:.4f}; overhead <= {ledger['max_overhead_fraction']:.2e}"
            )
    theory = run_dir / "theory.json"
    if theory.exists():
        report["theory"] = json.loads(theory.read_text())
        lines.append("  theory checks: " + ", ".join(f"{k}={'ok' if v.get('holds', v.get('ok')) else 'VIOLATED'}" for k, v in report["theory"].items() if isinstance(v, dict)))
    if report["problems"]:
        lines.append("  problems: " + "; ".join(report["problems"]))
    text = "\n".join(lines)
    (run_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True, default=_json_default))
    (run_dir / "report.txt").write_text(text + "\n")
    return text, report
