"""Seeded desk-scale directional experiments shared by scripts/ and the acceptance tests.

All runs use a mixture of 8 Markov sources whose tokens lean toward
source-specific vocabulary bands (heterogeneous corpus), randomly split over
nodes, and the same corpus/seed for every arm of a comparison.
"""

from __future__ import annotations

import numpy as np

from .experiment import ExperimentConfig, build_corpus, run_experiment

BASE = ExperimentConfig(
    name="desk",
    N=4,
    H=10,
    rounds=60,
    lr=1e-2,
    sources=8,
    concentration=0.2,
    home_weight=20.0,
    shard="random",
    eval_sequences=200,
    eval_every=1,
)


def _summary(res) -> dict:
    return {"final_eval_ce": res.final_eval_ce, "eval_curve": res.eval_curve(), "tokens": sum(r.tokens for r in res.rows), "wall_time": res.rows[-1].wall_time}


def spes_vs_diloco(base: ExperimentConfig = BASE, tolerance: float = 0.10) -> dict:
    """SPES final held-out loss within ``tolerance`` (relative) of DiLoCo at equal tokens."""
    corpus = build_corpus(base)
    spes = run_experiment(base.replace(name="cmp-spes", paradigm="spes"), corpus=corpus, write=False)
    dil = run_experiment(base.replace(name="cmp-diloco", paradigm="diloco"), corpus=corpus, write=False)
    gap = abs(spes.final_eval_ce - dil.final_eval_ce) / dil.final_eval_ce
    return {
        "spes": _summary(spes),
        "diloco": _summary(dil),
        "relative_gap": gap,
        "tolerance": tolerance,
        "ok": gap <= tolerance and _summary(spes)["tokens"] == _summary(dil)["tokens"],
    }


def merging_warmup(base: ExperimentConfig = BASE, T_merge: int = 30, alpha: float = 0.1, K: int = 4, reference_round: int = 50) -> dict:
    """Merging reaches the disabled run's round-50 loss by round 50 and does not worsen the final loss."""
    corpus = build_corpus(base)
    off = run_experiment(base.replace(name="merge-off"), corpus=corpus, write=False)
    on = run_experiment(base.replace(name="merge-on", merge_T=T_merge, merge_alpha=alpha, merge_K=K), corpus=corpus, write=False)
    target = off.eval_curve()[reference_round - 1]
    curve = np.array(on.eval_curve())
    hit = np.nonzero(curve <= target)[0]
    first = int(hit[0]) + 1 if hit.size else None
    return {
        "off": _summary(off),
        "on": _summary(on),
        "target": target,
        "first_round_reaching_target": first,
        "ok": first is not None and first <= reference_round and on.final_eval_ce <= off.final_eval_ce,
    }


def sync_steps(base: ExperimentConfig = BASE, Hs=(50, 200, 400), local_steps: int = 800) -> dict:
    """Final loss non-decreasing in H at a fixed number of local steps (equal tokens)."""
    corpus = build_corpus(base)
    finals, runs = [], {}
    for H in Hs:
        if local_steps % H:
            raise ValueError(f"{local_steps} local steps are not a multiple of H={H}")
        res = run_experiment(base.replace(name=f"sync-H{H}", H=H, rounds=local_steps // H, eval_every=local_steps), corpus=corpus, write=False)
        finals.append(res.final_eval_ce)
        runs[H] = _summary(res)
    return {"final_eval_ce": dict(zip(Hs, finals)), "runs": runs, "ok": all(a <= b for a, b in zip(finals, finals[1:]))}


def specialization_trend(base: ExperimentConfig = BASE, rounds: int = 30, windows: int = 3) -> dict:
    """MI(source, layer-0 top-1 expert) rises across ``windows`` consecutive checkpoint windows.

    Single-round MI jumps with top-1 routing flips, so each checkpoint is the
    mean over a window of rounds.
    """
    if rounds % windows:
        raise ValueError(f"{rounds} rounds do not split into {windows} windows")
    res = run_experiment(base.replace(name="specialization", rounds=rounds, eval_every=1), write=False)
    mi = np.array([r.specialization_mi for r in res.rows])
    means = [float(w.mean()) for w in np.split(mi, windows)]
    return {"mi": mi.tolist(), "window_means": means, "ok": all(a < b for a, b in zip(means, means[1:]))}
