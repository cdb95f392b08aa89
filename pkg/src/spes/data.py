"""Synthetic token corpus: a mixture of first-order Markov sources.

Each sequence is drawn from one source (its latent id is kept); the first
token comes from that source's stationary distribution, so unigram counts of
a single source converge to it. Shards for N nodes are either a random split
(IID) or contiguous blocks of source-sorted sequences (heterogeneous).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SHARD_POLICIES = ("random", "by_source")


def stationary(P: np.ndarray) -> np.ndarray:
    """Left Perron eigenvector of a row-stochastic matrix, normalised to sum 1."""
    w, v = np.linalg.eig(P.T)
    pi = np.real(v[:, np.argmin(np.abs(w - 1.0))])
    return pi / pi.sum()


@dataclass
class SyntheticCorpus:
    tokens: np.ndarray  # (sequences, S) int64
    sources: np.ndarray  # (sequences,) latent source id
    transitions: np.ndarray  # (C, V, V)
    seed: int

    @property
    def vocab(self) -> int:
        return self.transitions.shape[1]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]

    @property
    def n_sources(self) -> int:
        return self.transitions.shape[0]

    def __len__(self) -> int:
        return len(self.tokens)

    def stationary(self, c: int) -> np.ndarray:
        return stationary(self.transitions[c])

    def entropy_rate(self, c: int) -> float:
        """Per-token entropy (nats) of source c: a floor for achievable next-token loss."""
        P = self.transitions[c]
        with np.errstate(divide="ignore", invalid="ignore"):
            h = -np.nansum(P * np.log(P), axis=1)
        return float(self.stationary(c) @ h)

    def save(self, path) -> None:
        np.savez_compressed(path, tokens=self.tokens, sources=self.sources, transitions=self.transitions, seed=self.seed)

    @classmethod
    def load(cls, path) -> SyntheticCorpus:
        with np.load(path) as z:
            return cls(z["tokens"], z["sources"], z["transitions"], int(z["seed"]))


def gen_corpus(V: int, S: int, C: int, sequences: int, seed: int = 0, concentration: float = 0.2, home_weight: float = 0.0) -> SyntheticCorpus:
    """Sample C Markov sources (Dirichlet rows) and ``sequences`` sequences of length S.

    Smaller ``concentration`` gives peakier, more distinct transition rows.
    ``home_weight`` > 0 tilts source c's Dirichlet prior toward its own band of
    about V/C tokens, so tokens carry information about their source.
    """
    if not V >= C >= 1:
        raise ValueError(f"need V >= C >= 1, got V={V}, C={C}")
    if S < 2 or sequences < 1:
        raise ValueError("need S >= 2 and at least one sequence")
    rng = np.random.default_rng(seed)
    band = (np.arange(V)[None, :] * C // V) == np.arange(C)[:, None]  # C x V home bands
    prior = concentration * (1.0 + home_weight * band)
    P = np.stack([rng.dirichlet(prior[c], size=V) for c in range(C)])
    # keep every row strictly positive so each chain is irreducible and aperiodic
    P = (P + 1e-6) / (P + 1e-6).sum(axis=-1, keepdims=True)
    sources = rng.integers(0, C, sequences)
    cum = np.cumsum(P, axis=-1)
    cum[..., -1] = 1.0
    start = np.cumsum(np.stack([stationary(P[c]) for c in range(C)]), axis=-1)
    start[:, -1] = 1.0
    tokens = np.empty((sequences, S), dtype=np.int64)
    u = rng.random((sequences, S))
    tokens[:, 0] = _inverse_cdf(start[sources], u[:, 0])
    for s in range(1, S):
        tokens[:, s] = _inverse_cdf(cum[sources, tokens[:, s - 1]], u[:, s])
    return SyntheticCorpus(tokens, sources, P, seed)


def _inverse_cdf(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.minimum((cdf_rows < u[:, None]).sum(axis=1), cdf_rows.shape[1] - 1)


def split_heldout(corpus: SyntheticCorpus, fraction: float, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint (train, eval) index arrays."""
    n = len(corpus)
    k = int(round(fraction * n))
    if not 0 <= k < n:
        raise ValueError(f"held-out fraction {fraction} leaves no training data")
    perm = np.random.default_rng([seed, 7]).permutation(n)
    return np.sort(perm[k:]), np.sort(perm[:k])


def make_shards(corpus: SyntheticCorpus, N: int, policy: str = "random", seed: int = 0, indices: np.ndarray | None = None) -> list[np.ndarray]:
    """Split ``indices`` (default: all sequences) into N disjoint, covering shards."""
    if policy not in SHARD_POLICIES:
        raise ValueError(f"shard policy must be one of {SHARD_POLICIES}")
    idx = np.arange(len(corpus)) if indices is None else np.asarray(indices)
    if N < 1 or len(idx) < N:
        raise ValueError(f"cannot split {len(idx)} sequences over {N} nodes")
    if policy == "random":
        order = np.random.default_rng([seed, 11]).permutation(idx)
    else:
        order = idx[np.argsort(corpus.sources[idx], kind="stable")]
    return [np.sort(s) for s in np.array_split(order, N)]


class ShardSampler:
    """Pure (node, round, step) -> batch mapping; independent of execution order."""

    def __init__(self, corpus: SyntheticCorpus, shards: list[np.ndarray], batch: int, seed: int = 0):
        self.corpus = corpus
        self.shards = shards
        self.batch = batch
        self.seed = seed

    def indices(self, node: int, rnd: int, h: int) -> np.ndarray:
        shard = self.shards[node]
        return shard[np.random.default_rng([self.seed, node, rnd, h]).integers(0, len(shard), self.batch)]

    def __call__(self, node: int, rnd: int, h: int) -> np.ndarray:
        return self.corpus.tokens[self.indices(node, rnd, h)]
