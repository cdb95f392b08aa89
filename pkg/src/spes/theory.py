"""Empirical checks of the convergence analysis on convex toy problems.

Parameters are a flat float64 vector split into a shared block psi and M
expert blocks phi_j. Node i owns a subset of experts; local steps are masked
SGD, synchronisation averages psi and takes each phi_j from its owner, and
an optional merge pulls experts toward their peers.

Estimated constants (all from sampled evaluations, so L is a lower bound):

    L      max ||grad f_i(x) - grad f_i(y)|| / ||x - y||
    G      max stochastic gradient norm
    sigma  max minibatch-gradient variance, shared and expert blocks
    zeta   max_j ||grad_phi_j f_owner(j) - grad_phi_j F||
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .merging import MergeSchedule, merge_vectors, select_peers, similarity_matrix, triangle_bound
from .model import ModelConfig, Params, expert_block_name, is_expert_block, loss_and_grads, param_partition


class BlockProblem:
    """F(theta) = mean_i f_i(theta), f_i = mean over node i's finite shard."""

    def __init__(self, shared_dim: int, expert_dim: int, experts: int, partition: list[list[int]]):
        self.p, self.q, self.M = shared_dim, expert_dim, experts
        self.partition = partition
        self.N = len(partition)
        self.D = shared_dim + experts * expert_dim
        self.owner = {j: i for i, part in enumerate(partition) for j in part}

    # slices ---------------------------------------------------------------
    @property
    def shared(self) -> slice:
        return slice(0, self.p)

    def expert(self, j: int) -> slice:
        s = self.p + j * self.q
        return slice(s, s + self.q)

    def mask(self, i: int) -> np.ndarray:
        m = np.zeros(self.D, dtype=bool)
        m[self.shared] = True
        for j in self.partition[i]:
            m[self.expert(j)] = True
        return m

    # to be provided ---------------------------------------------------------
    def shard_size(self, i: int) -> int:
        raise NotImplementedError

    def loss(self, i: int, theta: np.ndarray, idx=None) -> float:
        raise NotImplementedError

    def grad(self, i: int, theta: np.ndarray, idx=None) -> np.ndarray:
        raise NotImplementedError

    def resplit(self, seed: int) -> BlockProblem:
        """Same pooled data, shuffled into IID shards of the same sizes."""
        raise NotImplementedError

    # derived -----------------------------------------------------------------
    def F(self, theta: np.ndarray) -> float:
        return float(np.mean([self.loss(i, theta) for i in range(self.N)]))

    def gradF(self, theta: np.ndarray) -> np.ndarray:
        return np.mean([self.grad(i, theta) for i in range(self.N)], axis=0)

    def sample(self, i: int, batch: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, self.shard_size(i), batch)

    def F_inf(self, x0: np.ndarray | None = None) -> float:
        x0 = np.zeros(self.D) if x0 is None else x0
        res = minimize(self.F, x0, jac=self.gradF, method="L-BFGS-B", options={"gtol": 1e-12, "ftol": 1e-15, "maxiter": 10000})
        return float(res.fun)


class QuadraticProblem(BlockProblem):
    """l(theta; xi) = 1/2 sum_d a_d (theta_d - xi_d)^2 with per-node sample clouds."""

    def __init__(self, data: Sequence[np.ndarray], a: np.ndarray, shared_dim, expert_dim, experts, partition):
        super().__init__(shared_dim, expert_dim, experts, partition)
        self.data = [np.asarray(x, dtype=np.float64) for x in data]
        self.a = np.asarray(a, dtype=np.float64)
        self.means = [x.mean(axis=0) for x in self.data]

    def shard_size(self, i):
        return len(self.data[i])

    def loss(self, i, theta, idx=None):
        x = self.data[i] if idx is None else self.data[i][idx]
        return float(0.5 * np.mean(np.sum(self.a * (theta - x) ** 2, axis=1)))

    def grad(self, i, theta, idx=None):
        mu = self.means[i] if idx is None else self.data[i][idx].mean(axis=0)
        return self.a * (theta - mu)

    def resplit(self, seed):
        pool = np.concatenate(self.data)
        perm = np.random.default_rng(seed).permutation(len(pool))
        cuts = np.cumsum([len(x) for x in self.data])[:-1]
        parts = np.split(pool[perm], cuts)
        return QuadraticProblem(parts, self.a, self.p, self.q, self.M, self.partition)

    @classmethod
    def make(cls, N=2, M=4, shared_dim=3, expert_dim=2, samples=64, spread=1.0, hetero=1.0, seed=0, a=None):
        rng = np.random.default_rng(seed)
        part = param_partition(M, N)
        D = shared_dim + M * expert_dim
        a = rng.uniform(0.3, 1.0, D) if a is None else np.broadcast_to(np.asarray(a, dtype=np.float64), (D,)).copy()
        data = [rng.normal(hetero * rng.standard_normal(D), spread, (samples, D)) for _ in range(N)]
        return cls(data, a, shared_dim, expert_dim, M, part)


class LogisticProblem(BlockProblem):
    """Ridge logistic regression; each sample touches psi and the expert of its group.

    z = psi . u + phi_g . v,  l = log(1 + exp(-y z)) + lam/2 ||theta||^2
    """

    def __init__(self, X: Sequence[np.ndarray], y: Sequence[np.ndarray], lam, shared_dim, expert_dim, experts, partition):
        super().__init__(shared_dim, expert_dim, experts, partition)
        self.X = [np.asarray(x, dtype=np.float64) for x in X]
        self.y = [np.asarray(v, dtype=np.float64) for v in y]
        self.lam = lam

    def shard_size(self, i):
        return len(self.y[i])

    def loss(self, i, theta, idx=None):
        X, y = (self.X[i], self.y[i]) if idx is None else (self.X[i][idx], self.y[i][idx])
        return float(np.mean(np.logaddexp(0.0, -y * (X @ theta))) + 0.5 * self.lam * theta @ theta)

    def grad(self, i, theta, idx=None):
        X, y = (self.X[i], self.y[i]) if idx is None else (self.X[i][idx], self.y[i][idx])
        s = -y / (1.0 + np.exp(y * (X @ theta)))
        return X.T @ s / len(y) + self.lam * theta

    def resplit(self, seed):
        Xp, yp = np.concatenate(self.X), np.concatenate(self.y)
        perm = np.random.default_rng(seed).permutation(len(yp))
        cuts = np.cumsum([len(v) for v in self.y])[:-1]
        return LogisticProblem(np.split(Xp[perm], cuts), np.split(yp[perm], cuts), self.lam, self.p, self.q, self.M, self.partition)

    @classmethod
    def make(cls, N=2, M=4, shared_dim=3, expert_dim=3, samples=200, lam=0.05, label_skew=True, seed=0):
        """Node i favours its own experts' groups and, with ``label_skew``, its own label teacher."""
        rng = np.random.default_rng(seed)
        part = param_partition(M, N)
        base = rng.standard_normal(shared_dim + M * expert_dim)
        X, Y = [], []
        for i in range(N):
            weights = np.full(M, 1.0)
            weights[part[i]] = 4.0
            groups = rng.choice(M, samples, p=weights / weights.sum())
            Xi = np.zeros((samples, shared_dim + M * expert_dim))
            Xi[:, :shared_dim] = rng.standard_normal((samples, shared_dim))
            for s, g in enumerate(groups):
                o = shared_dim + g * expert_dim
                Xi[s, o : o + expert_dim] = rng.standard_normal(expert_dim)
            teacher = base + (rng.standard_normal(base.size) * 2.0 if label_skew else 0.0)
            p = 1.0 / (1.0 + np.exp(-(Xi @ teacher)))
            Y.append(np.where(rng.random(samples) < p, 1.0, -1.0))
            X.append(Xi)
        return cls(X, Y, lam, shared_dim, expert_dim, M, part)

    @classmethod
    def disjoint_labels(cls, M=4, shared_dim=3, expert_dim=3, samples=200, shift=1.0, lam=0.05, seed=0):
        """Two nodes with the same feature law x ~ N(mu, I); node 0 holds only y=+1, node 1 only y=-1."""
        rng = np.random.default_rng(seed)
        D = shared_dim + M * expert_dim
        mu = shift * rng.standard_normal(D) / np.sqrt(D) * np.sqrt(expert_dim + shared_dim)
        X, Y = [], []
        for label in (1.0, -1.0):
            groups = rng.integers(0, M, samples)
            keep = np.zeros((samples, D), dtype=bool)
            keep[:, :shared_dim] = True
            for s, g in enumerate(groups):
                keep[s, shared_dim + g * expert_dim : shared_dim + (g + 1) * expert_dim] = True
            X.append(np.where(keep, mu + rng.standard_normal((samples, D)), 0.0))
            Y.append(np.full(samples, label))
        return cls(X, Y, lam, shared_dim, expert_dim, M, param_partition(M, 2))


def identical_shards(problem: BlockProblem) -> BlockProblem:
    """Every node gets node 0's data (zero heterogeneity)."""
    if isinstance(problem, QuadraticProblem):
        return QuadraticProblem([problem.data[0]] * problem.N, problem.a, problem.p, problem.q, problem.M, problem.partition)
    if isinstance(problem, LogisticProblem):
        return LogisticProblem([problem.X[0]] * problem.N, [problem.y[0]] * problem.N, problem.lam, problem.p, problem.q, problem.M, problem.partition)
    raise TypeError(type(problem))


# --- constants ----------------------------------------------------------------------


@dataclass
class TheoryProbe:
    L: float
    G: float
    sigma_psi2: float
    sigma_phi2: float
    zeta: float
    samples: int

    def to_dict(self) -> dict:
        return asdict(self)


def heterogeneity(problem: BlockProblem, points: Sequence[np.ndarray]) -> float:
    z = 0.0
    for x in points:
        gF = problem.gradF(x)
        grads = [problem.grad(i, x) for i in range(problem.N)]
        for j in range(problem.M):
            s = problem.expert(j)
            z = max(z, float(np.linalg.norm(grads[problem.owner[j]][s] - gF[s])))
    return z


def estimate_constants(problem: BlockProblem, points: Sequence[np.ndarray], samples: int = 30, batch: int = 4, seed: int = 0) -> TheoryProbe:
    if samples < 30:
        raise ValueError("need at least 30 samples per estimate")
    rng = np.random.default_rng(seed)
    points = [np.asarray(p, dtype=np.float64) for p in points]
    for x in points:
        for i in range(problem.N):
            if not np.isfinite(problem.grad(i, x)).all():
                raise FloatingPointError("non-finite gradient at a probe point")
    L = 0.0
    for _ in range(samples):
        x = points[rng.integers(len(points))]
        y = x + rng.standard_normal(problem.D) * rng.choice([1e-2, 1e-1, 1.0])
        for i in range(problem.N):
            den = np.linalg.norm(x - y)
            L = max(L, float(np.linalg.norm(problem.grad(i, x) - problem.grad(i, y)) / den))
    G = sp = sf = 0.0
    for x in points:
        for i in range(problem.N):
            full = problem.grad(i, x)
            owned = [problem.expert(j) for j in problem.partition[i]]
            acc_p = acc_f = 0.0
            for _ in range(samples):
                g = problem.grad(i, x, problem.sample(i, batch, rng))
                if not np.isfinite(g).all():
                    raise FloatingPointError("non-finite stochastic gradient")
                G = max(G, float(np.linalg.norm(g)))
                d = g - full
                acc_p += float(d[problem.shared] @ d[problem.shared])
                acc_f += sum(float(d[s] @ d[s]) for s in owned)
            sp = max(sp, acc_p / samples)
            sf = max(sf, acc_f / samples)
    return TheoryProbe(L, G, sp, sf, heterogeneity(problem, points), samples)


def zeta_noise_floor(problem: BlockProblem, points: Sequence[np.ndarray], seeds: Sequence[int] = range(5)) -> float:
    """Heterogeneity measured after reshuffling the pooled data into IID shards."""
    return max(heterogeneity(problem.resplit(s), points) for s in seeds)


# --- bound ---------------------------------------------------------------------------


@dataclass
class Bound:
    terms: dict
    total: float
    eta_L: float
    gamma_L: float

    @property
    def eta_condition(self) -> bool:
        return self.eta_L <= 0.25

    @property
    def gamma_condition(self) -> bool:
        return self.gamma_L <= 0.25

    def to_dict(self) -> dict:
        return {**asdict(self), "eta_condition": self.eta_condition, "gamma_condition": self.gamma_condition}


def convergence_rhs(probe: TheoryProbe, eta: float, H: int, N: int, T: int, gap: float, alphas: Sequence[float] = (), B_merge: float = 0.0) -> Bound:
    """Right-hand side of the average squared-gradient bound, term by term.

    ``gap`` is F(theta_0) - F_inf; ``alphas`` are the merge strengths for t < T_merge.
    """
    L, G = probe.L, probe.G
    terms = {
        "init": 4.0 * gap / (eta * H * T),
        "variance": 6.0 * eta * L * (probe.sigma_psi2 / N + probe.sigma_phi2),
        "drift": 12.0 * L**2 * eta**2 * H**2 * G**2,
        "heterogeneity": 12.0 * probe.zeta**2,
        "merge": L * B_merge**2 / (eta * H * T) * float(sum(a * a for a in alphas)),
    }
    return Bound(terms, sum(terms.values()), eta * L, eta * H * L)


# --- simulation ------------------------------------------------------------------------


@dataclass
class SimResult:
    grad_sq: list[float] = field(default_factory=list)
    F: list[float] = field(default_factory=list)
    G_meas: float = 0.0
    drift_violations: int = 0
    drift_checks: int = 0
    drift_max_ratio: float = 0.0
    premerge_err: float = 0.0
    merges: list[dict] = field(default_factory=list)
    points: list[np.ndarray] = field(default_factory=list)
    theta: np.ndarray | None = None

    @property
    def avg_grad_sq(self) -> float:
        return float(np.mean(self.grad_sq))


def _experts_as_dicts(problem: BlockProblem, theta: np.ndarray):
    return [{"w": theta[problem.expert(j)]} for j in range(problem.M)]


def simulate_spes(
    problem: BlockProblem,
    eta: float,
    H: int,
    T: int,
    batch: int = 4,
    seed: int = 0,
    merge: MergeSchedule | None = None,
    theta0: np.ndarray | None = None,
    keep_every: int = 10,
) -> SimResult:
    """SPES with masked inner SGD on a block problem; records every quantity the checks need."""
    rng = np.random.default_rng(seed)
    theta = np.zeros(problem.D) if theta0 is None else np.array(theta0, dtype=np.float64)
    masks = [problem.mask(i) for i in range(problem.N)]
    res = SimResult()
    G_run = 0.0  # running max of the masked update direction norm
    B_run = 0.0  # running max of sqrt(sum_j ((1/K) sum_k ||phi_k - phi_j||)^2)
    for t in range(T):
        gF = problem.gradF(theta)
        res.grad_sq.append(float(gF @ gF))
        res.F.append(problem.F(theta))
        if t % keep_every == 0:
            res.points.append(theta.copy())
        locals_, ghat = [], np.zeros(problem.D)
        for i in range(problem.N):
            th = theta.copy()
            for h in range(1, H + 1):
                g = problem.grad(i, th, problem.sample(i, batch, rng))
                res.G_meas = max(res.G_meas, float(np.linalg.norm(g)))
                u = np.where(masks[i], g, 0.0)
                G_run = max(G_run, float(np.linalg.norm(u)))
                th = th - eta * u
                drift = float(np.sum((th - theta) ** 2))
                cap = eta**2 * h**2 * G_run**2
                res.drift_checks += 1
                if drift > cap * (1 + 1e-9) + 1e-300:
                    res.drift_violations += 1
                if cap > 0:
                    res.drift_max_ratio = max(res.drift_max_ratio, drift / cap)
                ghat[problem.shared] += u[problem.shared] / (H * problem.N)
                for j in problem.partition[i]:
                    s = problem.expert(j)
                    ghat[s] += u[s] / H
            locals_.append(th)
            if t % keep_every == 0 and i == 0:
                res.points.append(th.copy())
        pre = theta.copy()
        pre[problem.shared] = np.mean([l[problem.shared] for l in locals_], axis=0)
        for j in range(problem.M):
            s = problem.expert(j)
            pre[s] = locals_[problem.owner[j]][s]
        res.premerge_err = max(res.premerge_err, float(np.max(np.abs(pre - (theta - eta * H * ghat)))))
        theta = pre
        if merge is not None and merge.active(t):
            alpha = merge.alpha_at(t)
            phis = _experts_as_dicts(problem, theta)
            A = similarity_matrix([p["w"] for p in phis])
            K = min(merge.K, problem.M - 1)
            peers = [select_peers(A, j, K) for j in range(problem.M)]
            # B_meas comes from the pre-merge geometry, not from the displacement itself
            B_run = max(B_run, math.sqrt(triangle_bound(phis, peers)))
            merged, disp = merge_vectors(phis, peers, alpha)
            for j, p in enumerate(merged):
                theta[problem.expert(j)] = p["w"]
            res.merges.append({"t": t, "alpha": alpha, "disp_sq": disp, "B_meas": B_run})
    res.theta = theta
    return res


@dataclass
class TheoryCheck:
    name: str
    measured: float
    bound: Bound
    probe: TheoryProbe
    gap: float

    @property
    def holds(self) -> bool:
        return self.measured <= self.bound.total

    def to_dict(self) -> dict:
        return {"name": self.name, "measured": self.measured, "bound": self.bound.to_dict(), "probe": self.probe.to_dict(), "gap": self.gap, "holds": self.holds}


def check_bound(name: str, problem: BlockProblem, eta: float, H: int, T: int, batch: int = 4, seed: int = 0, merge: MergeSchedule | None = None, samples: int = 30) -> tuple[TheoryCheck, SimResult]:
    """Simulate, estimate the constants along the trajectory, and compare with the bound."""
    sim = simulate_spes(problem, eta, H, T, batch, seed, merge)
    probe = estimate_constants(problem, sim.points, samples=samples, batch=batch, seed=seed + 1)
    probe.G = max(probe.G, sim.G_meas)
    gap = sim.F[0] - problem.F_inf(sim.theta)
    alphas, B = (), 0.0
    if merge is not None:
        alphas = [merge.alpha_at(t) for t in range(min(merge.T_merge, T)) if merge.active(t)]
        B = max((m["B_meas"] for m in sim.merges), default=0.0)
    bound = convergence_rhs(probe, eta, H, problem.N, T, gap, alphas, B)
    return TheoryCheck(name, sim.avg_grad_sq, bound, probe, gap), sim


# --- variance reduction on the MoE model ---------------------------------------------


def variance_reduction_check(
    cfg: ModelConfig,
    params: Params,
    pool: np.ndarray,
    N_values: Sequence[int] = (1, 2, 4, 8),
    reps: int = 400,
    seed: int = 0,
) -> list[dict]:
    """Variance of the N-node shared-gradient estimator (one sequence per node) versus N.

    Nodes draw IID sequences from the same pool. The shared estimator averages
    the N node gradients; an expert block is estimated by its single owner, so
    its variance should not shrink.
    """
    if reps < 200:
        raise ValueError("need at least 200 repetitions")
    per_seq = []
    for s in pool:
        _, g = loss_and_grads(cfg, params, s[None, :])
        per_seq.append(g)
    names = sorted(per_seq[0])
    shared = [n for n in names if not is_expert_block(n)]
    experts = [n for n in names if is_expert_block(n)]
    flat_s = np.stack([np.concatenate([g[n].ravel() for n in shared]).astype(np.float64) for g in per_seq])
    flat_e = np.stack([np.concatenate([g[n].ravel() for n in experts]).astype(np.float64) for g in per_seq])
    rng = np.random.default_rng(seed)
    rows = []
    for N in N_values:
        draws = rng.integers(0, len(pool), (reps, N))
        est_s = flat_s[draws].mean(axis=1)
        est_e = flat_e[draws[:, 0]]
        var_s = float(np.sum(np.var(est_s, axis=0, ddof=1)))
        var_e = float(np.sum(np.var(est_e, axis=0, ddof=1)))
        rows.append({"N": N, "var_shared": var_s, "var_expert": var_e})
    v1s, v1e = rows[0]["var_shared"], rows[0]["var_expert"]
    for r in rows:
        r["shared_times_N_over_v1"] = r["var_shared"] * r["N"] / v1s
        r["expert_over_v1"] = r["var_expert"] / v1e
    return rows


def drift_audit(records: Sequence, slack: float = 1e-9) -> dict:
    """Check ||theta_i^(t,h) - theta^(t)||^2 <= eta_h^2 h^2 G_meas^2 over a worker's round records.

    ``records`` need drift_sq, update_norms and lrs per local step (track_drift
    on the trainer). G_meas is the running max update-direction norm over the
    whole run; eta_h is the largest step size used so far in the round.
    """
    G = 0.0
    checks = violations = 0
    worst = 0.0
    for rec in records:
        eta = 0.0
        for h, (d, u, lr) in enumerate(zip(rec.drift_sq, rec.update_norms, rec.lrs), start=1):
            G = max(G, u)
            eta = max(eta, lr)
            cap = eta**2 * h**2 * G**2
            checks += 1
            if d > cap * (1 + slack):
                violations += 1
            if cap > 0:
                worst = max(worst, d / cap)
    return {"checks": checks, "violations": violations, "max_ratio": worst, "G_meas": G}


# --- suite -------------------------------------------------------------------------------


def run_theory_suite(seed: int = 0, rounds: int = 200) -> dict:
    """All theory checks with inner SGD; each entry carries ``ok``."""
    from .experiment import ExperimentConfig, build_corpus, run_experiment

    out: dict = {}
    tiny = ModelConfig(vocab=8, hidden=4, intermediate=6, layers=1, experts_total=4, experts_active=2, init_std=0.3)
    # (a) drift on the MoE model through the full protocol
    cfg = ExperimentConfig(
        name="theory-drift", model=tiny, N=2, H=4, rounds=rounds, lr=0.05, schedule="constant", inner="sgd",
        weight_decay=0.0, batch=2, seq_len=6, sources=2, sequences=200, eval_sequences=8, eval_every=rounds, seed=seed,
    )  # fmt: skip
    run = run_experiment(cfg, write=False, track_drift=True)
    audits = [drift_audit(w.records) for w in run.workers]
    out["drift"] = {
        "rounds": rounds,
        "checks": sum(a["checks"] for a in audits),
        "violations": sum(a["violations"] for a in audits),
        "max_ratio": max(a["max_ratio"] for a in audits),
        "ok": all(a["violations"] == 0 for a in audits) and all(a["checks"] == rounds * cfg.H for a in audits),
    }
    # (b) variance reduction of the shared-gradient estimator
    corpus = build_corpus(cfg)
    rows = variance_reduction_check(tiny, run.theta, corpus.tokens[:64], reps=2000, seed=seed)
    out["variance"] = {
        "rows": rows,
        "ok": all(0.5 <= r["shared_times_N_over_v1"] <= 2.0 for r in rows) and all(r["expert_over_v1"] > 0.8 for r in rows),
    }
    # (c) bound on the convex toy suite, (d) merge displacement
    merge = MergeSchedule(T_merge=40, alpha0=0.1, K=2)
    toys = {
        "quadratic": (QuadraticProblem.make(N=2, M=4, seed=seed + 3), 0.05, 4),
        "logistic": (LogisticProblem.make(N=2, M=4, seed=seed + 3), 0.1, 8),
    }
    merges_ok = True
    out["bound"] = {}
    for name, (prob, eta, batch) in toys.items():
        check, sim = check_bound(name, prob, eta=eta, H=5, T=rounds, batch=batch, seed=seed, merge=merge)
        d = check.to_dict()
        d["premerge_err"] = sim.premerge_err
        d["ok"] = check.holds and sim.premerge_err < 1e-6 and sim.drift_violations == 0
        out["bound"][name] = d
        merges_ok &= all(m["disp_sq"] <= m["alpha"] ** 2 * m["B_meas"] ** 2 * (1 + 1e-9) for m in sim.merges)
    out["bound"]["ok"] = all(v["ok"] for k, v in out["bound"].items() if k != "ok")
    moe = run_experiment(cfg.replace(name="theory-merge", rounds=12, merge_T=10, merge_alpha=0.3, merge_K=2), write=False)
    ev = moe.server.merge_events
    moe_ok = all(d <= e.alpha**2 * tri * (1 + 1e-9) for e in ev for d, tri in zip(e.displacement_sq, e.triangle_sq))
    out["merge"] = {"toy_events": sum(1 for _ in toys), "moe_events": len(ev), "ok": merges_ok and moe_ok and len(ev) == 10}
    out["ok"] = all(out[k]["ok"] for k in ("drift", "variance", "bound", "merge"))
    return out
