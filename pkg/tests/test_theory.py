import numpy as np
import pytest

from spes.merging import MergeSchedule
from spes.model import ModelConfig, init_params, param_partition
from spes.theory import (
    LogisticProblem,
    QuadraticProblem,
    TheoryProbe,
    check_bound,
    drift_audit,
    estimate_constants,
    heterogeneity,
    identical_shards,
    simulate_spes,
    convergence_rhs,
    variance_reduction_check,
    zeta_noise_floor,
)
from spes.trainer import LRSchedule, NodeTrainer


def unit_quadratic(N=2, M=4, samples=16):
    # F = 1/2 ||theta||^2 with every sample at the origin
    D = 3 + M * 2
    return QuadraticProblem([np.zeros((samples, D))] * N, 1.0, 3, 2, M, param_partition(M, N))


def random_points(D, n=5, seed=0):
    return list(np.random.default_rng(seed).standard_normal((n, D)))


def test_unit_quadratic_constants_exact():
    q = unit_quadratic()
    probe = estimate_constants(q, random_points(q.D), samples=30)
    assert 0.99 <= probe.L <= 1.0
    assert probe.sigma_psi2 == 0.0 and probe.sigma_phi2 == 0.0
    assert probe.zeta == 0.0


def test_too_few_samples_rejected():
    q = unit_quadratic()
    with pytest.raises(ValueError):
        estimate_constants(q, random_points(q.D), samples=29)


def test_non_finite_gradient_aborts():
    q = unit_quadratic()
    with pytest.raises(FloatingPointError):
        estimate_constants(q, [np.full(q.D, np.inf)], samples=30)


def test_identical_shards_zeta_below_noise_floor():
    lg = identical_shards(LogisticProblem.make(N=2, M=4, seed=1))
    pts = random_points(lg.D, seed=1)
    zeta = estimate_constants(lg, pts, samples=30).zeta
    floor = zeta_noise_floor(lg, pts)
    assert zeta < 3 * floor


def test_disjoint_labels_zeta_above_noise_floor():
    # node 0 sees only y=+1, node 1 only y=-1
    lg = LogisticProblem.disjoint_labels(M=4, seed=2)
    pts = random_points(lg.D, seed=2)
    assert estimate_constants(lg, pts, samples=30).zeta > zeta_noise_floor(lg, pts)


def probe(**kw):
    base = dict(L=2.0, G=3.0, sigma_psi2=0.0, sigma_phi2=0.0, zeta=0.0, samples=30)
    return TheoryProbe(**{**base, **kw})


def test_bound_term_elimination():
    b = convergence_rhs(probe(), eta=0.01, H=5, N=4, T=100, gap=2.0)
    expected = 4 * 2.0 / (0.01 * 5 * 100) + 12 * 2.0**2 * 0.01**2 * 5**2 * 3.0**2
    assert b.total == pytest.approx(expected, rel=1e-12)
    assert b.terms["variance"] == b.terms["heterogeneity"] == b.terms["merge"] == 0.0


def test_bound_doubling_H_with_fixed_eta_T():
    p = probe(sigma_psi2=1.0, sigma_phi2=0.5, zeta=0.1)
    a = convergence_rhs(p, eta=0.01, H=10, N=4, T=100, gap=2.0)
    b = convergence_rhs(p, eta=0.01, H=20, N=4, T=100, gap=2.0)
    assert b.terms["drift"] == pytest.approx(4 * a.terms["drift"], rel=1e-12)
    assert b.terms["init"] == pytest.approx(0.5 * a.terms["init"], rel=1e-12)
    assert b.terms["variance"] == a.terms["variance"]


def test_bound_reports_both_step_conditions():
    b = convergence_rhs(probe(L=1.0), eta=0.2, H=5, N=2, T=10, gap=1.0)
    assert b.eta_condition and not b.gamma_condition
    assert np.isfinite(b.total)


def test_merge_term():
    b = convergence_rhs(probe(L=1.0), eta=0.1, H=2, N=2, T=10, gap=0.0, alphas=[0.1, 0.05], B_merge=2.0)
    assert b.terms["merge"] == pytest.approx(1.0 * 4.0 / 2.0 * (0.01 + 0.0025))


@pytest.mark.parametrize("kind", ["quadratic", "logistic"])
def test_bound_holds_on_convex_toys(kind):
    if kind == "quadratic":
        prob, eta, batch = QuadraticProblem.make(N=2, M=4, seed=3), 0.05, 4
    else:
        prob, eta, batch = LogisticProblem.make(N=2, M=4, seed=3), 0.1, 8
    check, sim = check_bound(kind, prob, eta=eta, H=5, T=200, batch=batch, merge=MergeSchedule(T_merge=40, alpha0=0.1, K=2))
    assert len(sim.grad_sq) == 200
    assert check.holds, check.to_dict()
    assert sim.premerge_err < 1e-6
    assert sim.drift_violations == 0


def test_premerge_identity_and_drift_in_simulation():
    q = QuadraticProblem.make(N=4, M=8, seed=4)
    sim = simulate_spes(q, eta=0.02, H=7, T=30, batch=2, seed=1)
    assert sim.premerge_err < 1e-6
    assert sim.drift_checks == 4 * 7 * 30 and sim.drift_violations == 0


def test_merge_displacement_within_alpha_B():
    lg = LogisticProblem.make(N=2, M=6, seed=5)
    sim = simulate_spes(lg, eta=0.1, H=3, T=30, batch=8, merge=MergeSchedule(T_merge=20, alpha0=0.3, K=2))
    assert len(sim.merges) == 20
    for m in sim.merges:
        assert m["disp_sq"] <= m["alpha"] ** 2 * m["B_meas"] ** 2 * (1 + 1e-9)


def test_heterogeneity_zero_for_shared_only_gradients():
    q = identical_shards(QuadraticProblem.make(N=2, M=4, seed=6))
    assert heterogeneity(q, random_points(q.D)) == 0.0


TINY = ModelConfig(vocab=6, hidden=4, intermediate=6, layers=1, experts_total=4, experts_active=2, init_std=0.3)


def test_variance_reduction_table():
    params = init_params(TINY, 0)
    pool = np.random.default_rng(0).integers(0, TINY.vocab, (48, 6))
    rows = variance_reduction_check(TINY, params, pool, reps=2000, seed=1)
    assert [r["N"] for r in rows] == [1, 2, 4, 8]
    v1 = rows[0]["var_shared"]
    assert v1 / 8 <= rows[2]["var_shared"] <= v1 / 2
    for r in rows:
        assert 0.5 <= r["shared_times_N_over_v1"] <= 2.0
        assert r["expert_over_v1"] > 0.8  # single owner: no averaging


def test_variance_check_needs_repetitions():
    with pytest.raises(ValueError):
        variance_reduction_check(TINY, init_params(TINY), np.zeros((4, 3), dtype=int), reps=199)


def test_drift_audit_on_moe_sgd():
    params = init_params(TINY, 1)
    batch = lambda node, rnd, h: np.random.default_rng([node, rnd, h]).integers(0, TINY.vocab, (2, 5))
    tr = NodeTrainer(TINY, 4, LRSchedule.constant(0.05), batch, inner="sgd", track_drift=True)
    records = []
    theta = params
    for t in range(1, 6):
        res, _ = tr.run(0, t, theta, [0, 1])
        records.append(res)
        theta = res.params
    audit = drift_audit(records)
    assert audit["checks"] == 20 and audit["violations"] == 0
    assert 0 < audit["max_ratio"] <= 1 + 1e-9  # equality at h=1 up to rounding


def test_drift_audit_flags_violation():
    class Rec:
        drift_sq, update_norms, lrs = [2.0], [1.0], [1.0]

    assert drift_audit([Rec()])["violations"] == 1
