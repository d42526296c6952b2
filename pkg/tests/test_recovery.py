import itertools

import numpy as np
import pytest

from dynsparse import (ErrorCurve, FeasibleFamily, InvalidArgumentError, NumericalFailureError,
                       RecoveryConfig, RecoveryResult, SupportSet, draw_operator,
                       fit_error_curve, is_admissible, measure, omp_structured, prox_group_lasso,
                       project_support, recover_incremental, sample_complexity)
from dynsparse.experiments import _drift_instance
from dynsparse.recovery import recovery_objective, threshold_support


def _planted(seed, m, G, k, sigma=0.0):
    rng = np.random.default_rng(seed)
    support = SupportSet(rng.choice(G, size=k, replace=False))
    alpha = np.zeros(G)
    alpha[list(support)] = rng.uniform(1, 2, k) * rng.choice([-1, 1], k)
    A = draw_operator("gaussian", m, G, seed)
    z = measure(A, alpha, sigma, seed).values
    return A.entries, z, alpha, support


def test_omp_identity_example():
    res = omp_structured(np.array([0, 5.0, 0, 0]), np.eye(4), 1)
    assert res.support == SupportSet([1])
    assert res.alpha_hat[1] == pytest.approx(5.0)
    assert res.residual_norm == pytest.approx(0.0, abs=1e-12)


def test_omp_matches_exhaustive_least_squares():
    M, z, _, truth = _planted(7, 8, 12, 2)
    best = min(itertools.combinations(range(12), 2),
               key=lambda S: np.linalg.norm(z - M[:, S] @ np.linalg.lstsq(M[:, S], z, rcond=None)[0]))
    res = omp_structured(z, M, 2, FeasibleFamily.unconstrained_k(2))
    assert res.support == SupportSet(best) == truth


def test_omp_residual_strictly_decreasing_and_admissible():
    fams = [FeasibleFamily.unconstrained_k(4), FeasibleFamily.n_of_m(1, 4),
            FeasibleFamily.group_k(2, tuple(tuple(range(i, i + 2)) for i in range(0, 16, 2))),
            FeasibleFamily.motif_library([(0, 3, 5), (1, 2, 9, 12), (4, 7)])]
    for seed in range(10):
        M, z, _, _ = _planted(seed, 10, 16, 3, 0.05)
        for fam in fams:
            res = omp_structured(z, M, 8, fam)
            r = res.residual_trace
            assert all(b < a for a, b in zip(r, r[1:]))
            assert is_admissible(res.support, fam, 16)


def test_omp_validation():
    with pytest.raises(InvalidArgumentError):
        omp_structured(np.ones(3), np.eye(4), 1)
    with pytest.raises(InvalidArgumentError):
        omp_structured(np.ones(4), np.eye(4), 0)
    with pytest.raises(ValueError):
        omp_structured(np.ones(2), np.array([[np.nan, 1.0], [0.0, 1.0]]), 1)


def test_prox_full_shrinkage():
    M, z, _, _ = _planted(1, 10, 20, 3)
    lam = float(np.max(np.abs(M.T @ z)))
    res = prox_group_lasso(z, M, RecoveryConfig(lambda1=lam))
    np.testing.assert_array_equal(res.alpha_hat, 0.0)


def test_prox_scalar_soft_threshold():
    res = prox_group_lasso(np.array([3.0]), np.array([[1.0]]), RecoveryConfig(lambda1=1.0))
    assert res.alpha_hat[0] == pytest.approx(2.0, abs=1e-9)


def test_prox_temporal_penalty_dominates():
    M, z, _, _ = _planted(2, 10, 20, 3)
    p = np.random.default_rng(0).standard_normal(20)
    cfg = RecoveryConfig(lambda1=0.01, gamma_temporal=1e6, max_iterations=2000)
    res = prox_group_lasso(z, M, cfg, previous_alpha=p)
    assert np.linalg.norm(res.alpha_hat - p) <= 1e-3 * np.linalg.norm(p)


def test_prox_beats_planted_objective():
    M, z, alpha, _ = _planted(11, 40, 80, 5, 0.01)
    cfg = RecoveryConfig(lambda1=0.05, lambda_group=0.02, tau=0.1, max_iterations=2000,
                         tolerance=1e-12)
    res = prox_group_lasso(z, M, cfg)
    assert res.objective_trace[-1] <= recovery_objective(alpha, z, M, cfg)
    assert all(b <= a for a, b in zip(res.objective_trace, res.objective_trace[1:]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_prox_numerical_failure_reports_iteration():
    M = np.array([[1e300, 0.0], [0.0, 1.0]])
    with pytest.raises(NumericalFailureError) as info:
        prox_group_lasso(np.array([1e300, 1.0]), M, RecoveryConfig(lambda1=0.0))
    assert info.value.iteration == 0


def test_threshold_support_examples():
    fam = FeasibleFamily.unconstrained_k(3)
    alpha = np.array([0.05, 2, -1, 0.01])
    assert threshold_support(alpha, RecoveryConfig(tau=0.1, family=fam)) == SupportSet([1, 2])
    dense = np.array([0.3, -2, 1, 0.7, 0.2])
    assert threshold_support(dense, RecoveryConfig(tau=0.0, family=fam)) == project_support(dense, fam)
    assert threshold_support(np.full(4, 0.1), RecoveryConfig(tau=0.1, family=fam)) == SupportSet()


def test_incremental_unchanged_truth_exits_early():
    M, z, alpha, support = _planted(3, 12, 30, 3)
    prev = RecoveryResult(alpha, support, 0.0, 0, 12)
    res = recover_incremental(z, M, prev, 2, RecoveryConfig(tau=0.1, tolerance=1e-9))
    assert res.support == support and res.early_exit


def test_incremental_frozen_when_delta_zero():
    M, z, alpha, support = _planted(4, 12, 30, 3)
    prev = RecoveryResult(alpha, SupportSet([0, 1, 2]), 0.0, 0, 12)
    assert recover_incremental(z, M, prev, 0, RecoveryConfig()).support == SupportSet([0, 1, 2])


def test_incremental_beats_full_at_drift_sized_budget():
    G, k = 128, 8
    m = sample_complexity(1, G, 1, 0.01, C=2.0, delta=1.0)  # calibrated constant
    assert m == 21
    fam = FeasibleFamily.unconstrained_k(k)
    cfg = RecoveryConfig(tau=0.5, family=fam, tolerance=1e-9)
    inc = full = 0
    for seed in range(100):
        prev_s, prev_a, cur_s, cur_a = _drift_instance(np.random.default_rng(seed), G, k, 1)
        A = draw_operator("gaussian", m, G, seed).entries
        z = A @ cur_a
        res = recover_incremental(z, A, RecoveryResult(prev_a, prev_s, 0.0, 0, m), 1, cfg)
        inc += res.support == cur_s
        full += omp_structured(z, A, k, fam).support == cur_s
        assert len(set(res.support) ^ set(prev_s)) <= 2
    assert inc >= 95 and full < 50


def test_incremental_motif_stays_admissible():
    motifs = [(0, 1, 2), (1, 2, 3), (5, 6, 7)]
    fam = FeasibleFamily.motif_library(motifs)
    M = draw_operator("gaussian", 8, 8, 1).entries
    alpha = np.zeros(8)
    alpha[[1, 2, 3]] = [1.0, -1.5, 2.0]
    prev = RecoveryResult(np.zeros(8), SupportSet([0, 1, 2]), 0.0, 0, 8)
    res = recover_incremental(M @ alpha, M, prev, 1, RecoveryConfig(tau=0.3, family=fam))
    assert is_admissible(res.support, fam, 8)
    assert res.support == SupportSet([1, 2, 3])


def test_error_curve_examples():
    curve = ErrorCurve().fit([10, 20, 30, 40], [4.0, 3.0, 2.0, 1.0])
    np.testing.assert_allclose(curve.predict([10, 20, 30, 40]), [4, 3, 2, 1])
    flat = fit_error_curve([(m, 0.5) for m in (5, 10, 15)])
    assert flat.slope(10) == 0.0
    with pytest.raises(InvalidArgumentError):
        fit_error_curve([(1, 1.0), (2, 0.5)])


def test_error_curve_inverse_m_slope():
    trials = [(m, 1.0 / m) for m in (10, 20, 40, 80)]
    slope = fit_error_curve(trials).slope(20)
    assert slope == pytest.approx(-1 / 400, rel=0.3)


def test_error_curve_is_monotone_on_noisy_data():
    rng = np.random.default_rng(0)
    m = np.repeat([8, 16, 24, 32, 40], 5)
    e = 3.0 / m + 0.05 * rng.standard_normal(m.size)
    pred = ErrorCurve().fit(m, e).predict(np.arange(8, 41))
    assert np.all(np.diff(pred) <= 1e-12)


def test_result_serialization_round_trip():
    M, z, _, _ = _planted(5, 10, 20, 2)
    res = omp_structured(z, M, 2)
    back = RecoveryResult.from_dict(res.to_dict())
    np.testing.assert_array_equal(back.alpha_hat, res.alpha_hat)
    assert back.support == res.support
    assert res.trace_csv().splitlines()[0] == "iteration,objective,residual_norm"


def test_threshold_recovers_truth_when_margin_exceeds_error():
    for seed in range(20):
        M, z, alpha, support = _planted(seed, 40, 64, 4, 0.01)
        cfg = RecoveryConfig(lambda1=0.02, tau=0.3, family=FeasibleFamily.unconstrained_k(4))
        res = prox_group_lasso(z, M, cfg)
        err = np.max(np.abs(res.alpha_hat - alpha))
        if np.min(np.abs(alpha[list(support)])) > err + cfg.tau:
            assert res.support == support
