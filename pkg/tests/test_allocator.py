import json

import numpy as np
import pytest

from dynsparse import FeasibleFamily, InvalidArgumentError, SupportSet, build_synthetic_dictionary
from dynsparse.allocator import (JointConfig, JointProblem, JointSolution, LatencyTable,
                                 PromptInstance, consistency_penalty, exhaustive_joint,
                                 faithfulness_penalty, joint_objective, latency_components,
                                 latency_surrogate, make_prompt_instance, optimize_joint,
                                 retention_coupling, sequential_baseline, structured_norm)

TOL = 1e-9


def _setup(n=6, G=8, T=3, seed=5, k=2, m=20):
    Psi = build_synthetic_dictionary(G, G, 1, "identity_padded")
    rng = np.random.default_rng(seed)
    truth = SupportSet(rng.choice(G, size=k, replace=False))
    inst = make_prompt_instance(n, Psi, truth, seed=seed)
    table = LatencyTable.from_dictionary(Psi, 0.05, 0.1)
    problem = JointProblem(Psi, m, T, FeasibleFamily.unconstrained_k(k))
    return inst, table, problem, truth


def test_faithfulness_examples():
    imp = np.array([0.5, 0.3, 0.2])
    assert faithfulness_penalty([1, 1, 1], imp) == 0.0
    assert faithfulness_penalty([1, 0, 1], imp) == pytest.approx(0.3, abs=TOL)
    assert faithfulness_penalty([0, 0, 0], imp) == pytest.approx(1.0, abs=TOL)
    with pytest.raises(InvalidArgumentError):
        faithfulness_penalty([1, 2, 0], imp)


def test_latency_examples():
    table = LatencyTable({0: 0.25, 1: 0.25}, prefill_cost_per_token=0.01)
    supports = [SupportSet([0, 1])] * 10
    assert latency_surrogate(np.ones(100, int), supports, table, 10) == pytest.approx(6.0, abs=TOL)
    empty = [SupportSet()] * 10
    assert latency_surrogate(np.ones(100, int), empty, table, 10) == pytest.approx(1.0, abs=TOL)
    half = LatencyTable({0: 0.125, 1: 0.125}, prefill_cost_per_token=0.01)
    d_full = latency_components(np.ones(5, int), supports, table, 10)[1]
    d_half = latency_components(np.ones(5, int), supports, half, 10)[1]
    assert d_half == pytest.approx(d_full / 2, abs=TOL)
    with pytest.raises(InvalidArgumentError):
        latency_surrogate(np.ones(3, int), supports, table, 9)
    with pytest.raises(InvalidArgumentError):
        latency_surrogate(np.ones(3, int), [SupportSet([7])], table, 1)


def test_latency_additive_over_steps():
    table = LatencyTable({0: 0.3, 1: 0.1, 2: 0.6}, 0.0, 0.2)
    steps = [SupportSet([0]), SupportSet([1, 2]), SupportSet()]
    total = latency_surrogate(np.ones(2, int), steps, table, 3)
    parts = sum(latency_surrogate(np.ones(2, int), [S], table, 1) for S in steps)
    assert total == pytest.approx(parts, abs=TOL)


def test_consistency_examples():
    assert consistency_penalty([SupportSet([1, 2])] * 4) == 0.0
    a, b = SupportSet([0, 1, 2]), SupportSet([3, 4, 5])
    assert consistency_penalty([a, b, a, b, a]) == (5 - 1) * 2 * 3
    assert consistency_penalty([a]) == 0.0


def test_retention_coupling_examples():
    inst = PromptInstance([0.5, 0.3, 0.2], np.eye(3), np.eye(3))
    cfg = JointConfig(sigma0=0.01, c_faith=0.1)
    assert retention_coupling([1, 1, 1], inst, cfg) == 0.01
    assert retention_coupling([1, 0, 1], inst, cfg) == pytest.approx(0.04, abs=TOL)
    assert retention_coupling([0, 0, 1], inst, cfg) >= retention_coupling([1, 0, 1], inst, cfg)


def test_joint_objective_breakdown_fixture():
    inst, table, problem, _ = _setup()
    cfg = JointConfig(0.1, 0.01, 0.5, 0.5, 0.1, 0.01, 0.1)
    sol = optimize_joint(inst, table, cfg, problem, seed=5)
    total, br = joint_objective(sol, inst, table, cfg)
    assert total == pytest.approx(sum(br.values()), abs=TOL)
    assert total == pytest.approx(sol.objective_value, abs=TOL)
    # independent recomputation of every term
    target = inst.token_coef.sum(axis=0)
    sup = sol.supports
    expect = {
        "task_loss": np.mean([np.linalg.norm(r.alpha_hat - target) for r in sol.results]),
        "tokens": 0.1 * sol.r.sum(),
        "support_norm": 0.01 * sum(np.abs(r.alpha_hat).sum() for r in sol.results),
        "latency": 0.5 * (0.05 * sol.r.sum() + sum(0.1 + len(S) / 8 for S in sup)),
        "faithfulness": 0.5 * inst.importance[sol.r == 0].sum(),
        "consistency": 0.1 * sum(len(set(a) ^ set(b)) for a, b in zip(sup[1:], sup[:-1])),
    }
    for key, value in expect.items():
        assert br[key] == pytest.approx(value, abs=TOL), key


def test_zero_weights_task_loss_only():
    inst, table, problem, _ = _setup()
    sol = optimize_joint(inst, table, JointConfig(), problem)
    total, br = joint_objective(sol, inst, table, JointConfig())
    assert total == br["task_loss"]


def test_no_pressure_keeps_everything():
    inst, table, problem, _ = _setup()
    sol = optimize_joint(inst, table, JointConfig(beta_f=0.5, beta_c=0.1, sigma0=0.01), problem)
    assert sol.r.tolist() == [1] * inst.n
    best = exhaustive_joint(inst, table, JointConfig(beta_f=1.0), problem, recovery="omp")
    assert best.r.tolist() == [1] * inst.n


def test_huge_token_price_keeps_min_retained():
    inst, table, problem, _ = _setup()
    inst = PromptInstance(inst.importance, inst.contribution, inst.token_coef, min_retained=2)
    sol = optimize_joint(inst, table, JointConfig(lambda_p=1e6, beta_f=1.0), problem)
    assert sol.r.sum() == 2
    top = np.argsort(-inst.importance, kind="stable")[:2]
    assert set(np.flatnonzero(sol.r)) == set(top)


def test_trace_nonincreasing_and_beats_baseline():
    for seed in range(5):
        inst, table, problem, _ = _setup(seed=seed)
        cfg = JointConfig(0.2, 0.01, 1.0, 0.5, 0.1, 0.01, 0.1)
        sol = optimize_joint(inst, table, cfg, problem, seed=seed)
        tr = sol.objective_trace
        assert all(b <= a for a, b in zip(tr, tr[1:]))
        base = sequential_baseline(inst, table, cfg, problem, int(sol.r.sum()), seed=seed)
        assert sol.objective_value <= base.objective_value + TOL


def test_close_to_exhaustive_oracle_small():
    hits = 0
    for seed in range(4):
        inst, table, problem, _ = _setup(n=5, G=6, T=2, seed=seed)
        cfg = JointConfig(0.05, 0.01, 1.0, 0.5, 0.1, 0.01, 0.1)
        sol = optimize_joint(inst, table, cfg, problem, seed=seed)
        best = exhaustive_joint(inst, table, cfg, problem, seed=seed)
        assert best.objective_value <= sol.objective_value + TOL
        hits += sol.objective_value <= 1.05 * best.objective_value
    assert hits >= 3


def test_serialization():
    inst, table, problem, _ = _setup()
    assert PromptInstance.from_dict(json.loads(json.dumps(inst.to_dict()))).to_dict() == inst.to_dict()
    assert LatencyTable.from_dict(table.to_dict()) == table
    sol = optimize_joint(inst, table, JointConfig(lambda_p=0.1), problem)
    doc = json.loads(sol.to_json())
    assert doc["schema"] == 1 and len(doc["steps"]) == 3 and set(doc["breakdown"]) >= {"task_loss"}


def test_validation():
    with pytest.raises(InvalidArgumentError):
        JointConfig(lambda_p=-1)
    with pytest.raises(InvalidArgumentError):
        PromptInstance([0.5, 0.5], np.ones((2, 3)), np.ones((2, 3)), min_retained=3)
    with pytest.raises(InvalidArgumentError):
        LatencyTable({0: -1.0})
    inst, table, problem, _ = _setup()
    with pytest.raises(InvalidArgumentError):
        sequential_baseline(inst, table, JointConfig(), problem, 0)
    assert structured_norm(np.array([3.0, -4.0]), [[0, 1]]) == pytest.approx(12.0)


def test_net_cost_includes_sensing():
    inst, table, problem, _ = _setup()
    p2 = JointProblem(problem.Psi, problem.m, problem.T, problem.family, beta_m=0.01, rho=2.0)
    assert p2.theta_total() == pytest.approx(3 * 0.01 * 20 ** 2)
    assert JointSolution(np.ones(2, int), [], 0.0, {}).supports == []
