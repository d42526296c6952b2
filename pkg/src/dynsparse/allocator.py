"""Joint prompt/model budget allocation.

A binary retention vector ``r`` selects prompt tokens; retained tokens sum
to the latent feature ``u(r)`` that is sensed at every decoding step, with
measurement noise inflated by the importance of dropped tokens.  The joint
objective trades recovery error (the task-loss stand-in) against token
count, support norm, a latency surrogate, faithfulness and support
switching.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from itertools import product

import numpy as np

from ._validation import InvalidArgumentError, check_vector, derive_seed
from .controller import ControllerConfig, sensing_cost
from .dictionary import (FeasibleFamily, StructuredDictionary, SupportSet, enumerate_family,
                         support_prf)
from .recovery import RecoveryResult, effective_matrix, omp_structured
from .sensing import draw_operator

PARETO_COLUMNS = ("lambda_p", "beta_tau", "retained", "mean_f1", "tau_prefill",
                  "tau_decode", "theta_total", "objective")


@dataclass(frozen=True, eq=False)
class PromptInstance:
    """Prompt tokens with importances and latent contributions.

    ``token_coef`` (n x G) holds each token's planted unit coefficients; the
    contributions are ``token_coef @ Psi.T``.  The full-prompt coefficient
    sum is the reference the task loss is measured against.
    """

    importance: np.ndarray
    contribution: np.ndarray
    token_coef: np.ndarray
    min_retained: int = 1

    def __post_init__(self):
        imp = check_vector(self.importance, "importance")
        contrib = np.asarray(self.contribution, dtype=float)
        coef = np.asarray(self.token_coef, dtype=float)
        n = imp.shape[0]
        if np.any(imp < 0) or imp.sum() > n + 1e-12:
            raise InvalidArgumentError("importances must be >= 0 with sum <= n")
        if contrib.ndim != 2 or contrib.shape[0] != n or not np.all(np.isfinite(contrib)):
            raise InvalidArgumentError("contribution must be a finite n x D matrix")
        if coef.ndim != 2 or coef.shape[0] != n:
            raise InvalidArgumentError("token_coef must be n x G")
        if not 1 <= self.min_retained <= n:
            raise InvalidArgumentError("need 1 <= min_retained <= n")
        for name, val in (("importance", imp), ("contribution", contrib), ("token_coef", coef)):
            object.__setattr__(self, name, val)

    @property
    def n(self):
        return self.importance.shape[0]

    @property
    def target(self):
        return self.token_coef.sum(axis=0)

    def features(self, r):
        return np.asarray(r, dtype=float) @ self.contribution

    def to_dict(self):
        return {"schema": 1, "importance": self.importance.tolist(),
                "contribution": self.contribution.tolist(),
                "token_coef": self.token_coef.tolist(), "min_retained": self.min_retained}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["importance"], doc["contribution"], doc["token_coef"],
                   int(doc.get("min_retained", 1)))


@dataclass(frozen=True)
class LatencyTable:
    motif_costs: dict
    prefill_cost_per_token: float = 0.0
    decode_base: float = 0.0

    def __post_init__(self):
        costs = {int(k): float(v) for k, v in dict(self.motif_costs).items()}
        if any(v < 0 for v in costs.values()) or self.prefill_cost_per_token < 0 \
                or self.decode_base < 0:
            raise InvalidArgumentError("latency costs must be nonnegative")
        object.__setattr__(self, "motif_costs", costs)

    @classmethod
    def from_dictionary(cls, Psi, prefill_cost_per_token=0.0, decode_base=0.0):
        """Per-unit decode costs taken from the dictionary's unit weights."""
        return cls({u.id: u.weight for u in Psi.units}, prefill_cost_per_token, decode_base)

    def to_dict(self):
        return {"motif_costs": {str(k): v for k, v in sorted(self.motif_costs.items())},
                "prefill_cost_per_token": self.prefill_cost_per_token,
                "decode_base": self.decode_base}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["motif_costs"], doc.get("prefill_cost_per_token", 0.0),
                   doc.get("decode_base", 0.0))


@dataclass(frozen=True)
class JointConfig:
    lambda_p: float = 0.0
    lambda_m: float = 0.0
    beta_tau: float = 0.0
    beta_f: float = 0.0
    beta_c: float = 0.0
    sigma0: float = 0.0
    c_faith: float = 0.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value >= 0:
                raise InvalidArgumentError(f"{name} must be nonnegative")

    @classmethod
    def from_dict(cls, doc):
        return cls(**{k: float(v) for k, v in doc.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class JointProblem:
    """Per-step sensing setup shared by every retention vector."""

    Psi: StructuredDictionary
    m: int
    T: int
    family: FeasibleFamily
    ensemble: str = "gaussian"
    beta_m: float = 0.0
    rho: float = 1.0

    @property
    def k(self):
        return self.family.max_support_size(self.Psi.G)

    def theta_total(self):
        ctrl = ControllerConfig(self.m, beta_m=self.beta_m, rho=self.rho)
        return self.T * sensing_cost(self.m, ctrl)


@dataclass
class JointSolution:
    r: np.ndarray
    results: list
    objective_value: float
    breakdown: dict
    objective_trace: list = field(default_factory=list)

    @property
    def supports(self):
        return [res.support for res in self.results]

    def to_dict(self):
        return {"schema": 1, "r": [int(v) for v in self.r],
                "objective_value": self.objective_value,
                "breakdown": dict(self.breakdown),
                "objective_trace": list(self.objective_trace),
                "steps": [res.to_dict() for res in self.results]}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def _binary(r, n=None):
    r = np.asarray(r)
    if r.ndim != 1 or (n is not None and r.shape[0] != n):
        raise InvalidArgumentError("retention vector has the wrong length")
    if not np.all((r == 0) | (r == 1)):
        raise InvalidArgumentError("retention vector must be binary")
    return r.astype(int)


def faithfulness_penalty(r, importance):
    """Total importance of dropped tokens."""
    importance = check_vector(importance, "importance")
    r = _binary(r, importance.shape[0])
    return float(np.sum(importance[r == 0]))


def latency_components(r, supports, table, T):
    """(prefill, decode) parts of the runtime surrogate."""
    r = _binary(r)
    supports = list(supports)
    if len(supports) != T:
        raise InvalidArgumentError(f"expected {T} supports, got {len(supports)}")
    prefill = table.prefill_cost_per_token * int(r.sum())
    decode = 0.0
    for S in supports:
        try:
            decode += table.decode_base + sum(table.motif_costs[g] for g in S)
        except KeyError as err:
            raise InvalidArgumentError(f"unit id {err.args[0]} missing from latency table") from None
    return prefill, decode


def latency_surrogate(r, supports, table, T):
    prefill, decode = latency_components(r, supports, table, T)
    return prefill + decode


def consistency_penalty(supports):
    """Total support switching: sum over t >= 2 of |S_t xor S_{t-1}|."""
    supports = [set(S) for S in supports]
    return float(sum(len(a ^ b) for a, b in zip(supports[1:], supports[:-1])))


def structured_norm(alpha, groups=None):
    value = float(np.sum(np.abs(alpha)))
    if groups:
        value += sum(float(np.linalg.norm(alpha[list(g)])) for g in groups)
    return value


def retention_coupling(r, instance, config):
    """Effective measurement noise under retention ``r``."""
    return config.sigma0 + config.c_faith * faithfulness_penalty(r, instance.importance)


def joint_objective(solution, instance, table, config, problem=None):
    """Recompute the joint objective of ``solution`` with its term breakdown.

    The task loss is the mean recovery error against the full-prompt
    coefficients.  ``lambda_p`` charges every retained token.
    """
    r = _binary(solution.r, instance.n)
    results = solution.results
    T = len(results)
    if T == 0:
        raise InvalidArgumentError("solution has no recovery steps")
    target = instance.target
    if any(res.alpha_hat.shape != target.shape for res in results):
        raise InvalidArgumentError("recovered coefficients do not match G")
    supports = [res.support for res in results]
    breakdown = {
        "task_loss": float(np.mean([np.linalg.norm(res.alpha_hat - target) for res in results])),
        "tokens": config.lambda_p * float(r.sum()),
        "support_norm": config.lambda_m * sum(structured_norm(res.alpha_hat) for res in results),
        "latency": config.beta_tau * latency_surrogate(r, supports, table, T),
        "faithfulness": config.beta_f * faithfulness_penalty(r, instance.importance),
        "consistency": config.beta_c * consistency_penalty(supports),
    }
    return float(sum(breakdown.values())), breakdown


class _StepCache:
    """Operators and noise draws that do not depend on ``r``."""

    def __init__(self, problem, seed):
        self.problem = problem
        self.A, self.M, self.xi = [], [], []
        for t in range(problem.T):
            A = draw_operator(problem.ensemble, problem.m, problem.Psi.D,
                              derive_seed("joint-bank", seed, t))
            self.A.append(A.entries)
            self.M.append(effective_matrix(A, problem.Psi))
            self.xi.append(np.random.default_rng(derive_seed("joint-noise", seed, t))
                           .standard_normal(problem.m))
        self._projectors = None
        self.evaluations = {}

    def exhaustive(self, t, z):
        """Least-squares fit on every maximal family support; smallest residual wins."""
        if self._projectors is None:
            self._supports = enumerate_family(self.problem.family, self.problem.Psi.G)
            self._projectors = [[np.linalg.pinv(M[:, list(S)]) for S in self._supports]
                                for M in self.M]
        M = self.M[t]
        best = None
        for S, pinv in zip(self._supports, self._projectors[t]):
            coef = pinv @ z
            res = float(np.linalg.norm(z - M[:, list(S)] @ coef))
            if best is None or res < best[0] - 1e-12:
                best = (res, S, coef)
        res, S, coef = best
        alpha = np.zeros(M.shape[1])
        alpha[list(S)] = coef
        return RecoveryResult(alpha, SupportSet(S), res, 1, len(z))


def _evaluate(r, instance, table, config, cache, recovery="omp"):
    key = (tuple(int(v) for v in r), recovery)
    if key in cache.evaluations:
        return cache.evaluations[key]
    problem = cache.problem
    sigma = retention_coupling(r, instance, config)
    u = instance.features(r)
    results = []
    for t in range(problem.T):
        z = cache.A[t] @ u + sigma * cache.xi[t]
        if recovery == "exhaustive":
            results.append(cache.exhaustive(t, z))
        else:
            results.append(omp_structured(z, cache.M[t], problem.k, problem.family))
    sol = JointSolution(np.asarray(key[0], dtype=int), results, 0.0, {})
    sol.objective_value, sol.breakdown = joint_objective(sol, instance, table, config)
    cache.evaluations[key] = sol
    return sol


def _keep_top(importance, count):
    order = np.argsort(-importance, kind="stable")[:count]
    r = np.zeros(importance.shape[0], dtype=int)
    r[order] = 1
    return r


def sequential_baseline(instance, table, config, problem, count, seed=0, *, _cache=None):
    """Compress-then-recover: keep the ``count`` most important tokens, then recover."""
    if not instance.min_retained <= count <= instance.n:
        raise InvalidArgumentError("count must lie in [min_retained, n]")
    cache = _cache or _StepCache(problem, seed)
    return _evaluate(_keep_top(instance.importance, count), instance, table, config, cache)


def optimize_joint(instance, table, config, problem, budget_iters=100, seed=0):
    """Alternate recovery under a fixed ``r`` with greedy single-bit flips of ``r``.

    Each outer iteration recovers every step under ``u(r)`` and
    ``sigma_eff(r)``, then applies the single flip (keeping at least
    ``min_retained`` tokens) with the largest objective decrease, the
    candidates being scored with their own recoveries.  When no flip
    improves, the compress-then-recover baseline at the same token count is
    checked and, if better, the search restarts from it.
    """
    if not 1 <= instance.min_retained <= instance.n:
        raise InvalidArgumentError("infeasible min_retained")
    cache = _StepCache(problem, seed)
    current = _evaluate(np.ones(instance.n, dtype=int), instance, table, config, cache)
    trace = [current.objective_value]
    for _ in range(budget_iters):
        best = None
        for i in range(instance.n):
            r = current.r.copy()
            r[i] ^= 1
            if r.sum() < instance.min_retained:
                continue
            cand = _evaluate(r, instance, table, config, cache)
            if best is None or cand.objective_value < best.objective_value:
                best = cand
        if best is None or not best.objective_value < current.objective_value - 1e-12:
            base = sequential_baseline(instance, table, config, problem,
                                       int(current.r.sum()), _cache=cache)
            if not base.objective_value < current.objective_value - 1e-12:
                break
            best = base
        current = best
        trace.append(current.objective_value)
    return replace(current, objective_trace=trace)


def exhaustive_joint(instance, table, config, problem, seed=0, recovery="exhaustive"):
    """Brute-force oracle over every admissible retention vector."""
    if instance.n > 16:
        raise InvalidArgumentError("exhaustive search limited to n <= 16")
    cache = _StepCache(problem, seed)
    best = None
    for bits in product((0, 1), repeat=instance.n):
        if sum(bits) < instance.min_retained:
            continue
        sol = _evaluate(np.array(bits), instance, table, config, cache, recovery)
        if best is None or sol.objective_value < best.objective_value:
            best = sol
    return best


def make_prompt_instance(n, Psi, support, seed=0, min_retained=1, alpha_min=1.0):
    """Synthetic prompt whose tokens contribute to the units in ``support``.

    Token importances are drawn in [0, 1]; each token adds coefficients on a
    random non-empty subset of ``support`` scaled by its importance, so
    dropping important tokens moves the latent features the most.
    """
    rng = np.random.default_rng(derive_seed("prompt", seed))
    support = list(SupportSet(support))
    importance = rng.uniform(0.0, 1.0, size=n)
    coef = np.zeros((n, Psi.G))
    signs = rng.choice([-1.0, 1.0], size=len(support))
    for i in range(n):
        picks = rng.random(len(support)) < 0.5
        if not picks.any():
            picks[rng.integers(len(support))] = True
        scale = alpha_min * importance[i] / max(n / 4.0, 1.0)
        coef[i, np.asarray(support)[picks]] = signs[picks] * scale * rng.uniform(0.5, 1.5, picks.sum())
    # floor the planted coefficients so the full prompt has margin alpha_min
    total = coef.sum(axis=0)
    short = [g for g in support if abs(total[g]) < alpha_min]
    if short:
        fix = np.zeros(Psi.G)
        fix[short] = np.sign(total[short] + (total[short] == 0)) * alpha_min - total[short]
        top = int(np.argmax(importance))
        coef[top] += fix
    return PromptInstance(importance, coef @ Psi.entries.T, coef, min_retained)


def support_f1(solution, truth):
    return float(np.mean([support_prf(S, truth)[2] for S in solution.supports]))
