"""Synthetic ground-truth support processes, the synthetic entropy channel and
the closed sense -> recover -> execute -> entropy loop."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from ._validation import CapacityError, InvalidArgumentError, derive_seed
from .controller import adapt_budget, sensing_cost
from .dictionary import (FeasibleFamily, SupportSet, build_synthetic_dictionary, support_drift,
                         support_prf)
from .recovery import (RecoveryResult, effective_matrix, omp_structured, prox_group_lasso,
                       recover_incremental)
from .sensing import draw_operator, measure

TRACE_COLUMNS = ("step", "m", "H", "e", "drift", "precision", "recall", "f1",
                 "sensing_cost", "fallback_flag")


@dataclass(frozen=True)
class PromptFamily:
    """Admissible supports for one prompt family plus its measurement bank seed.

    ``weights`` is the categorical distribution over a motif pool; ignored for
    the other family kinds, whose initial support is drawn uniformly.
    """

    family_id: int
    admissible_supports: FeasibleFamily
    weights: tuple | None = None
    measurement_bank_seed: int = 0

    def __post_init__(self):
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if self.admissible_supports.kind != "motif_library":
                raise InvalidArgumentError("weights apply to motif pools only")
            if w.shape[0] != len(self.admissible_supports.motifs) or np.any(w < 0):
                raise InvalidArgumentError("one nonnegative weight per motif required")
            if abs(w.sum() - 1.0) > 1e-9:
                raise InvalidArgumentError("motif weights must sum to 1")


@dataclass(frozen=True)
class GroundTruthProcess:
    G: int
    D: int
    k: int
    family: PromptFamily
    alpha_min: float = 1.0
    drift_rate: float = 0.0
    noise_sigma: float = 0.0
    T: int = 20
    seed: int = 0
    mismatch_amplitude: float = 0.0
    group_size: int = 1

    def __post_init__(self):
        if not 1 <= self.k <= self.G:
            raise InvalidArgumentError("need 1 <= k <= G")
        if not self.alpha_min > 0:
            raise InvalidArgumentError("alpha_min must be positive")
        if not 0 <= self.drift_rate <= 1:
            raise InvalidArgumentError("drift_rate must lie in [0, 1]")
        if self.noise_sigma < 0 or self.mismatch_amplitude < 0:
            raise InvalidArgumentError("noise levels must be nonnegative")
        if self.T < 1:
            raise InvalidArgumentError("horizon T must be positive")
        self.family.admissible_supports.validate(self.G)

    def dictionary(self):
        ensemble = "identity_padded" if self.D >= self.G else "gaussian_normalized"
        return build_synthetic_dictionary(self.D, self.G, self.group_size, ensemble,
                                          derive_seed("dictionary", self.seed))


@dataclass(frozen=True)
class EntropyChannel:
    H_base: float = 0.0
    L_H: float = 1.0
    H_cap: float = float(np.log(50_000))
    noise_amplitude: float = 0.0

    def __post_init__(self):
        if self.H_base < 0 or self.L_H < 0 or self.noise_amplitude < 0:
            raise InvalidArgumentError("channel parameters must be nonnegative")
        if not self.H_cap > 0:
            raise InvalidArgumentError("H_cap must be positive")


@dataclass
class StepRecord:
    step: int
    true_support: SupportSet
    estimated_support: SupportSet
    m: int
    H: float
    e: float
    drift: float
    precision: float
    recall: float
    f1: float
    sensing_cost: float
    cumulative_measurements: int
    fallback: bool = False


@dataclass
class SimulationTrace:
    steps: list = field(default_factory=list)

    def __len__(self):
        return len(self.steps)

    def column(self, name):
        return np.array([getattr(s, name) for s in self.steps])

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for s in self.steps:
            writer.writerow([s.step, s.m, repr(float(s.H)), repr(float(s.e)), repr(float(s.drift)),
                             repr(float(s.precision)), repr(float(s.recall)), repr(float(s.f1)),
                             repr(float(s.sensing_cost)), int(s.fallback)])
        return buf.getvalue()


def _initial_support(family, k, G, rng, weights):
    if family.kind == "unconstrained_k":
        return SupportSet(rng.choice(G, size=k, replace=False))
    if family.kind == "group_k":
        chosen = rng.choice(len(family.groups), size=family.k, replace=False)
        support = SupportSet(i for gi in chosen for i in family.groups[gi])
    elif family.kind == "n_of_m":
        support = SupportSet(b * family.M + j for b in range(G // family.M)
                             for j in rng.choice(family.M, size=family.N, replace=False))
    else:
        idx = rng.choice(len(family.motifs), p=None if weights is None else np.asarray(weights))
        support = family.motifs[int(idx)]
    if len(support) != k:
        raise InvalidArgumentError(f"family supports have size {len(support)}, process k={k}")
    return support


def _swap(support, family, G, rate, rng):
    """One drift step: each atom (or group, or motif) swapped with prob. ``rate``."""
    current = set(support)
    if family.kind == "unconstrained_k":
        for g in list(support):
            if rng.random() < rate:
                pool = np.setdiff1d(np.arange(G), sorted(current))
                if pool.size == 0:
                    raise CapacityError("no replacement atom available")
                current.remove(g)
                current.add(int(rng.choice(pool)))
        return SupportSet(current)
    if family.kind == "n_of_m":
        for g in list(support):
            if rng.random() < rate:
                block = range((g // family.M) * family.M, (g // family.M + 1) * family.M)
                pool = [i for i in block if i not in current]
                if not pool:
                    raise CapacityError("N = M leaves no replacement inside the block")
                current.remove(g)
                current.add(int(rng.choice(pool)))
        return SupportSet(current)
    if family.kind == "group_k":
        owner = {i: gi for gi, grp in enumerate(family.groups) for i in grp}
        chosen = sorted({owner[i] for i in support})
        active = set(chosen)
        for gi in chosen:
            if rng.random() < rate:
                pool = [h for h in range(len(family.groups)) if h not in active]
                if not pool:
                    raise CapacityError("no replacement group available")
                active.remove(gi)
                active.add(int(rng.choice(pool)))
        return SupportSet(i for gi in active for i in family.groups[gi])
    # motif pool: leaving atoms must be replaced by moving to another motif;
    # prefer motifs that keep every staying atom, else maximal overlap
    leaving = {g for g in support if rng.random() < rate}
    if not leaving:
        return support
    others = [m for m in dict.fromkeys(family.motifs) if m != support]
    if not others:
        raise CapacityError("motif pool has a single motif; cannot drift")
    staying = current - leaving
    overlap = np.array([len(staying & set(m)) for m in others])
    best = np.flatnonzero(overlap == overlap.max())
    return others[int(rng.choice(best))]


def generate_ground_truth(process):
    """Planted (support, coefficients) sequence of length ``process.T``."""
    family = process.family.admissible_supports
    G, k = process.G, process.k
    rng = np.random.default_rng(derive_seed("truth", process.seed))
    a_min = process.alpha_min

    def draw(n):
        return rng.uniform(a_min, 2 * a_min, size=n) * rng.choice([-1.0, 1.0], size=n)

    support = _initial_support(family, k, G, rng, process.family.weights)
    alpha = np.zeros(G)
    alpha[list(support)] = draw(len(support))
    out = [(support, alpha.copy())]
    for _ in range(1, process.T):
        new_support = _swap(support, family, G, process.drift_rate, rng) \
            if process.drift_rate > 0 else support
        entering = sorted(set(new_support) - set(support))
        alpha = np.where(new_support.to_mask(G), alpha, 0.0)
        alpha[entering] = draw(len(entering))
        support = new_support
        out.append((support, alpha.copy()))
    return out


def synth_entropy(e_t, channel, seed, t):
    """H = clip(H_base + L_H e + noise, 0, H_cap), noise ~ U(-a, a) seeded by (seed, t)."""
    noise = 0.0
    if channel.noise_amplitude > 0:
        rng = np.random.default_rng(derive_seed("entropy", seed, t))
        noise = rng.uniform(-channel.noise_amplitude, channel.noise_amplitude)
    return float(np.clip(channel.H_base + channel.L_H * e_t + noise, 0.0, channel.H_cap))


def run_closed_loop(process, controller, channel, recovery_config, ensemble="gaussian",
                    incremental=False, seed=0, *, dictionary=None, solver="prox",
                    delta_max=1, k_max=None):
    """Simulate the uncertainty-driven sensing loop for ``process.T`` steps.

    Step ``t`` uses the entropy produced at step ``t-1`` (``H_base`` at the
    first step) to size a fresh operator from the family's measurement bank,
    senses ``u_t = Psi alpha*_t``, recovers, scores, and feeds the recovery
    error through the entropy channel.  A solver failure keeps the previous
    support and estimate and sets the fallback flag.
    """
    if solver not in ("prox", "omp"):
        raise InvalidArgumentError(f"unknown solver {solver!r}")
    Psi = dictionary if dictionary is not None else process.dictionary()
    if Psi.G != process.G or Psi.D != process.D:
        raise InvalidArgumentError("dictionary shape does not match the process")
    truth = generate_ground_truth(process)
    bank_seed = process.family.measurement_bank_seed
    k_max = process.k if k_max is None else k_max
    G = process.G

    trace = SimulationTrace()
    H_prev = channel.H_base
    prev_result = None
    prev_alpha = None
    total_m = 0
    for t, (true_support, alpha_star) in enumerate(truth):
        m = adapt_budget(H_prev, controller)
        A = draw_operator(ensemble, m, process.D, derive_seed("bank", bank_seed, t))
        u = Psi.entries @ alpha_star
        if process.mismatch_amplitude > 0:
            rng = np.random.default_rng(derive_seed("mismatch", seed, t))
            off = rng.uniform(-1.0, 1.0, size=G) * ~true_support.to_mask(G)
            u = u + Psi.entries @ (process.mismatch_amplitude * off)
        z = measure(A, u, process.noise_sigma, derive_seed("measure", seed, t))
        M = effective_matrix(A, Psi)
        fallback = False
        try:
            if incremental and prev_result is not None:
                result = recover_incremental(z, M, prev_result, delta_max, recovery_config)
            elif solver == "omp":
                result = omp_structured(z, M, k_max, recovery_config.family)
            else:
                temporal = prev_alpha if recovery_config.gamma_temporal > 0 else None
                result = prox_group_lasso(z, M, recovery_config, warm_start=prev_alpha,
                                          previous_alpha=temporal)
        except (ArithmeticError, ValueError, np.linalg.LinAlgError):
            fallback = True
            support = prev_result.support if prev_result is not None else SupportSet()
            alpha = prev_alpha if prev_alpha is not None else np.zeros(G)
            result = RecoveryResult(alpha.copy(), support, float("nan"), 0, m)

        e = float(np.linalg.norm(result.alpha_hat - alpha_star))
        precision, recall, f1 = support_prf(result.support, true_support)
        drift = support_drift(result.support, prev_result.support) if prev_result else 0.0
        H = synth_entropy(e, channel, seed, t)
        total_m += m
        trace.steps.append(StepRecord(t, true_support, result.support, m, H, e, drift,
                                      precision, recall, f1, sensing_cost(m, controller),
                                      total_m, fallback))
        H_prev = H
        prev_result, prev_alpha = result, result.alpha_hat
    return trace


def trace_metrics(trace, execution_cost=0.0):
    """Order-free summary of a simulation trace."""
    if len(trace) == 0:
        raise InvalidArgumentError("empty trace")
    m = trace.column("m")
    return {
        "mean_f1": float(np.mean(trace.column("f1"))),
        "mean_drift": float(np.mean(trace.column("drift"))),
        "total_measurements": int(np.sum(m)),
        "mean_m": float(np.mean(m)),
        "mean_e": float(np.mean(trace.column("e"))),
        "net_cost": float(np.sum(trace.column("sensing_cost")) + execution_cost),
        "fallback_steps": int(np.sum(trace.column("fallback"))),
    }
