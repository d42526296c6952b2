"""Structured sparse recovery: constrained OMP, accelerated proximal sparse
group-lasso with a temporal penalty, thresholded support extraction,
incremental warm-started recovery, and the monotone error-curve fit."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.isotonic import IsotonicRegression
from sklearn.utils.validation import check_is_fitted

from ._validation import (DegenerateInputError, InvalidArgumentError, NumericalFailureError,
                          check_matrix, check_vector)
from .dictionary import (FeasibleFamily, StructuredDictionary, SupportSet, is_admissible,
                         project_support)
from .sensing import MeasurementOperator, Sketch

OMP_RESIDUAL_STOP = 1e-10


@dataclass(frozen=True)
class RecoveryConfig:
    lambda1: float = 0.0
    lambda_group: float = 0.0
    gamma_temporal: float = 0.0
    tau: float = 0.0
    max_iterations: int = 500
    tolerance: float = 1e-8
    family: FeasibleFamily | None = None
    # group partition for the group penalty; None falls back to the family's
    # groups (group_k) or to singletons
    groups: tuple | None = None

    def __post_init__(self):
        for name in ("lambda1", "lambda_group", "gamma_temporal", "tau"):
            if not getattr(self, name) >= 0:
                raise InvalidArgumentError(f"{name} must be nonnegative")
        if not self.tolerance > 0:
            raise InvalidArgumentError("tolerance must be positive")
        if self.max_iterations < 1:
            raise InvalidArgumentError("max_iterations must be positive")

    def penalty_groups(self, G):
        if self.groups is not None:
            return [list(g) for g in self.groups]
        if self.family is not None and self.family.kind == "group_k":
            return [list(g) for g in self.family.groups]
        return [[g] for g in range(G)]

    def to_dict(self):
        return {"lambda1": self.lambda1, "lambda_group": self.lambda_group,
                "gamma_temporal": self.gamma_temporal, "tau": self.tau,
                "max_iterations": self.max_iterations, "tolerance": self.tolerance,
                "family": None if self.family is None else self.family.to_dict(),
                "groups": None if self.groups is None else [list(g) for g in self.groups]}

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        if doc.get("family") is not None:
            doc["family"] = FeasibleFamily.from_dict(doc["family"])
        if doc.get("groups") is not None:
            doc["groups"] = tuple(tuple(g) for g in doc["groups"])
        known = cls.__dataclass_fields__
        return cls(**{k: v for k, v in doc.items() if k in known})


@dataclass
class RecoveryResult:
    alpha_hat: np.ndarray
    support: SupportSet
    residual_norm: float
    iterations: int
    measurements_used: int
    objective_trace: list = field(default_factory=list)
    residual_trace: list = field(default_factory=list)
    rank_deficient: bool = False
    early_exit: bool = False

    def to_dict(self):
        return {"schema": 1,
                "alpha_hat": [float(v) for v in self.alpha_hat],
                "support": list(self.support),
                "residual_norm": float(self.residual_norm),
                "iterations": int(self.iterations),
                "measurements_used": int(self.measurements_used),
                "objective_trace": [float(v) for v in self.objective_trace],
                "residual_trace": [float(v) for v in self.residual_trace],
                "rank_deficient": bool(self.rank_deficient),
                "early_exit": bool(self.early_exit)}

    @classmethod
    def from_dict(cls, doc):
        return cls(np.asarray(doc["alpha_hat"], dtype=float), SupportSet(doc["support"]),
                   doc["residual_norm"], doc["iterations"], doc["measurements_used"],
                   list(doc.get("objective_trace", [])), list(doc.get("residual_trace", [])),
                   doc.get("rank_deficient", False), doc.get("early_exit", False))

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def trace_csv(self):
        """Objective trace as CSV text (iteration, objective, residual_norm)."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["iteration", "objective", "residual_norm"])
        for i, obj in enumerate(self.objective_trace):
            res = self.residual_trace[i] if i < len(self.residual_trace) else ""
            writer.writerow([i + 1, repr(float(obj)), "" if res == "" else repr(float(res))])
        return buf.getvalue()


def _values(z):
    return z.values if isinstance(z, Sketch) else check_vector(z, "z")


def _checked_columns(M):
    M = check_matrix(M)
    norms = np.linalg.norm(M, axis=0)
    if np.any(norms == 0):
        raise DegenerateInputError("effective matrix has a zero column")
    return M, norms


def effective_matrix(A, Psi):
    """M = A Psi."""
    A_ = A.entries if isinstance(A, MeasurementOperator) else check_matrix(A, "A")
    P_ = Psi.entries if isinstance(Psi, StructuredDictionary) else check_matrix(Psi, "Psi")
    if A_.shape[1] != P_.shape[0]:
        raise InvalidArgumentError(f"A has {A_.shape[1]} columns, Psi has {P_.shape[0]} rows")
    return A_ @ P_


def _lstsq(M, z, support):
    sub = M[:, support]
    coef, _, rank, _ = np.linalg.lstsq(sub, z, rcond=None)
    return coef, rank < len(support)


def _embed(G, support, coef):
    alpha = np.zeros(G)
    alpha[list(support)] = coef
    return alpha


def _extendable(selected, family, G, k_max):
    """Boolean mask of atoms that can join ``selected`` within the family."""
    mask = np.ones(G, dtype=bool)
    mask[selected] = False
    if len(selected) >= k_max:
        return mask & False
    if family is None:
        return mask
    if family.kind == "unconstrained_k":
        return mask if len(selected) < family.k else mask & False
    if family.kind == "n_of_m":
        counts = np.bincount(np.asarray(selected, dtype=int) // family.M, minlength=G // family.M)
        return mask & np.repeat(counts < family.N, family.M)
    if family.kind == "motif_library":
        sel = set(selected)
        allowed = np.zeros(G, dtype=bool)
        for motif in family.motifs:
            if sel <= set(motif):
                allowed[list(motif)] = True
        return mask & allowed
    return mask


def omp_structured(z, M, k_max, family=None):
    """Orthogonal matching pursuit restricted to a feasible support family.

    Atoms are scored by absolute correlation of their normalized column with
    the residual.  For ``group_k`` whole groups are scored by the l2 norm of
    their members' correlations and added at once.
    """
    zv = _values(z)
    M, norms = _checked_columns(M)
    m, G = M.shape
    if zv.shape[0] != m:
        raise InvalidArgumentError("sketch length does not match rows of M")
    if not 1 <= k_max <= G:
        raise InvalidArgumentError("need 1 <= k_max <= G")
    if family is not None:
        family.validate(G)
    Mn = M / norms

    selected, coef = [], np.zeros(0)
    residual = zv.copy()
    res_norm = float(np.linalg.norm(residual))
    objective, residuals = [], []
    rank_deficient = False
    scale = max(res_norm, 1.0)

    while len(selected) < k_max and res_norm > OMP_RESIDUAL_STOP:
        corr = np.abs(Mn.T @ residual)
        if family is not None and family.kind == "group_k":
            chosen_groups = {gi for gi, g in enumerate(family.groups) if set(g) & set(selected)}
            if len(chosen_groups) >= family.k:
                break
            best, best_score = None, 0.0
            for gi, g in enumerate(family.groups):
                if gi in chosen_groups or len(selected) + len(g) > k_max:
                    continue
                score = float(np.linalg.norm(corr[list(g)]))
                if score > best_score:
                    best, best_score = gi, score
            if best is None or best_score <= 1e-12 * scale:
                break
            candidate = list(family.groups[best])
        else:
            allowed = _extendable(selected, family, G, k_max)
            if not allowed.any():
                break
            scores = np.where(allowed, corr, -1.0)
            j = int(np.argmax(scores))
            if scores[j] <= 1e-12 * scale:
                break
            candidate = [j]

        trial = selected + candidate
        trial_coef, deficient = _lstsq(M, zv, trial)
        trial_res = zv - M[:, trial] @ trial_coef
        trial_norm = float(np.linalg.norm(trial_res))
        if not trial_norm < res_norm:
            break
        selected, coef, residual, res_norm = trial, trial_coef, trial_res, trial_norm
        rank_deficient |= deficient
        objective.append(0.5 * res_norm**2)
        residuals.append(res_norm)

    alpha = _embed(G, selected, coef)
    return RecoveryResult(alpha, SupportSet(selected), res_norm, len(objective), m,
                          objective, residuals, rank_deficient)


def power_iteration(M, n_steps=100, tol=1e-10):
    """Largest eigenvalue of M^T M by power iteration."""
    G = M.shape[1]
    v = np.random.default_rng(0).standard_normal(G)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(n_steps):
        w = M.T @ (M @ v)
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        v = w / norm
        new = float(v @ (M.T @ (M @ v)))
        if abs(new - lam) <= tol * max(new, 1.0):
            lam = new
            break
        lam = new
    return lam


def soft_threshold(x, thresh):
    return np.sign(x) * np.maximum(np.abs(x) - thresh, 0.0)


def group_soft_threshold(x, thresh, groups):
    out = x.copy()
    for g in groups:
        norm = np.linalg.norm(x[g])
        out[g] = 0.0 if norm <= thresh else x[g] * (1.0 - thresh / norm)
    return out


def recovery_objective(alpha, z, M, config, previous_alpha=None, groups=None):
    """Sparse group-lasso objective with the optional temporal penalty."""
    groups = groups if groups is not None else config.penalty_groups(M.shape[1])
    value = 0.5 * float(np.sum((z - M @ alpha) ** 2))
    value += config.lambda1 * float(np.sum(np.abs(alpha)))
    if config.lambda_group:
        value += config.lambda_group * sum(float(np.linalg.norm(alpha[g])) for g in groups)
    if previous_alpha is not None and config.gamma_temporal:
        value += config.gamma_temporal * float(np.sum((alpha - previous_alpha) ** 2))
    return value


def prox_group_lasso(z, M, config, warm_start=None, previous_alpha=None):
    """Monotone accelerated proximal gradient (MFISTA) for

        1/2 ||z - M a||^2 + l1 ||a||_1 + lG sum_g ||a_g||_2 + gamma ||a - a_prev||^2

    The prox is elementwise soft-thresholding followed by group
    soft-thresholding.  Each iterate is the better of the new prox point and
    the previous iterate, so the recorded objective never increases.
    """
    zv = _values(z)
    M, _ = _checked_columns(M)
    m, G = M.shape
    if zv.shape[0] != m:
        raise InvalidArgumentError("sketch length does not match rows of M")
    prev = None if previous_alpha is None else check_vector(previous_alpha, "previous_alpha", G)
    gamma = config.gamma_temporal if prev is not None else 0.0
    groups = config.penalty_groups(G)

    with np.errstate(over="ignore", invalid="ignore"):
        L = power_iteration(M) + 2.0 * config.gamma_temporal
    if not math.isfinite(L):
        raise NumericalFailureError("non-finite Lipschitz estimate", 0)
    if L <= 0:
        raise DegenerateInputError("zero Lipschitz constant")

    def grad(a):
        g = M.T @ (M @ a - zv)
        if gamma:
            g = g + 2.0 * gamma * (a - prev)
        return g

    def prox(v):
        v = soft_threshold(v, config.lambda1 / L)
        if config.lambda_group:
            v = group_soft_threshold(v, config.lambda_group / L, groups)
        return v

    def F(a):
        return recovery_objective(a, zv, M, config, prev, groups)

    x = np.zeros(G) if warm_start is None else check_vector(warm_start, "warm_start", G).copy()
    y, t = x.copy(), 1.0
    fx = F(x)
    trace, residuals = [], []
    it = 0
    for it in range(1, config.max_iterations + 1):
        zk = prox(y - grad(y) / L)
        if not np.all(np.isfinite(zk)):
            raise NumericalFailureError("non-finite iterate in proximal solver", it)
        fz = F(zk)
        if not math.isfinite(fz):
            raise NumericalFailureError("non-finite objective in proximal solver", it)
        accepted = fz <= fx
        x_new, f_new = (zk, fz) if accepted else (x, fx)
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = x_new + (t / t_next) * (zk - x_new) + ((t - 1.0) / t_next) * (x_new - x)
        change = fx - f_new
        x, fx, t = x_new, f_new, t_next
        trace.append(fx)
        residuals.append(float(np.linalg.norm(zv - M @ x)))
        if accepted and change <= config.tolerance * max(abs(fx), 1e-300):
            break

    support = threshold_support(x, config)
    return RecoveryResult(x, support, float(np.linalg.norm(zv - M @ x)), it, m, trace, residuals)


def threshold_support(alpha, config):
    """Keep |alpha_g| > tau, then project the survivors onto the family."""
    alpha = check_vector(alpha, "alpha")
    survivors = np.abs(alpha) > config.tau
    if config.family is None:
        return SupportSet.from_mask(survivors)
    projected = project_support(np.where(survivors, alpha, 0.0), config.family)
    return SupportSet(g for g in projected if survivors[g])


def recover_incremental(z, M, previous, delta_max, config):
    """Two-stage update from the previous support.

    Stage 1 refits on the previous support and exits early when the relative
    residual is within ``config.tolerance``.  Stage 2 greedily adds up to
    ``delta_max`` atoms against the residual, refits on the union and drops
    atoms whose refit coefficient is at most ``config.tau``.  At most
    ``delta_max`` atoms enter and at most ``delta_max`` leave.
    """
    zv = _values(z)
    M, norms = _checked_columns(M)
    m, G = M.shape
    if zv.shape[0] != m:
        raise InvalidArgumentError("sketch length does not match rows of M")
    if delta_max < 0:
        raise InvalidArgumentError("delta_max must be nonnegative")
    family = config.family
    base = list(previous.support)
    if family is not None and not is_admissible(base, family, G):
        raise InvalidArgumentError("previous support is not family-admissible")

    def finish(support, early):
        support = list(support)
        coef, deficient = _lstsq(M, zv, support) if support else (np.zeros(0), False)
        alpha = _embed(G, support, coef)
        res = float(np.linalg.norm(zv - M @ alpha))
        return RecoveryResult(alpha, SupportSet(support), res, 1 if early else 2, m,
                              [0.5 * res**2], [res], deficient, early)

    coef, _ = _lstsq(M, zv, base) if base else (np.zeros(0), False)
    residual = zv - M[:, base] @ coef if base else zv.copy()
    if delta_max == 0 or np.linalg.norm(residual) <= config.tolerance * np.linalg.norm(zv):
        return finish(base, True)

    Mn = M / norms
    union, added = list(base), []
    for _ in range(delta_max):
        if np.linalg.norm(residual) <= OMP_RESIDUAL_STOP:
            break
        corr = np.abs(Mn.T @ residual)
        corr[union] = -1.0
        if family is not None and family.kind == "motif_library":
            reachable = np.zeros(G, dtype=bool)
            for motif in family.motifs:
                if len(set(base) - set(motif)) <= delta_max:
                    reachable[list(motif)] = True
            corr[~reachable] = -1.0
        j = int(np.argmax(corr))
        if corr[j] <= 0:
            break
        union.append(j)
        added.append(j)
        coef, _ = _lstsq(M, zv, union)
        residual = zv - M[:, union] @ coef

    alpha_u = _embed(G, union, coef)
    support = set(threshold_support(alpha_u, config))
    dropped = sorted(set(base) - support, key=lambda g: (-abs(alpha_u[g]), g))
    excess = len(dropped) - delta_max
    if excess > 0:
        support |= set(dropped[:excess])
    if family is not None and not is_admissible(support, family, G):
        return finish(base, False)
    return finish(sorted(support), False)


class ErrorCurve(BaseEstimator):
    """Nonincreasing fit of recovery error against measurement budget.

    Means per distinct ``m`` are fitted by isotonic regression and
    interpolated linearly between budgets.
    """

    def fit(self, m, errors):
        m = check_vector(m, "m")
        errors = check_vector(errors, "errors", m.shape[0])
        grid = np.unique(m)
        if grid.shape[0] < 3:
            raise InvalidArgumentError("need at least 3 distinct m values")
        means = np.array([errors[m == v].mean() for v in grid])
        self.iso_ = IsotonicRegression(increasing=False, out_of_bounds="clip").fit(grid, means)
        self.m_grid_ = grid
        self.mean_errors_ = means
        self.curve_ = self.iso_.predict(grid)
        return self

    def predict(self, m):
        check_is_fitted(self, "iso_")
        return self.iso_.predict(np.atleast_1d(np.asarray(m, dtype=float)))

    def slope(self, m_base):
        """Centered finite difference of the fitted curve at ``m_base``.

        The half-width is the smallest grid spacing; the stencil is clipped
        to the fitted range.
        """
        check_is_fitted(self, "iso_")
        h = float(np.min(np.diff(self.m_grid_)))
        lo = max(m_base - h, self.m_grid_[0])
        hi = min(m_base + h, self.m_grid_[-1])
        if hi <= lo:
            return 0.0
        f_lo, f_hi = self.predict([lo, hi])
        return float(min((f_hi - f_lo) / (hi - lo), 0.0))


def fit_error_curve(trials):
    """Fit an :class:`ErrorCurve` to ``(m, recovery_error)`` pairs."""
    trials = list(trials)
    if not trials:
        raise InvalidArgumentError("no trials supplied")
    m, errors = zip(*trials)
    return ErrorCurve().fit(np.asarray(m, dtype=float), np.asarray(errors, dtype=float))
