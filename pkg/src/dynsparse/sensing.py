"""Random measurement ensembles, the measurement equation, and conditioning
diagnostics (mutual coherence, empirical RIP, sample-complexity bound)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.stats import ortho_group

from ._validation import (CapacityError, DegenerateInputError, InvalidArgumentError,
                          check_matrix, check_vector, derive_seed)

ENSEMBLES = ("gaussian", "rademacher", "subsampled_orthogonal")
EXHAUSTIVE_LIMIT = 10**6


@dataclass(frozen=True, eq=False)
class MeasurementOperator:
    entries: np.ndarray
    ensemble: str
    seed: int

    def __post_init__(self):
        entries = check_matrix(self.entries, "entries").copy()
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)
        if self.ensemble not in ENSEMBLES:
            raise InvalidArgumentError(f"unknown ensemble {self.ensemble!r}")

    @property
    def m(self):
        return self.entries.shape[0]

    @property
    def D(self):
        return self.entries.shape[1]

    @classmethod
    def identity(cls, D):
        """The m = D subsampled-orthogonal operator in canonical row order."""
        return cls(np.eye(D), "subsampled_orthogonal", 0)

    def __eq__(self, other):
        if not isinstance(other, MeasurementOperator):
            return NotImplemented
        return (self.ensemble == other.ensemble and self.seed == other.seed
                and np.array_equal(self.entries, other.entries))

    def to_dict(self):
        return {"schema": 1, "ensemble": self.ensemble, "seed": self.seed,
                "m": self.m, "D": self.D,
                "entries": [float(v) for v in self.entries.ravel()]}

    @classmethod
    def from_dict(cls, doc):
        entries = np.asarray(doc["entries"], dtype=np.float64).reshape(int(doc["m"]), int(doc["D"]))
        return cls(entries, doc["ensemble"], int(doc["seed"]))

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class Sketch:
    values: np.ndarray
    noise_sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "values", check_vector(self.values, "values"))
        if not self.noise_sigma >= 0:
            raise InvalidArgumentError("noise_sigma must be nonnegative")

    @property
    def m(self):
        return self.values.shape[0]


def draw_operator(ensemble, m, D, seed):
    """Draw an m x D sensing matrix; deterministic in ``(ensemble, m, D, seed)``."""
    if m < 1 or D < 1:
        raise InvalidArgumentError("m and D must be positive")
    rng = np.random.default_rng(derive_seed("operator", ensemble, m, D, seed))
    if ensemble == "gaussian":
        entries = rng.standard_normal((m, D)) / math.sqrt(m)
    elif ensemble == "rademacher":
        entries = rng.choice([-1.0, 1.0], size=(m, D)) / math.sqrt(m)
    elif ensemble == "subsampled_orthogonal":
        if m > D:
            raise InvalidArgumentError("subsampled_orthogonal requires m <= D")
        Q = ortho_group.rvs(D, random_state=rng) if D > 1 else np.ones((1, 1))
        rows = np.sort(rng.choice(D, size=m, replace=False))
        entries = Q[rows] * math.sqrt(D / m)
    else:
        raise InvalidArgumentError(f"unknown ensemble {ensemble!r}")
    return MeasurementOperator(entries, ensemble, int(seed))


def measure(A, u, noise_sigma=0.0, seed=0):
    """z = A u + eps with eps ~ N(0, noise_sigma^2 I), seeded."""
    u = check_vector(u, "u", A.D)
    if noise_sigma < 0:
        raise InvalidArgumentError("noise_sigma must be nonnegative")
    z = A.entries @ u
    if noise_sigma > 0:
        rng = np.random.default_rng(derive_seed("noise", seed))
        z = z + noise_sigma * rng.standard_normal(A.m)
    return Sketch(z, float(noise_sigma))


def mutual_coherence(M):
    """Largest absolute inner product between distinct normalized columns."""
    M = check_matrix(M)
    if M.shape[1] < 2:
        raise InvalidArgumentError("coherence needs at least two columns")
    norms = np.linalg.norm(M, axis=0)
    if np.any(norms == 0):
        raise DegenerateInputError("matrix has a zero column")
    Mn = M / norms
    gram = np.abs(Mn.T @ Mn)
    np.fill_diagonal(gram, 0.0)
    return float(min(gram.max(), 1.0))


def coherence_sparsity_bound(mu):
    """Largest integer k with k < (1 + 1/mu) / 2."""
    if not mu > 0:
        raise InvalidArgumentError("mu must be positive")
    limit = 0.5 * (1.0 + 1.0 / mu)
    k = math.ceil(limit) - 1
    return max(int(k), 0)


def sample_complexity(k, G, family_size, rho, C=1.0, delta=0.5):
    """Measurements sufficient for structured RIP over a support family (nats)."""
    if not 1 <= k <= G:
        raise InvalidArgumentError(f"need 1 <= k <= G, got k={k}, G={G}")
    if family_size < 1 or not 0 < rho < 1 or C <= 0 or not 0 < delta <= 1:
        raise InvalidArgumentError("invalid family_size, rho, C or delta")
    bound = C * delta**-2 * (k * math.log(math.e * G / k) + math.log(family_size)
                             + math.log(1.0 / rho))
    # slack absorbs rounding in sums that are integral in exact arithmetic
    return int(math.ceil(bound - 1e-9))


def _rip_of(M, support):
    s = np.linalg.svd(M[:, support], compute_uv=False)
    return max(1.0 - s[-1] ** 2, s[0] ** 2 - 1.0)


def empirical_rip(M, k, n_trials=200, seed=0, exhaustive=False):
    """Empirical restricted isometry constant of order ``k``.

    Sampled mode draws ``n_trials`` random supports (trial ``i`` seeded by
    ``(seed, i)``); exhaustive mode scans every support and upper-bounds it.
    """
    M = check_matrix(M)
    G = M.shape[1]
    if not 1 <= k <= G:
        raise InvalidArgumentError("need 1 <= k <= columns(M)")
    if exhaustive:
        if math.comb(G, k) > EXHAUSTIVE_LIMIT:
            raise CapacityError(f"C({G},{k}) exceeds {EXHAUSTIVE_LIMIT} supports")
        supports = combinations(range(G), k)
    else:
        supports = (np.random.default_rng(derive_seed("rip", seed, i)).choice(G, k, replace=False)
                    for i in range(n_trials))
    return float(max(_rip_of(M, list(S)) for S in supports))
