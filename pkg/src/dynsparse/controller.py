"""Uncertainty-driven sensing: entropy-adaptive measurement budgets, the
sensing cost, and the local stability gain of the feedback loop."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from ._validation import InvalidArgumentError
from .sensing import sample_complexity


@dataclass(frozen=True)
class ControllerConfig:
    m_base: int
    gamma: float = 0.0
    m_min: int = 1
    m_max: int | None = None
    beta_m: float = 0.0
    rho: float = 1.0

    def __post_init__(self):
        m_max = self.m_base if self.m_max is None else self.m_max
        object.__setattr__(self, "m_max", int(m_max))
        if not 1 <= self.m_min <= self.m_base <= self.m_max:
            raise InvalidArgumentError("need 1 <= m_min <= m_base <= m_max")
        if self.gamma < 0 or self.beta_m < 0:
            raise InvalidArgumentError("gamma and beta_m must be nonnegative")
        if self.rho < 1:
            raise InvalidArgumentError("rho must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        keys = ("m_base", "gamma", "m_min", "m_max", "beta_m", "rho")
        return cls(**{k: doc[k] for k in keys if k in doc})


@dataclass(frozen=True)
class StabilityReport:
    gain: float
    stable: bool
    gamma: float
    L_H: float
    m_base: int
    dG_dm: float


def predictive_entropy(p):
    """Shannon entropy in nats, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise InvalidArgumentError("p must be a non-empty vector")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise InvalidArgumentError("probabilities must be finite and nonnegative")
    total = p.sum()
    if abs(total - 1.0) > 1e-6:
        raise InvalidArgumentError(f"probabilities sum to {total}, not 1")
    if abs(total - 1.0) > 1e-9:
        p = p / total
    nz = p[p > 0]
    return float(max(-np.sum(nz * np.log(nz)), 0.0))


def adapt_budget(H, config):
    """m_t = clip(floor(m_base (1 + gamma H)), m_min, m_max)."""
    if H < 0:
        raise InvalidArgumentError("entropy must be nonnegative")
    raw = math.floor(config.m_base * (1.0 + config.gamma * H))
    return int(min(max(raw, config.m_min), config.m_max))


def sensing_cost(m, config):
    if m < 1:
        raise InvalidArgumentError("m must be positive")
    return config.beta_m * float(m) ** config.rho


def stability_gain(gamma, L_H, m_base, dG_dm):
    """|gamma L_H m_base dG/dm|; the loop is locally stable iff this is < 1."""
    if dG_dm > 0:
        warnings.warn("error curve slope is positive; expected a decreasing curve",
                      RuntimeWarning, stacklevel=2)
    gain = abs(gamma * L_H * m_base * dG_dm)
    return StabilityReport(gain, gain < 1.0, gamma, L_H, m_base, dG_dm)


def budget_admissible(m_t, k_t, G, family_size, rho, C=1.0, delta=0.5):
    return m_t >= sample_complexity(k_t, G, family_size, rho, C, delta)
