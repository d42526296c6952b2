"""Structured units, the unit dictionary, hardware-feasible support families
and support-set algebra (projection, drift, precision/recall)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from ._validation import InvalidArgumentError, check_vector

UNIT_KINDS = ("block", "head", "channel_group", "ffn_slice", "tile")
DICTIONARY_ENSEMBLES = ("identity_padded", "gaussian_normalized")
FAMILY_KINDS = ("unconstrained_k", "group_k", "n_of_m", "motif_library")


class SupportSet(tuple):
    """Sorted, duplicate-free tuple of unit ids."""

    def __new__(cls, members=()):
        return super().__new__(cls, sorted({int(m) for m in members}))

    def __repr__(self):
        return f"SupportSet({list(self)})"

    def to_mask(self, G):
        mask = np.zeros(G, dtype=bool)
        mask[list(self)] = True
        return mask

    @classmethod
    def from_mask(cls, mask):
        return cls(np.flatnonzero(mask))


@dataclass(frozen=True)
class StructuredUnit:
    id: int
    kind: str = "head"
    weight: float = 0.0

    def __post_init__(self):
        if self.kind not in UNIT_KINDS:
            raise InvalidArgumentError(f"unknown unit kind {self.kind!r}")
        if not self.weight >= 0:
            raise InvalidArgumentError("unit weight must be nonnegative")


def uniform_units(G, kind="head"):
    return tuple(StructuredUnit(g, kind, 1.0 / G) for g in range(G))


@dataclass(frozen=True, eq=False)
class StructuredDictionary:
    """Column-normalized D x G dictionary with unit and group metadata."""

    entries: np.ndarray
    units: tuple = ()
    groups: tuple = ()

    def __post_init__(self):
        entries = np.array(self.entries, dtype=np.float64)
        if entries.ndim != 2 or min(entries.shape) < 1:
            raise InvalidArgumentError("dictionary entries must be a non-empty matrix")
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)
        D, G = entries.shape
        norms = np.linalg.norm(entries, axis=0)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise InvalidArgumentError("dictionary columns must have unit norm")

        units = tuple(self.units) or uniform_units(G)
        if [u.id for u in units] != list(range(G)):
            raise InvalidArgumentError("unit ids must be 0..G-1 in order")
        if abs(sum(u.weight for u in units) - 1.0) > 1e-9:
            raise InvalidArgumentError("unit weights must sum to 1")
        object.__setattr__(self, "units", units)

        groups = tuple(tuple(int(i) for i in g) for g in self.groups) or tuple(
            (g,) for g in range(G))
        flat = sorted(i for g in groups for i in g)
        if flat != list(range(G)) or any(len(g) == 0 for g in groups):
            raise InvalidArgumentError("groups must partition [0, G)")
        object.__setattr__(self, "groups", groups)

    @property
    def D(self):
        return self.entries.shape[0]

    @property
    def G(self):
        return self.entries.shape[1]

    def __eq__(self, other):
        if not isinstance(other, StructuredDictionary):
            return NotImplemented
        return (np.array_equal(self.entries, other.entries)
                and self.units == other.units and self.groups == other.groups)

    def to_dict(self):
        return {
            "schema": 1,
            "D": self.D,
            "G": self.G,
            "groups": [list(g) for g in self.groups],
            "entries": [float(v) for v in self.entries.ravel(order="C")],
            "units": [{"id": u.id, "kind": u.kind, "weight": u.weight} for u in self.units],
        }

    @classmethod
    def from_dict(cls, doc):
        D, G = int(doc["D"]), int(doc["G"])
        entries = np.asarray(doc["entries"], dtype=np.float64)
        if entries.size != D * G:
            raise InvalidArgumentError("entries length does not match D*G")
        units = tuple(StructuredUnit(int(u["id"]), u["kind"], float(u["weight"]))
                      for u in doc["units"])
        return cls(entries.reshape(D, G), units, tuple(tuple(g) for g in doc["groups"]))

    def to_json(self):
        # repr-based float encoding is shortest round-trip, hence bit-exact
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def consecutive_groups(G, group_size):
    if group_size < 1 or G % group_size:
        raise InvalidArgumentError(f"group_size={group_size} must divide G={G}")
    return tuple(tuple(range(i, i + group_size)) for i in range(0, G, group_size))


def build_synthetic_dictionary(D, G, group_size=1, ensemble="gaussian_normalized", seed=0):
    """Build a synthetic unit dictionary.

    ``identity_padded`` stacks the G x G identity on top of zero rows;
    ``gaussian_normalized`` draws i.i.d. standard normal entries and
    normalizes every column.
    """
    if D < 1 or G < 1:
        raise InvalidArgumentError("D and G must be positive")
    groups = consecutive_groups(G, group_size)
    if ensemble == "identity_padded":
        if D < G:
            raise InvalidArgumentError("identity_padded requires D >= G")
        entries = np.zeros((D, G))
        entries[:G, :G] = np.eye(G)
    elif ensemble == "gaussian_normalized":
        rng = np.random.default_rng(seed)
        entries = rng.standard_normal((D, G))
        entries /= np.linalg.norm(entries, axis=0)
    else:
        raise InvalidArgumentError(f"unknown dictionary ensemble {ensemble!r}")
    return StructuredDictionary(entries, uniform_units(G), groups)


@dataclass(frozen=True)
class FeasibleFamily:
    """A hardware-admissible support family.

    Membership is downward closed: a support is admissible when it fits
    inside some maximal element of the family (``k`` atoms, ``k`` whole
    groups, ``N`` per block of ``M``, or a library motif).
    """

    kind: str
    k: int = 0
    N: int = 0
    M: int = 0
    groups: tuple = ()
    motifs: tuple = field(default=())

    def __post_init__(self):
        if self.kind not in FAMILY_KINDS:
            raise InvalidArgumentError(f"unknown family kind {self.kind!r}")
        if self.kind in ("unconstrained_k", "group_k") and self.k < 1:
            raise InvalidArgumentError("k must be >= 1")
        if self.kind == "group_k" and not self.groups:
            raise InvalidArgumentError("group_k needs a group partition")
        if self.kind == "n_of_m" and not 0 < self.N <= self.M:
            raise InvalidArgumentError("n_of_m needs 0 < N <= M")
        if self.kind == "motif_library":
            if not self.motifs:
                raise InvalidArgumentError("motif library must be non-empty")
            object.__setattr__(self, "motifs", tuple(SupportSet(m) for m in self.motifs))
        object.__setattr__(self, "groups", tuple(tuple(int(i) for i in g) for g in self.groups))

    @classmethod
    def unconstrained_k(cls, k):
        return cls("unconstrained_k", k=int(k))

    @classmethod
    def group_k(cls, k_groups, groups):
        return cls("group_k", k=int(k_groups), groups=tuple(groups))

    @classmethod
    def n_of_m(cls, N, M):
        return cls("n_of_m", N=int(N), M=int(M))

    @classmethod
    def motif_library(cls, motifs):
        return cls("motif_library", motifs=tuple(motifs))

    def validate(self, G):
        if self.kind == "n_of_m" and G % self.M:
            raise InvalidArgumentError(f"M={self.M} must divide G={G}")
        if self.kind == "group_k":
            flat = sorted(i for g in self.groups for i in g)
            if flat != list(range(G)):
                raise InvalidArgumentError("family groups must partition [0, G)")
        if self.kind == "motif_library":
            if any(m and (m[0] < 0 or m[-1] >= G) for m in self.motifs):
                raise InvalidArgumentError("motif members must lie in [0, G)")

    def max_support_size(self, G):
        if self.kind == "unconstrained_k":
            return min(self.k, G)
        if self.kind == "group_k":
            sizes = sorted((len(g) for g in self.groups), reverse=True)
            return sum(sizes[: self.k])
        if self.kind == "n_of_m":
            return self.N * (G // self.M)
        return max(len(m) for m in self.motifs)

    def size(self, G):
        """Number of maximal supports in the family (|C| in the sample bound)."""
        if self.kind == "unconstrained_k":
            return math.comb(G, min(self.k, G))
        if self.kind == "group_k":
            return math.comb(len(self.groups), min(self.k, len(self.groups)))
        if self.kind == "n_of_m":
            return math.comb(self.M, self.N) ** (G // self.M)
        return len(set(self.motifs))

    def to_dict(self):
        doc = {"kind": self.kind}
        if self.kind in ("unconstrained_k", "group_k"):
            doc["k"] = self.k
        if self.kind == "group_k":
            doc["groups"] = [list(g) for g in self.groups]
        if self.kind == "n_of_m":
            doc.update(N=self.N, M=self.M)
        if self.kind == "motif_library":
            doc["motifs"] = [list(m) for m in self.motifs]
        return doc

    @classmethod
    def from_dict(cls, doc):
        kind = doc["kind"]
        if kind == "unconstrained_k":
            return cls.unconstrained_k(doc["k"])
        if kind == "group_k":
            return cls.group_k(doc["k"], doc["groups"])
        if kind == "n_of_m":
            return cls.n_of_m(doc["N"], doc["M"])
        if kind == "motif_library":
            return cls.motif_library(doc["motifs"])
        raise InvalidArgumentError(f"unknown family kind {kind!r}")


def _group_of(groups):
    owner = {}
    for gi, members in enumerate(groups):
        for i in members:
            owner[i] = gi
    return owner


def is_admissible(support, family, G):
    """Family-membership predicate."""
    support = SupportSet(support)
    if support and (support[0] < 0 or support[-1] >= G):
        return False
    if family.kind == "unconstrained_k":
        return len(support) <= family.k
    if family.kind == "group_k":
        owner = _group_of(family.groups)
        return len({owner[i] for i in support}) <= family.k
    if family.kind == "n_of_m":
        counts = np.bincount(np.asarray(support, dtype=int) // family.M,
                             minlength=G // family.M)
        return bool(np.all(counts <= family.N))
    return any(set(support) <= set(m) for m in family.motifs)


def _top_indices(scores, n):
    # stable sort on negated scores: ties resolve to the lowest index
    return np.argsort(-np.asarray(scores), kind="stable")[:n]


def project_support(alpha, family):
    """Project coefficient magnitudes onto a maximal member of ``family``."""
    alpha = check_vector(alpha, "alpha")
    G = alpha.shape[0]
    family.validate(G)
    if family.kind == "unconstrained_k":
        return SupportSet(_top_indices(np.abs(alpha), min(family.k, G)))
    if family.kind == "group_k":
        norms = [np.linalg.norm(alpha[list(g)]) for g in family.groups]
        chosen = _top_indices(norms, min(family.k, len(family.groups)))
        return SupportSet(i for gi in chosen for i in family.groups[gi])
    if family.kind == "n_of_m":
        blocks = np.abs(alpha).reshape(-1, family.M)
        members = []
        for b, row in enumerate(blocks):
            members.extend(b * family.M + _top_indices(row, family.N))
        return SupportSet(members)
    scores = [float(np.sum(alpha[list(m)] ** 2)) for m in family.motifs]
    return family.motifs[int(np.argmax(scores))]


def enumerate_family(family, G):
    """All maximal supports of ``family`` (for brute-force oracles on small G)."""
    family.validate(G)
    if family.kind == "unconstrained_k":
        return [SupportSet(c) for c in combinations(range(G), min(family.k, G))]
    if family.kind == "group_k":
        return [SupportSet(i for gi in c for i in family.groups[gi])
                for c in combinations(range(len(family.groups)), min(family.k, len(family.groups)))]
    if family.kind == "n_of_m":
        per_block = [[tuple(b * family.M + j for j in c)
                      for c in combinations(range(family.M), family.N)]
                     for b in range(G // family.M)]
        out = [()]
        for options in per_block:
            out = [prev + opt for prev in out for opt in options]
        return [SupportSet(s) for s in out]
    return list(dict.fromkeys(family.motifs))


def support_drift(current, previous):
    """Jaccard distance between consecutive supports; 0 when both are empty."""
    a, b = set(current), set(previous)
    union = a | b
    if not union:
        return 0.0
    return len(a ^ b) / len(union)


def support_prf(estimated, truth):
    """Set precision, recall and F1.

    An empty estimate has precision 1 by convention, so an empty estimate of an
    empty truth scores (1, 1, 1) and of a non-empty truth scores (1, 0, 0).
    """
    est, tru = set(estimated), set(truth)
    hits = len(est & tru)
    precision = hits / len(est) if est else 1.0
    recall = hits / len(tru) if tru else 1.0
    if not est and tru:
        return 1.0, 0.0, 0.0
    denom = precision + recall
    f1 = 2 * precision * recall / denom if denom > 0 else 0.0
    return precision, recall, f1
