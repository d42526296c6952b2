import itertools
import json

import numpy as np
import pytest

from dynsparse import (FeasibleFamily, InvalidArgumentError, StructuredDictionary, SupportSet,
                       build_synthetic_dictionary, enumerate_family, is_admissible,
                       mutual_coherence, project_support, support_drift, support_prf)
from dynsparse.dictionary import StructuredUnit, uniform_units


def test_identity_padded_small():
    Psi = build_synthetic_dictionary(4, 4, 2, "identity_padded", 0)
    np.testing.assert_array_equal(Psi.entries, np.eye(4))
    assert Psi.groups == ((0, 1), (2, 3))


@pytest.mark.parametrize("ensemble,D,G", [("identity_padded", 10, 6),
                                          ("gaussian_normalized", 5, 9)])
def test_unit_columns(ensemble, D, G):
    Psi = build_synthetic_dictionary(D, G, 1, ensemble, 3)
    np.testing.assert_allclose(np.linalg.norm(Psi.entries, axis=0), 1.0, atol=1e-9)


def test_gaussian_dictionary_coherence_regression():
    Psi = build_synthetic_dictionary(64, 128, 4, "gaussian_normalized", 7)
    gram = np.abs(Psi.entries.T @ Psi.entries)
    np.fill_diagonal(gram, 0.0)
    assert gram.max() < 0.6
    assert mutual_coherence(Psi.entries) == pytest.approx(0.44508032006955206, abs=1e-12)


def test_dictionary_validation():
    with pytest.raises(InvalidArgumentError):
        build_synthetic_dictionary(3, 4, 1, "identity_padded")
    with pytest.raises(InvalidArgumentError):
        build_synthetic_dictionary(4, 4, 3)
    with pytest.raises(InvalidArgumentError):
        build_synthetic_dictionary(4, 4, 1, "bogus")
    with pytest.raises(InvalidArgumentError):
        StructuredDictionary(np.ones((2, 2)), uniform_units(2), ((0,), (1,)))
    with pytest.raises(InvalidArgumentError):
        StructuredUnit(0, "neuron", 0.1)


def test_json_round_trip_is_bit_exact():
    Psi = build_synthetic_dictionary(7, 12, 3, "gaussian_normalized", 11)
    doc = json.loads(Psi.to_json())
    assert doc["schema"] == 1 and len(doc["entries"]) == 84
    back = StructuredDictionary.from_json(Psi.to_json())
    assert back == Psi
    assert back.entries.tobytes() == Psi.entries.tobytes()


def test_project_support_examples():
    assert project_support([3, 1, -2, 0.5], FeasibleFamily.n_of_m(2, 4)) == SupportSet([0, 2])
    alpha = np.array([0, 4.0, 0, -2, 0, 1])
    fam = FeasibleFamily.unconstrained_k(3)
    assert project_support(alpha, fam) == SupportSet([1, 3, 5])


def test_project_support_ties_lowest_index():
    assert project_support(np.ones(6), FeasibleFamily.unconstrained_k(2)) == SupportSet([0, 1])


def test_project_support_motif_matches_enumeration():
    rng = np.random.default_rng(3)
    alpha = rng.standard_normal(8)
    motifs = [(0, 1), (2, 3, 4), (5,), (1, 6, 7), (0, 4, 7)]
    fam = FeasibleFamily.motif_library(motifs)
    best = max(motifs, key=lambda m: np.sum(alpha[list(m)] ** 2))
    assert project_support(alpha, fam) == SupportSet(best)


def test_project_support_group_k():
    groups = ((0, 1), (2, 3), (4, 5))
    fam = FeasibleFamily.group_k(1, groups)
    assert project_support([0.1, 0.1, 2, 0, 0.5, 0.5], fam) == SupportSet([2, 3])


def test_membership_predicate():
    G = 8
    assert is_admissible([0, 1, 5], FeasibleFamily.n_of_m(2, 4), G)
    assert not is_admissible([0, 1, 2], FeasibleFamily.n_of_m(2, 4), G)
    fam = FeasibleFamily.group_k(1, ((0, 1, 2, 3), (4, 5, 6, 7)))
    assert is_admissible([4, 6], fam, G) and not is_admissible([3, 4], fam, G)
    lib = FeasibleFamily.motif_library([(0, 2, 4)])
    assert is_admissible([2, 4], lib, G) and not is_admissible([1], lib, G)
    assert not is_admissible([8], FeasibleFamily.unconstrained_k(1), G)


def test_family_sizes_match_enumeration():
    G = 8
    cases = [FeasibleFamily.unconstrained_k(3), FeasibleFamily.n_of_m(2, 4),
             FeasibleFamily.group_k(2, ((0, 1), (2, 3), (4, 5), (6, 7))),
             FeasibleFamily.motif_library([(0, 1), (2,), (0, 1)])]
    for fam in cases:
        members = enumerate_family(fam, G)
        assert len(members) == fam.size(G)
        assert all(is_admissible(S, fam, G) for S in members)


def test_family_round_trip_and_validation():
    for fam in (FeasibleFamily.unconstrained_k(2), FeasibleFamily.n_of_m(1, 2),
                FeasibleFamily.group_k(1, ((0,), (1,))), FeasibleFamily.motif_library([(1,)])):
        assert FeasibleFamily.from_dict(fam.to_dict()) == fam
    with pytest.raises(InvalidArgumentError):
        FeasibleFamily.n_of_m(3, 2)
    with pytest.raises(InvalidArgumentError):
        project_support(np.ones(6), FeasibleFamily.n_of_m(2, 4))
    with pytest.raises(InvalidArgumentError):
        FeasibleFamily("bogus")


def test_support_drift_examples():
    assert support_drift({1, 2, 3}, {1, 2, 3}) == 0.0
    assert support_drift({1, 2}, {3, 4}) == 1.0
    assert support_drift({1, 2, 3}, {2, 3, 4}) == 0.5
    assert support_drift(set(), set()) == 0.0


def test_support_prf_examples():
    assert support_prf({0, 3, 5}, {0, 3, 5}) == (1.0, 1.0, 1.0)
    assert support_prf({0, 1}, {0, 2}) == (0.5, 0.5, 0.5)
    assert support_prf(set(), set()) == (1.0, 1.0, 1.0)
    assert support_prf(set(), {1}) == (1.0, 0.0, 0.0)
    assert support_prf({1}, set()) == (0.0, 1.0, 0.0)


def test_unconstrained_projection_exhaustive_small():
    rng = np.random.default_rng(0)
    for G in range(2, 13, 2):
        alpha = rng.standard_normal(G)
        k = G // 2
        best = max(itertools.combinations(range(G), k), key=lambda S: np.sum(alpha[list(S)] ** 2))
        got = project_support(alpha, FeasibleFamily.unconstrained_k(k))
        assert np.sum(alpha[list(got)] ** 2) == pytest.approx(np.sum(alpha[list(best)] ** 2))


def test_support_mask_round_trip():
    S = SupportSet([5, 1, 1, 3])
    assert S == (1, 3, 5)
    assert SupportSet.from_mask(S.to_mask(7)) == S
