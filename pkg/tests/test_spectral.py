from itertools import combinations

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, strategies as st

from conftest import expand
from mlcollapse.errors import MatrixError
from mlcollapse.label_space import LabelDistribution, balanced, class_counts, group_total, multiplicity_one_imbalance, random_distribution
from mlcollapse.spectral import (
    centered_trace,
    centering_projector,
    exchangeable_kappa,
    helmert_basis,
    kappa,
    second_moment,
    spectrum,
)
from test_label_space import distributions


def brute_G(dist, m):
    """Average of indicator outer products over the expanded sample list."""
    K = dist.K
    ys = []
    for mm, S in expand(dist):
        if mm == m:
            y = np.zeros(K)
            y[list(S)] = 1
            ys.append(np.outer(y, y))
    return np.mean(ys, axis=0)


def oracle_restricted_eigs(G):
    """Restricted spectrum via a QR basis of range(Pi) and scipy's eigensolver."""
    K = G.shape[0]
    Q, _ = np.linalg.qr(centering_projector(K)[:, : K - 1])
    return scipy.linalg.eigh(Q.T @ G @ Q, eigvals_only=True)


def uniform(K, m):
    return LabelDistribution(K, {(m, S): 1 for S in combinations(range(K), m)})


BLOCK = LabelDistribution(4, {(2, (0, 1)): 5, (2, (2, 3)): 5})


def test_helmert_basis_is_orthonormal_and_centered():
    for K in range(2, 12):
        Q = helmert_basis(K)
        assert Q.shape == (K, K - 1)
        np.testing.assert_allclose(Q.T @ Q, np.eye(K - 1), atol=1e-14)
        np.testing.assert_allclose(np.ones(K) @ Q, 0, atol=1e-14)


def test_second_moment_examples():
    np.testing.assert_allclose(second_moment(uniform(4, 1), 1), np.eye(4) / 4, atol=1e-15)
    G = second_moment(uniform(4, 2), 2)
    np.testing.assert_allclose(np.diag(G), 0.5, atol=1e-15)
    np.testing.assert_allclose(G[~np.eye(4, dtype=bool)], 1 / 6, atol=1e-15)
    block = np.zeros((4, 4))
    block[:2, :2] = block[2:, 2:] = 0.5
    np.testing.assert_allclose(second_moment(BLOCK, 2), block, atol=1e-15)


@given(distributions())
def test_second_moment_matches_bruteforce(d):
    for m in d.multiplicities:
        G = second_moment(d, m)
        np.testing.assert_allclose(G, brute_G(d, m), atol=1e-14)
        np.testing.assert_allclose(np.diag(G), class_counts(d, m) / group_total(d, m), atol=1e-15)
        off = G - np.minimum(np.diag(G)[:, None], np.diag(G)[None, :])
        assert np.all(off <= 1e-15) and np.all(G >= 0)


def test_kappa_examples():
    assert kappa(second_moment(uniform(4, 1), 1), 4)[0] == pytest.approx(0.25, abs=1e-10)
    k2 = kappa(second_moment(uniform(4, 2), 2), 4)[0]
    assert k2 == pytest.approx(1 / 3, abs=1e-10)
    assert k2 == pytest.approx(exchangeable_kappa(4, 2), abs=1e-10)


def test_block_distribution_null_direction():
    sp = spectrum(BLOCK, 2)
    assert sp.kappa <= 1e-12
    assert sp.classification() == "degenerate (iii)"
    B = centering_projector(4) @ sp.G @ centering_projector(4)
    within = np.array([1.0, -1, 0, 0]) / np.sqrt(2)
    assert within @ B @ within == pytest.approx(0.0, abs=1e-15)
    # the reported direction lies in the span of the two within-block contrasts
    span = np.array([[1.0, -1, 0, 0], [0, 0, 1, -1]]).T / np.sqrt(2)
    d = sp.min_direction
    np.testing.assert_allclose(span @ (span.T @ d), d, atol=1e-10)
    # the between-block contrast is the top direction, not a null one
    x = np.array([1.0, 1, -1, -1])
    assert x @ B @ x == pytest.approx(4.0, abs=1e-12)


def test_near_degenerate_classification():
    near = LabelDistribution(4, {(2, (0, 1)): 100000, (2, (2, 3)): 100000, (2, (0, 2)): 1, (2, (0, 3)): 1})
    assert spectrum(near, 2).classification() == "near-degenerate (ii)"
    assert spectrum(balanced(4, 3), 1).classification() == "spectral gap (i)"


def test_centered_trace_examples():
    t, ok = centered_trace(second_moment(BLOCK, 2), 4, 2)
    assert ok and t == pytest.approx(1.0, abs=1e-12)
    d10 = multiplicity_one_imbalance(10, 3100, 200, 0.1)
    t, ok = centered_trace(second_moment(d10, 1), 10, 1)
    assert ok and t == pytest.approx(0.9, abs=1e-12)
    d6 = random_distribution(np.random.default_rng(3), 6, [3])
    G = brute_G(d6, 3)
    P = centering_projector(6)
    assert np.trace(P @ G @ P) == pytest.approx(1.5, abs=1e-12)
    assert centered_trace(second_moment(d6, 3), 6, 3)[0] == pytest.approx(1.5, abs=1e-12)


def test_imbalanced_kappa_logged():
    """m=1 under 10:1 imbalance; the value is pinned against an independent eigensolver."""
    d = multiplicity_one_imbalance(10, 3100, 200, 0.1)
    sp = spectrum(d, 1)
    ref = oracle_restricted_eigs(second_moment(d, 1))
    assert sp.kappa == pytest.approx(ref[0], abs=1e-13)
    p = class_counts(d, 1) / group_total(d, 1)
    # interlacing for a rank-one-projected diagonal: kappa lies between the two smallest p
    assert p.min() - 1e-15 <= sp.kappa <= np.sort(p)[1] + 1e-15
    print(f"kappa_1 at ratio 0.1: {sp.kappa!r}")


def test_asymmetric_rejected():
    G = np.eye(3)
    G[0, 1] = 0.5
    with pytest.raises(MatrixError):
        kappa(G, 3)
    with pytest.raises(MatrixError):
        kappa(np.eye(4), 3)


@given(distributions(kmin=3, kmax=9))
def test_spectrum_invariants(d):
    for m in d.multiplicities:
        sp = spectrum(d, m)
        K = d.K
        ref = oracle_restricted_eigs(sp.G)
        np.testing.assert_allclose(sp.eigenvalues, np.where(np.abs(ref) <= 1e-10, 0.0, ref), atol=1e-12)
        assert abs(sp.centered_trace - m * (K - m) / K) <= 1e-12
        assert 0.0 <= sp.kappa <= sp.centered_trace / (K - 1) + 1e-14
        v = sp.min_direction
        assert abs(np.linalg.norm(v) - 1) < 1e-12 and abs(v.sum()) < 1e-12
        assert v @ sp.G @ v == pytest.approx(sp.kappa, abs=1e-12)


@given(distributions(kmin=3, kmax=8), st.randoms(use_true_random=False))
def test_kappa_permutation_invariant(d, rnd):
    perm = list(range(d.K))
    rnd.shuffle(perm)
    p = d.permuted(perm)
    for m in d.multiplicities:
        assert spectrum(p, m).kappa == pytest.approx(spectrum(d, m).kappa, abs=1e-12)


@given(st.integers(3, 10).flatmap(lambda K: st.tuples(st.just(K), st.integers(1, K - 1))))
def test_exchangeable_closed_form(Km):
    K, m = Km
    if len(list(combinations(range(K), m))) > 300:
        return
    assert spectrum(uniform(K, m), m).kappa == pytest.approx(exchangeable_kappa(K, m), abs=1e-12)
