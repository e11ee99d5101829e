"""Label second moments and the centered spectral constant kappa_m.

kappa_m is the smallest eigenvalue of ``Pi G_m Pi`` restricted to the
sum-zero subspace ``range(Pi)``.  The restriction is done exactly by
compressing with an orthonormal Helmert basis of ``range(Pi)``, so the
all-ones direction never has to be identified numerically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import MatrixError
from .label_space import LabelDistribution, class_counts, group_total

#: eigenvalues this close to zero are reported as exactly zero
ZERO_EIG_TOL = 1e-10
#: kappa below this fraction of centered_trace fails the non-degeneracy gate
DEGENERACY_RTOL = 1e-10
#: kappa below this fraction of the mean restricted eigenvalue counts as "near-degenerate"
NEAR_DEGENERATE_RTOL = 1e-3


def centering_projector(K: int) -> np.ndarray:
    """``Pi = I - (1/K) 1 1^T``."""
    return np.eye(K) - np.full((K, K), 1.0 / K)


def helmert_basis(K: int) -> np.ndarray:
    """Orthonormal basis of ``range(Pi)`` as a ``K x (K-1)`` matrix.

    Column ``j`` (1-based) is ``(1, ..., 1, -j, 0, ..., 0) / sqrt(j (j+1))``
    with ``j`` leading ones.
    """
    Q = np.zeros((K, K - 1))
    for j in range(1, K):
        Q[:j, j - 1] = 1.0
        Q[j, j - 1] = -float(j)
        Q[:, j - 1] /= math.sqrt(j * (j + 1))
    return Q


def second_moment(dist: LabelDistribution, m: int) -> np.ndarray:
    """``G_m = sum_S p_{m,S} y_S y_S^T`` for the multiplicity-``m`` group."""
    K = dist.K
    N_m = group_total(dist, m)
    G = np.zeros((K, K))
    for S, r in dist.group(m).items():
        if r:
            idx = np.asarray(S)
            G[np.ix_(idx, idx)] += r
    return G / N_m


def _check_symmetric(G: np.ndarray, K: int, tol: float = 1e-12) -> np.ndarray:
    G = np.asarray(G, dtype=np.float64)
    if G.shape != (K, K):
        raise MatrixError(f"expected a {K}x{K} matrix, got shape {G.shape}")
    scale = max(1.0, float(np.abs(G).max()))
    if not np.allclose(G, G.T, rtol=0.0, atol=tol * scale):
        raise MatrixError("matrix is not symmetric")
    return 0.5 * (G + G.T)


def restricted_eigh(G: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of ``Pi G Pi`` on ``range(Pi)``, ascending.

    Returns ``(eigenvalues (K-1,), directions (K, K-1))`` with every direction
    a unit vector orthogonal to the all-ones vector.
    """
    G = _check_symmetric(G, K)
    Q = helmert_basis(K)
    evals, V = np.linalg.eigh(Q.T @ G @ Q)
    return evals, Q @ V


def kappa(G: np.ndarray, K: int) -> tuple[float, np.ndarray]:
    """Return ``(kappa, min_direction)`` for a symmetric ``K x K`` matrix."""
    evals, dirs = restricted_eigh(G, K)
    k = float(evals[0])
    if abs(k) <= ZERO_EIG_TOL:
        k = 0.0
    d = dirs[:, 0]
    # fix the sign so the output is deterministic
    pivot = int(np.argmax(np.abs(d)))
    if d[pivot] < 0:
        d = -d
    return k, d


def centered_trace(G: np.ndarray, K: int, m: int, tol: float = 1e-12) -> tuple[float, bool]:
    """``Tr(Pi G Pi)`` and whether it equals ``m (K - m) / K`` within ``tol``."""
    P = centering_projector(K)
    t = float(np.trace(P @ G @ P))
    return t, abs(t - m * (K - m) / K) <= tol


def exchangeable_kappa(K: int, m: int) -> float:
    """kappa_m when all size-``m`` sets are equally likely: ``m (K-m) / (K (K-1))``.

    Cross-check only; the eigensolver is the source of truth.
    """
    return m * (K - m) / (K * (K - 1))


@dataclass(frozen=True)
class CenteredSpectrum:
    m: int
    G: np.ndarray
    kappa: float
    centered_trace: float
    min_direction: np.ndarray
    eigenvalues: np.ndarray

    @property
    def K(self) -> int:
        return self.G.shape[0]

    def classification(self) -> str:
        """Degeneracy class of the centered covariance.

        ``"spectral gap (i)"``, ``"near-degenerate (ii)"`` or ``"degenerate (iii)"``.
        """
        if self.kappa <= DEGENERACY_RTOL * self.centered_trace:
            return "degenerate (iii)"
        mean_eig = self.centered_trace / (self.K - 1)
        if self.kappa < NEAR_DEGENERATE_RTOL * mean_eig:
            return "near-degenerate (ii)"
        return "spectral gap (i)"

    def null_directions(self, rtol: float = NEAR_DEGENERATE_RTOL) -> np.ndarray:
        """Restricted eigenvectors whose eigenvalue is below ``rtol`` times the mean one."""
        _, dirs = restricted_eigh(self.G, self.K)
        mean_eig = self.centered_trace / (self.K - 1)
        keep = self.eigenvalues < rtol * mean_eig
        return dirs[:, keep]

    def to_json_dict(self) -> dict:
        return {
            "m": self.m,
            "kappa": self.kappa,
            "centered_trace": self.centered_trace,
            "eigenvalues": [float(x) for x in self.eigenvalues],
            "min_direction": [float(x) for x in self.min_direction],
            "classification": self.classification(),
        }


def spectrum(dist: LabelDistribution, m: int) -> CenteredSpectrum:
    G = second_moment(dist, m)
    K = dist.K
    evals, _ = restricted_eigh(G, K)
    evals = np.where(np.abs(evals) <= ZERO_EIG_TOL, 0.0, evals)
    k, d = kappa(G, K)
    t, _ = centered_trace(G, K, m)
    return CenteredSpectrum(m=m, G=G, kappa=k, centered_trace=t, min_direction=d, eigenvalues=evals)


def all_spectra(dist: LabelDistribution) -> dict[int, CenteredSpectrum]:
    return {m: spectrum(dist, m) for m in dist.multiplicities}


def diag_check(dist: LabelDistribution, m: int, G: np.ndarray) -> float:
    """Max deviation of ``diag(G)`` from ``N_m^k / N_m``."""
    Nk = class_counts(dist, m)
    return float(np.abs(np.diag(G) - Nk / group_total(dist, m)).max())

