"""Pick-all-labels (PAL) cross-entropy and its affine lower bound.

For a label set ``S`` of size ``m`` the PAL loss is the sum of one softmax
cross-entropy term per member label.  For any tuning constant ``c1 > 0`` it
admits the affine minorant

    PAL(z, S) >= gamma1 * <1 - (K/m) 1_S, z> + c2,

which is attained exactly on two-level logits whose in/out gap equals
``log((K - m) c1 / m)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, NumericError
from .label_space import LabelDistribution, group_total


def _logits(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("logits must be finite")
    return z


def _indicator(S: Iterable[int], K: int) -> np.ndarray:
    y = np.zeros(K)
    y[list(S)] = 1.0
    return y


def log_softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax with max subtraction (works on 1-D or 2-D input).

    The normaliser is ``log1p`` of the non-max terms, so losses near zero keep
    full relative precision instead of rounding to ``log(1) = 0``.
    """
    z = np.asarray(z, dtype=np.float64)
    idx = np.argmax(z, axis=-1)[..., None]
    shifted = z - np.take_along_axis(z, idx, axis=-1)
    e = np.exp(shifted)
    np.put_along_axis(e, idx, 0.0, axis=-1)
    return shifted - np.log1p(np.sum(e, axis=-1, keepdims=True))


def pal_loss(z, S: Sequence[int]) -> float:
    """``sum_{k in S} -log softmax(z)_k``."""
    z = _logits(z)
    if len(S) < 1:
        raise ConfigError("label set must be nonempty")
    return float(-math.fsum(log_softmax(z)[list(S)]))


def pal_grad(z, S: Sequence[int]) -> np.ndarray:
    """Gradient of :func:`pal_loss` in ``z``: ``m softmax(z) - 1_S``."""
    z = _logits(z)
    p = np.exp(log_softmax(z))
    return len(S) * p - _indicator(S, z.shape[0])


@dataclass(frozen=True)
class AffineBoundConstants:
    K: int
    m: int
    c1: float
    gamma1: float
    c2: float
    delta: float


def affine_bound(K: int, m: int, c1: float) -> AffineBoundConstants:
    """Slope, intercept and tight gap of the PAL affine bound for ``(K, m, c1)``."""
    if not (1 <= m <= K - 1):
        raise ConfigError(f"multiplicity m={m} must satisfy 1 <= m <= K-1 = {K - 1}")
    if not (c1 > 0 and math.isfinite(c1)):
        raise ConfigError(f"c1 must be positive and finite, got {c1!r}")
    gamma1 = (1.0 / (1.0 + c1)) * m / (K - m)
    c2 = (
        c1 * m / (c1 + 1.0) * math.log(m)
        + m * c1 / (1.0 + c1) * math.log((c1 + 1.0) / c1)
        + m / (c1 + 1.0) * math.log((K - m) * (c1 + 1.0))
    )
    delta = math.log((K - m) * c1 / m)
    return AffineBoundConstants(K=K, m=m, c1=float(c1), gamma1=gamma1, c2=c2, delta=delta)


def affine_direction(S: Sequence[int], K: int, m: int | None = None) -> np.ndarray:
    """``1 - (K/m) 1_S``."""
    m = len(S) if m is None else m
    return 1.0 - (K / m) * _indicator(S, K)


def bound_check(z, S: Sequence[int], consts: AffineBoundConstants) -> tuple[float, float, float]:
    """Return ``(lhs, rhs, margin)`` with ``lhs = PAL(z, S)`` and ``margin = lhs - rhs``."""
    if len(S) != consts.m:
        raise ConfigError(f"label set of size {len(S)} does not match constants for m={consts.m}")
    z = _logits(z)
    lhs = pal_loss(z, S)
    rhs = consts.gamma1 * float(affine_direction(S, consts.K) @ z) + consts.c2
    return lhs, rhs, lhs - rhs


def tight_logits(K: int, S: Sequence[int], c1: float, mean_shift: float = 0.0) -> np.ndarray:
    """Two-level logits on which the affine bound holds with equality.

    In-set entries are ``(K-m)/K * delta``, the rest ``-m/K * delta`` (so the
    vector sums to zero before ``mean_shift`` is added).
    """
    m = len(S)
    delta = affine_bound(K, m, c1).delta
    z = np.full(K, -m / K * delta)
    z[list(S)] = (K - m) / K * delta
    return z + mean_shift


def gamma2(dist: LabelDistribution, c1_per_m: Mapping[int, float]) -> float:
    """``(1/N) sum_m N_m c2_m``."""
    missing = [m for m in dist.multiplicities if m not in c1_per_m]
    if missing:
        raise ConfigError(f"no c1 given for multiplicities {missing}")
    terms = [group_total(dist, m) * affine_bound(dist.K, m, c1_per_m[m]).c2 for m in dist.multiplicities]
    return math.fsum(terms) / dist.N


def best_c1(K: int, m: int, slope_scale: float, grid: Sequence[float]) -> float:
    """Pick the ``c1`` in ``grid`` giving the largest per-multiplicity lower bound.

    The per-group bound on ``g_m`` is ``c2(c1) - gamma1(c1) * slope_scale``
    where ``slope_scale`` is ``A_m * sqrt(lambda_W/lambda_H) * rho``.  Ties go
    to the earliest grid entry.
    """
    if not grid:
        raise ConfigError("c1 grid is empty")
    best, best_val = None, -math.inf
    for c1 in grid:
        ab = affine_bound(K, m, c1)
        val = ab.c2 - ab.gamma1 * slope_scale
        if val > best_val:
            best, best_val = float(c1), val
    return best
