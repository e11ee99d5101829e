"""Distribution-dependent lower bound on the shifted empirical PAL risk.

For each multiplicity the bound compresses label correlation and imbalance
into one control quantity

    A_m = sqrt( (1/kappa_m) * m(K-m)/K * [2K/N_m + (2K^2/m^2) * worst_set_m] )

and asserts ``g(WH) - Gamma_2 >= -(1/N) sum_m N_m gamma1_m A_m sqrt(lW/lH) rho``
with ``rho = ||W||_F^2``.  Besides the final inequality this module evaluates
every intermediate inequality of the chain behind it, so a failing bound can
be traced to the step that broke.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .errors import ConfigError, SpectralDegeneracyError
from .label_space import LabelDistribution, class_counts, group_total, worst_set_term
from .pal import affine_bound, affine_direction, gamma2
from .spectral import DEGENERACY_RTOL, CenteredSpectrum, all_spectra, centering_projector
from .ufm import UfmState, data_term

#: slack below which a bound is declared violated (absolute, per stage)
BOUND_TOL = 1e-9


def _check_kappa(K: int, m: int, kappa: float) -> None:
    trace = m * (K - m) / K
    if not kappa > DEGENERACY_RTOL * trace:
        raise SpectralDegeneracyError(
            f"kappa_{m} = {kappa:.3e} is zero to tolerance: the non-degeneracy assumption on "
            "the centered subspace fails, so A_m is undefined"
        )


def counting_coefficient(dist: LabelDistribution, m: int) -> float:
    """Bracket ``2K/N_m + (2K^2/m^2) * worst_set_term`` of the interface inequality."""
    K = dist.K
    return 2.0 * K / group_total(dist, m) + 2.0 * K**2 / m**2 * worst_set_term(dist, m)


def a_m(dist: LabelDistribution, m: int, kappa: float) -> float:
    """The control quantity ``A_m``; raises if ``kappa`` is degenerate."""
    K = dist.K
    _check_kappa(K, m, kappa)
    return math.sqrt((1.0 / kappa) * (m * (K - m) / K) * counting_coefficient(dist, m))


def theorem1_rhs(
    dist: LabelDistribution,
    spectra: Mapping[int, CenteredSpectrum] | Mapping[int, float],
    c1_per_m: Mapping[int, float],
    lambda_w: float,
    lambda_h: float,
    rho: float,
) -> float:
    """``-(1/N) sum_m N_m gamma1_m A_m sqrt(lambda_w/lambda_h) rho``."""
    if not (lambda_w > 0 and lambda_h > 0):
        raise ConfigError("lambda_w and lambda_h must be positive")
    scale = math.sqrt(lambda_w / lambda_h) * rho
    terms = []
    for m in dist.multiplicities:
        k = spectra[m]
        k = k.kappa if isinstance(k, CenteredSpectrum) else float(k)
        g1 = affine_bound(dist.K, m, c1_per_m[m]).gamma1
        terms.append(group_total(dist, m) * g1 * a_m(dist, m, k) * scale)
    return -math.fsum(terms) / dist.N


# -- Theta matrix and the interface inequality --------------------------------


def _group_features(state: UfmState, dist: LabelDistribution, m: int):
    rows = list(state.weighted_features(dist, m))
    if not rows:
        raise ConfigError(f"no features for multiplicity m={m}")
    return rows


def theta_matrix(state: UfmState, dist: LabelDistribution, m: int) -> np.ndarray:
    """Rows ``hbar_m - (K/m) hbar_m^j`` with both means normalised by ``N_m``."""
    K = dist.K
    rows = _group_features(state, dist, m)
    N_m = group_total(dist, m)
    d = state.d
    total = np.zeros(d)
    per_class = np.zeros((K, d))
    for _, S, w, h in rows:
        total += w * h
        per_class[list(S)] += w * h
    hbar = total / N_m
    hbar_j = per_class / N_m
    return hbar[None, :] - (K / m) * hbar_j


def interface_check(theta: np.ndarray, state: UfmState, dist: LabelDistribution, m: int, tol: float = 1e-10):
    """``(lhs, rhs, holds)`` for ``||Theta_m||_F^2 <= coefficient * E_m``."""
    lhs = float(np.sum(theta * theta))
    E_m = state.h_norm_sq(dist, m)
    rhs = counting_coefficient(dist, m) * E_m
    return lhs, rhs, lhs <= rhs + tol * max(1.0, rhs)


def loose_interface_coefficient(dist: LabelDistribution, m: int) -> float:
    """``(2K/N_m)(1 + K/(m pi_min))``, the rarest-label relaxation of the bracket."""
    K = dist.K
    N_m = group_total(dist, m)
    pi_min = float(class_counts(dist, m).min()) / N_m
    return 2.0 * K / N_m * (1.0 + K / (m * pi_min))


# -- full report ------------------------------------------------------------


@dataclass
class StageSlack:
    m: int
    stage: str
    lhs: float
    rhs: float

    @property
    def slack(self) -> float:
        return self.lhs - self.rhs


@dataclass
class BoundReport:
    per_m: list[dict[str, float]]
    gamma2: float
    rho: float
    rhs: float
    lhs: float
    lambda_w: float
    lambda_h: float
    stages: list[StageSlack] = field(default_factory=list)
    scaling_closure_residual: float = math.nan
    tol: float = BOUND_TOL

    @property
    def margin(self) -> float:
        return self.lhs - self.rhs

    @property
    def satisfied(self) -> bool:
        return self.margin >= -self.tol

    @property
    def min_stage_slack(self) -> float:
        return min((s.slack for s in self.stages), default=math.inf)

    def chain_holds(self) -> bool:
        return all(s.slack >= -self.tol * max(1.0, abs(s.rhs)) for s in self.stages)

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "per_m": self.per_m,
            "gamma2": self.gamma2,
            "rho": self.rho,
            "lambda_w": self.lambda_w,
            "lambda_h": self.lambda_h,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "margin": self.margin,
            "satisfied": self.satisfied,
            "chain_holds": self.chain_holds(),
            "scaling_closure_residual": self.scaling_closure_residual,
            "stages": [
                {"m": s.m, "stage": s.stage, "lhs": s.lhs, "rhs": s.rhs, "slack": s.slack} for s in self.stages
            ],
        }

    def stages_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["m", "stage", "lhs", "rhs", "slack"])
        for s in self.stages:
            w.writerow([s.m, s.stage, repr(s.lhs), repr(s.rhs), repr(s.slack)])
        return buf.getvalue()


def proof_chain(
    state: UfmState,
    dist: LabelDistribution,
    spectra: Mapping[int, CenteredSpectrum],
    c1_per_m: Mapping[int, float],
) -> list[StageSlack]:
    """Evaluate each inequality of the lower-bound chain at ``state``.

    All stages hold at any state, not only at critical points.  Each entry
    records ``lhs >= rhs`` in the direction of the inequality:

    ``affine``     g_m - c2 >= gamma1 * L_m  (L_m the averaged linear term)
    ``young``      L_m >= -sqrt(rho) ||Theta||_F  (Young with the optimal constant)
    ``spectral``   T_m >= ||Theta||_F^2,  T_m = Tr(Theta' Pi G Pi Theta) / kappa
    ``trace``      m(K-m)/K ||Theta||_F^2 / kappa >= T_m
    ``interface``  coefficient * E_m >= ||Theta||_F^2
    ``energy``     ||H||_F^2 >= E_m
    ``group``      g_m - c2 >= -gamma1 A_m sqrt(rho) sqrt(E_m)
    ``aggregate``  g - Gamma_2 >= -(1/N) sum_m N_m gamma1 A_m sqrt(rho) ||H||_F
    """
    K = dist.K
    P = centering_projector(K)
    W = state.W
    rho = float(np.sum(W * W))
    H_sq = state.h_norm_sq(dist)
    out: list[StageSlack] = []
    agg_terms = []
    for m in dist.multiplicities:
        sp = spectra[m]
        ab = affine_bound(K, m, c1_per_m[m])
        N_m = group_total(dist, m)
        g_m = data_term(state, dist, m)
        L_m = math.fsum(w * float(affine_direction(S, K) @ (W @ h)) for _, S, w, h in state.weighted_features(dist, m)) / N_m
        theta = theta_matrix(state, dist, m)
        th_sq = float(np.sum(theta * theta))
        _check_kappa(K, m, sp.kappa)
        T_m = float(np.trace(theta.T @ P @ sp.G @ P @ theta)) / sp.kappa
        E_m = state.h_norm_sq(dist, m)
        A = a_m(dist, m, sp.kappa)
        out += [
            StageSlack(m, "affine", g_m - ab.c2, ab.gamma1 * L_m),
            StageSlack(m, "young", L_m, -math.sqrt(rho * th_sq)),
            StageSlack(m, "spectral", T_m, th_sq),
            StageSlack(m, "trace", m * (K - m) / K * th_sq / sp.kappa, T_m),
            StageSlack(m, "interface", counting_coefficient(dist, m) * E_m, th_sq),
            StageSlack(m, "energy", H_sq, E_m),
            StageSlack(m, "group", g_m - ab.c2, -ab.gamma1 * A * math.sqrt(rho * E_m)),
        ]
        agg_terms.append(N_m * ab.gamma1 * A * math.sqrt(rho * H_sq))
    g = data_term(state, dist)
    out.append(StageSlack(0, "aggregate", g - gamma2(dist, c1_per_m), -math.fsum(agg_terms) / dist.N))
    return out


def bound_report(
    state: UfmState,
    dist: LabelDistribution,
    c1_per_m: Mapping[int, float],
    lambda_w: float,
    lambda_h: float,
    spectra: Mapping[int, CenteredSpectrum] | None = None,
    tol: float = BOUND_TOL,
) -> BoundReport:
    """Evaluate the lower bound (and its proof chain) at a UFM state.

    ``rho`` always comes from ``state.W``.  The final step of the bound
    substitutes the critical-point identity ``||H||^2 = (lW/lH) rho``; its
    relative residual at ``state`` is reported as ``scaling_closure_residual``.
    """
    spectra = all_spectra(dist) if spectra is None else spectra
    K = dist.K
    rho = float(np.sum(state.W**2))
    per_m = []
    for m in dist.multiplicities:
        ab = affine_bound(K, m, c1_per_m[m])
        k = spectra[m].kappa
        per_m.append(
            {
                "m": m,
                "c1": ab.c1,
                "gamma1": ab.gamma1,
                "c2": ab.c2,
                "kappa": k,
                "worst_set_term": worst_set_term(dist, m),
                "A_m": a_m(dist, m, k),
            }
        )
    g2 = gamma2(dist, c1_per_m)
    rhs = theorem1_rhs(dist, spectra, c1_per_m, lambda_w, lambda_h, rho)
    lhs = data_term(state, dist) - g2
    H_sq = state.h_norm_sq(dist)
    closure = abs(H_sq - lambda_w / lambda_h * rho) / max(lambda_w / lambda_h * rho, 1e-300)
    return BoundReport(
        per_m=per_m,
        gamma2=g2,
        rho=rho,
        rhs=rhs,
        lhs=lhs,
        lambda_w=lambda_w,
        lambda_h=lambda_h,
        stages=proof_chain(state, dist, spectra, c1_per_m),
        scaling_closure_residual=closure,
        tol=tol,
    )


def resolve_c1(
    dist: LabelDistribution,
    c1: float | Mapping[int, float] | None = None,
) -> dict[int, float]:
    """Normalise a scalar or per-``m`` mapping of tuning constants (default 1.0)."""
    if c1 is None:
        return {m: 1.0 for m in dist.multiplicities}
    if isinstance(c1, Mapping):
        out = {int(m): float(v) for m, v in c1.items()}
        missing = [m for m in dist.multiplicities if m not in out]
        if missing:
            raise ConfigError(f"no c1 given for multiplicities {missing}")
        return out
    return {m: float(c1) for m in dist.multiplicities}
