"""Structural residuals and collapse metrics for a UFM state.

All residuals are relative and nonnegative; zero means the corresponding
structural law (classifier centering, within-group collapse, centered
self-duality, shared-constant label-set generation, two-level logits) holds
exactly.  Metrics that need a missing multiplicity group come back as
``None`` instead of zero.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import ConfigError, MatrixError
from .label_space import LabelDistribution, LabelSet
from .spectral import centering_projector
from .ufm import UfmState, scaling_identity_residual

SCALINGS = ("identity", "inv_sqrt_counts", "sqrt_counts")


def _nonzero(W: np.ndarray) -> float:
    n = float(np.linalg.norm(W))
    if n == 0.0:
        raise MatrixError("classifier W is identically zero")
    return n


def centering_residual(W: np.ndarray) -> float:
    """``||sum_k w_k|| / ||W||_F``."""
    return float(np.linalg.norm(W.sum(axis=0))) / _nonzero(W)


def collapse_residual(state: UfmState) -> float:
    """Largest replica distance to its group mean, relative to that mean's norm."""
    worst = 0.0
    for H in state.features.values():
        if H.shape[0] < 2:
            continue
        mu = H.mean(axis=0)
        scale = max(float(np.linalg.norm(mu)), 1e-300)
        worst = max(worst, float(np.linalg.norm(H - mu, axis=1).max()) / scale)
    return worst


def center_rows(H1: np.ndarray) -> np.ndarray:
    """Subtract the across-class mean of the K multiplicity-one prototypes."""
    return H1 - H1.mean(axis=0, keepdims=True)


def self_duality_fit(H1_centered: np.ndarray, W: np.ndarray) -> tuple[float, float, int]:
    """Least-squares ``C1`` in ``hhat_k ~ C1 w_k`` (one scalar for all ``k``).

    Returns ``(C1, relative_residual, sign(C1))``.
    """
    wn = _nonzero(W) ** 2
    C1 = float(np.sum(H1_centered * W)) / wn
    hn = float(np.sum(H1_centered**2))
    res = float(np.sum((H1_centered - C1 * W) ** 2))
    rel = math.sqrt(res / hn) if hn > 0 else 0.0
    return C1, rel, int(np.sign(C1))


def _set_sums(W: np.ndarray, sets: Sequence[LabelSet]) -> np.ndarray:
    return np.stack([W[list(S)].sum(axis=0) for S in sets])


def generation_fit(features_m: Mapping[LabelSet, np.ndarray], W: np.ndarray) -> tuple[float, float]:
    """Shared-constant fit ``h_{m,S} ~ C_m sum_{k in S} w_k``; returns ``(C_m, relative_residual)``."""
    if not features_m:
        raise ConfigError("generation_fit needs at least one label set")
    sets = list(features_m)
    Hm = np.stack([features_m[S] for S in sets])
    Sm = _set_sums(W, sets)
    denom = float(np.sum(Sm * Sm))
    if denom == 0.0:
        raise MatrixError("every class-sum sum_{k in S} w_k vanishes; classifier is degenerate")
    C = float(np.sum(Hm * Sm)) / denom
    hn = float(np.sum(Hm * Hm))
    res = float(np.sum((Hm - C * Sm) ** 2))
    return C, (math.sqrt(res / hn) if hn > 0 else 0.0)


def per_set_generation(features_m: Mapping[LabelSet, np.ndarray], W: np.ndarray) -> dict[LabelSet, tuple[float, float]]:
    """Per-label-set scalar fits, used to localise where a shared-constant fit fails."""
    out = {}
    for S, h in features_m.items():
        s = W[list(S)].sum(axis=0)
        ss = float(s @ s)
        c = float(h @ s) / ss if ss > 0 else math.nan
        hn = float(h @ h)
        out[S] = (c, math.sqrt(float(np.sum((h - c * s) ** 2)) / hn) if hn > 0 and ss > 0 else math.nan)
    return out


def two_level_check(W: np.ndarray, h: np.ndarray, S: Sequence[int]) -> tuple[float, float, float]:
    """Population std of in-set and out-of-set logits, and the gap between their means."""
    z = W @ h
    mask = np.zeros(len(z), bool)
    mask[list(S)] = True
    zin, zout = z[mask], z[~mask]
    return float(zin.std()), float(zout.std()), float(zin.mean() - zout.mean())


def two_level_from_logits(z: np.ndarray, S: Sequence[int]) -> tuple[float, float, float]:
    return two_level_check(np.eye(len(z)), np.asarray(z, dtype=np.float64), S)


def gram_alignment(A: np.ndarray, scaling: str = "identity", counts: Sequence[float] | None = None) -> tuple[float, float]:
    """Fit ``G(A') = A' A'^T`` to ``c Pi``; returns ``(c_star, ||G - c_star Pi||_F)``.

    ``A'`` is ``A``, ``D^{-1/2} A`` or ``D^{1/2} A`` with ``D = diag(counts)``.
    ``c_star = Tr(Pi G) / (K - 1)`` is the exact least-squares scale.
    """
    A = np.asarray(A, dtype=np.float64)
    K = A.shape[0]
    if scaling != "identity":
        if counts is None:
            raise ConfigError(f"scaling {scaling!r} needs per-class counts")
        c = np.asarray(counts, dtype=np.float64)
        if c.shape != (K,) or np.any(c <= 0):
            raise ConfigError("counts must be positive, one per class")
        if scaling == "inv_sqrt_counts":
            A = A / np.sqrt(c)[:, None]
        elif scaling == "sqrt_counts":
            A = A * np.sqrt(c)[:, None]
        else:
            raise ConfigError(f"unknown scaling {scaling!r}; expected one of {SCALINGS}")
    G = A @ A.T
    P = centering_projector(K)
    c_star = float(np.trace(P @ G)) / (K - 1)
    return c_star, float(np.linalg.norm(G - c_star * P))


# -- report -------------------------------------------------------------------


def _m1_prototypes(protos: Mapping[tuple[int, LabelSet], np.ndarray], K: int) -> np.ndarray | None:
    rows = [protos.get((1, (k,))) for k in range(K)]
    if any(r is None for r in rows):
        return None
    return np.stack(rows)


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return math.nan
    return float(a @ b) / (na * nb)


def nc_metrics(state: UfmState, dist: LabelDistribution) -> dict[str, Any]:
    """NC1, NC2 (weight side), NC3 and the multiplicity-two angle metric.

    ``nc1``: count-weighted mean within-group replica variance over the
    weighted global feature variance (exactly 0, flagged vacuous, when there
    is a single replica).  ``nc2``: ``||G_W/||G_W|| - Pi/||Pi|| ||_F``.
    ``nc3``: ``||W/||W|| - Hhat_1/||Hhat_1|| ||_F``.  ``angle``: mean over
    pairs of ``1 - cos(h_{2,S}, sum_{k in S} hhat_{1,k})``.
    """
    K = dist.K
    W = state.W
    protos = state.prototypes()
    out: dict[str, Any] = {}

    reps = state.replicas
    if reps < 2:
        out["nc1"], out["nc1_vacuous"] = 0.0, True
    else:
        rows = list(state.weighted_features(dist))
        wts = np.array([w for *_, w, _ in rows])
        Hs = np.stack([h for *_, h in rows])
        gmean = (wts[:, None] * Hs).sum(0) / wts.sum()
        gvar = float((wts * np.sum((Hs - gmean) ** 2, axis=1)).sum() / wts.sum())
        within = math.fsum(
            dist.counts[key] * float(np.mean(np.sum((H - H.mean(0)) ** 2, axis=1)))
            for key, H in state.features.items()
        ) / sum(dist.counts[key] for key in state.features)
        out["nc1"] = within / gvar if gvar > 0 else math.nan
        out["nc1_vacuous"] = False

    P = centering_projector(K)
    GW = W @ W.T
    out["nc2"] = float(np.linalg.norm(GW / _nonzero(GW) - P / np.linalg.norm(P)))

    H1 = _m1_prototypes(protos, K)
    if H1 is None:
        out["nc3"] = None
        out["angle"] = None
        return out
    H1c = center_rows(H1)
    hn = float(np.linalg.norm(H1c))
    out["nc3"] = float(np.linalg.norm(W / _nonzero(W) - H1c / hn)) if hn > 0 else math.nan
    pairs = [(S, h) for (m, S), h in protos.items() if m == 2]
    if not pairs:
        out["angle"] = None
    else:
        out["angle"] = float(np.mean([1.0 - _cos(h, H1c[list(S)].sum(axis=0)) for S, h in pairs]))
    return out


@dataclass
class DiagnosticsReport:
    centering_residual: float
    collapse_residual: float
    self_duality: dict[str, float] | None
    generation: dict[int, dict[str, Any]]
    scaling_identity_residual: float
    two_level: dict[str, dict[str, float]]
    gram: dict[str, dict[str, float]] | None
    nc: dict[str, Any]

    @property
    def max_two_level_std(self) -> float:
        """Largest in/out logit std relative to ``||z||`` across groups."""
        return max((max(v["in_std"], v["out_std"]) / max(v["z_norm"], 1e-300) for v in self.two_level.values()), default=0.0)

    def checks(self, thresholds: Mapping[str, float]) -> dict[str, bool]:
        """Pass/fail of each structural law against the given thresholds."""
        out = {
            "centering": self.centering_residual <= thresholds["centering"],
            "collapse": self.collapse_residual <= thresholds["collapse"],
            "scaling_identity": self.scaling_identity_residual <= thresholds["scaling_identity"],
            "two_level": self.max_two_level_std <= thresholds["two_level"],
        }
        if self.self_duality is not None:
            out["self_duality"] = (
                self.self_duality["relative_residual"] <= thresholds["self_duality"] and self.self_duality["sign"] > 0
            )
        for m, g in self.generation.items():
            out[f"generation_m{m}"] = g["relative_residual"] <= thresholds["generation"]
        return out

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "centering_residual": self.centering_residual,
            "collapse_residual": self.collapse_residual,
            "self_duality": self.self_duality,
            "generation": {str(m): g for m, g in self.generation.items()},
            "scaling_identity_residual": self.scaling_identity_residual,
            "two_level": self.two_level,
            "max_two_level_std": self.max_two_level_std,
            "gram": self.gram,
            "nc": self.nc,
        }

    def metric_rows(self, run_id: str) -> list[tuple[str, str, float]]:
        rows = [
            (run_id, "centering_residual", self.centering_residual),
            (run_id, "collapse_residual", self.collapse_residual),
            (run_id, "scaling_identity_residual", self.scaling_identity_residual),
            (run_id, "max_two_level_std", self.max_two_level_std),
        ]
        if self.self_duality is not None:
            rows += [
                (run_id, "self_duality_C1", self.self_duality["C1_fit"]),
                (run_id, "self_duality_residual", self.self_duality["relative_residual"]),
            ]
        for m, g in self.generation.items():
            rows += [(run_id, f"generation_C{m}", g["Cm_fit"]), (run_id, f"generation_residual_m{m}", g["relative_residual"])]
        if self.gram is not None:
            for sc, v in self.gram.items():
                rows += [(run_id, f"gram_{sc}_c_star", v["c_star"]), (run_id, f"gram_{sc}_residual", v["residual_fro"])]
        for k in ("nc1", "nc2", "nc3", "angle"):
            if self.nc.get(k) is not None:
                rows.append((run_id, k, self.nc[k]))
        return rows


def metrics_csv(rows: Sequence[tuple[str, str, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run_id", "metric", "value"])
    for run_id, metric, value in rows:
        w.writerow([run_id, metric, repr(float(value))])
    return buf.getvalue()


def diagnose(state: UfmState, dist: LabelDistribution, lambda_w: float, lambda_h: float) -> DiagnosticsReport:
    K = dist.K
    W = state.W
    protos = state.prototypes()

    H1 = _m1_prototypes(protos, K)
    self_dual = gram = None
    if H1 is not None:
        C1, rel, sign = self_duality_fit(center_rows(H1), W)
        self_dual = {"C1_fit": C1, "relative_residual": rel, "sign": sign}
        r1 = [dist.counts[(1, (k,))] for k in range(K)]
        gram = {}
        for sc in SCALINGS:
            c_star, res = gram_alignment(W, sc, r1)
            gram[sc] = {"c_star": c_star, "residual_fro": res}

    generation: dict[int, dict[str, Any]] = {}
    for m in dist.multiplicities:
        if m < 2:
            continue
        fm = {S: h for (mm, S), h in protos.items() if mm == m}
        if not fm:
            continue
        C, rel = generation_fit(fm, W)
        per_set = per_set_generation(fm, W)
        generation[m] = {
            "Cm_fit": C,
            "relative_residual": rel,
            "per_set": {",".join(map(str, S)): {"C": c, "relative_residual": r} for S, (c, r) in per_set.items()},
        }

    two_level = {}
    for (m, S), h in protos.items():
        i, o, gap = two_level_check(W, h, S)
        two_level[f"{m}/{','.join(map(str, S))}"] = {
            "in_std": i,
            "out_std": o,
            "gap": gap,
            "z_norm": float(np.linalg.norm(W @ h)),
        }

    return DiagnosticsReport(
        centering_residual=centering_residual(W),
        collapse_residual=collapse_residual(state),
        self_duality=self_dual,
        generation=generation,
        scaling_identity_residual=scaling_identity_residual(state, dist, lambda_w, lambda_h),
        two_level=two_level,
        gram=gram,
        nc=nc_metrics(state, dist),
    )
