"""Regularized PAL objective of the unconstrained features model (UFM).

    f(W, H) = (1/N) sum_{m,S,i} PAL(W h_{m,S,i}, S)
              + lambda_W/2 ||W||_F^2 + lambda_H/2 sum_{m,S,i} ||h_{m,S,i}||^2

Samples sharing a label set are represented by ``replicas`` feature vectors
per ``(m, S)`` group, each standing in for ``r_{m,S} / replicas`` samples.
With one replica this is exact (the per-sample optima coincide); more
replicas exist to check within-group collapse empirically.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping

import numpy as np

from .errors import ConfigError, NumericError
from .label_space import LabelDistribution, LabelSet

log = logging.getLogger(__name__)

ARMIJO_C = 1e-4
_EPS = np.finfo(np.float64).eps
# below this many ulps of |f| a function-value difference is roundoff
_ROUNDOFF_ULPS = 64.0
_MIN_STEP = 1e-20
_MAX_STEP = 1e8


@dataclass(frozen=True)
class UfmConfig:
    d: int | None = None
    lambda_w: float = 5e-3
    lambda_h: float = 5e-3
    replicas: int = 1
    lr0: float = 1.0
    max_iters: int = 50_000
    grad_tol: float = 1e-10
    restarts: int = 10
    seed: int = 0
    init_scale: float = 0.1
    workers: int = 1

    def resolved_d(self, K: int) -> int:
        return K if self.d is None else self.d

    def validate(self, K: int) -> None:
        d = self.resolved_d(K)
        if isinstance(d, bool) or int(d) != d or d < K - 1:
            raise ConfigError(f"ufm.d must be an integer >= K-1 = {K - 1}, got {d!r}")
        for name in ("lambda_w", "lambda_h", "lr0", "grad_tol", "init_scale"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and v > 0 and math.isfinite(v)):
                raise ConfigError(f"ufm.{name} must be positive, got {v!r}")
        for name, lo in (("replicas", 1), ("max_iters", 1), ("restarts", 1), ("workers", 1), ("seed", 0)):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < lo:
                raise ConfigError(f"ufm.{name} must be an integer >= {lo}, got {v!r}")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], *, where: str = "ufm") -> "UfmConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"{where}: unknown fields {unknown}")
        return cls(**dict(doc))


class Layout:
    """Flattened row structure of the feature matrix for a distribution.

    Row ``i`` is one replica of one ``(m, S)`` group with ``r_{m,S} > 0``;
    groups with zero count carry no features.
    """

    def __init__(self, dist: LabelDistribution, replicas: int):
        self.K = dist.K
        self.N = dist.N
        self.replicas = replicas
        self.groups: list[tuple[int, LabelSet]] = [key for key, r in dist.counts.items() if r > 0]
        self.group_counts = np.array([dist.counts[key] for key in self.groups], dtype=np.float64)
        G = len(self.groups)
        self.row_group = np.repeat(np.arange(G), replicas)
        self.weights = np.repeat(self.group_counts / replicas, replicas)
        self.mult = np.repeat(np.array([m for m, _ in self.groups], dtype=np.float64), replicas)
        Y = np.zeros((G, self.K))
        for g, (_, S) in enumerate(self.groups):
            Y[g, list(S)] = 1.0
        self.Y = np.repeat(Y, replicas, axis=0)

    @property
    def n_rows(self) -> int:
        return len(self.row_group)

    def rows_of(self, g: int) -> slice:
        return slice(g * self.replicas, (g + 1) * self.replicas)


@dataclass
class UfmState:
    """Classifier ``W`` (K x d) and per-group feature replicas."""

    W: np.ndarray
    features: dict[tuple[int, LabelSet], np.ndarray]
    objective_value: float = math.nan
    grad_norm: float = math.nan
    converged: bool = False
    iterations: int = 0
    restart: int = 0

    @property
    def K(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    @property
    def replicas(self) -> int:
        return next(iter(self.features.values())).shape[0]

    def feature_matrix(self, layout: Layout) -> np.ndarray:
        return np.concatenate([self.features[key] for key in layout.groups], axis=0)

    def prototypes(self) -> dict[tuple[int, LabelSet], np.ndarray]:
        """Replica mean per group (replicas carry equal weight within a group)."""
        return {key: H.mean(axis=0) for key, H in self.features.items()}

    def weighted_features(self, dist: LabelDistribution, m: int | None = None):
        """Yield ``(m, S, weight, h)`` for every replica, optionally for one ``m``."""
        for (mm, S), H in self.features.items():
            if m is not None and mm != m:
                continue
            w = dist.counts[(mm, S)] / H.shape[0]
            for h in H:
                yield mm, S, w, h

    def h_norm_sq(self, dist: LabelDistribution, m: int | None = None) -> float:
        """Weighted ``||H||_F^2`` (optionally restricted to one multiplicity)."""
        return math.fsum(w * float(h @ h) for _, _, w, h in self.weighted_features(dist, m))

    def copy(self) -> "UfmState":
        return UfmState(
            W=self.W.copy(),
            features={k: v.copy() for k, v in self.features.items()},
            objective_value=self.objective_value,
            grad_norm=self.grad_norm,
            converged=self.converged,
            iterations=self.iterations,
            restart=self.restart,
        )

    @classmethod
    def from_matrix(cls, W: np.ndarray, H: np.ndarray, layout: Layout, **kw) -> "UfmState":
        feats = {key: H[layout.rows_of(g)].copy() for g, key in enumerate(layout.groups)}
        return cls(W=W.copy(), features=feats, **kw)

    # -- checkpoint format ------------------------------------------------

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "K": self.K,
            "d": self.d,
            "W": self.W.tolist(),
            "features": {
                f"{m}/{','.join(map(str, S))}": H.tolist() for (m, S), H in self.features.items()
            },
            "objective_value": self.objective_value,
            "grad_norm": self.grad_norm,
            "converged": self.converged,
            "iterations": self.iterations,
            "restart": self.restart,
        }

    @classmethod
    def from_json_dict(cls, doc: Mapping[str, Any]) -> "UfmState":
        try:
            W = np.asarray(doc["W"], dtype=np.float64)
            feats = {}
            for key, rows in doc["features"].items():
                m_str, s_str = key.split("/")
                S = tuple(int(c) for c in s_str.split(",")) if s_str else ()
                H = np.asarray(rows, dtype=np.float64)
                if H.ndim == 1:
                    H = H[None, :]
                feats[(int(m_str), S)] = H
        except (KeyError, ValueError, TypeError, AttributeError) as exc:
            raise ConfigError(f"checkpoint: malformed state ({exc})") from None
        if W.ndim != 2 or any(H.shape[1] != W.shape[1] for H in feats.values()):
            raise ConfigError("checkpoint: W and feature dimensions disagree")
        return cls(
            W=W,
            features=dict(sorted(feats.items())),
            objective_value=float(doc.get("objective_value", math.nan)),
            grad_norm=float(doc.get("grad_norm", math.nan)),
            converged=bool(doc.get("converged", False)),
            iterations=int(doc.get("iterations", 0)),
            restart=int(doc.get("restart", 0)),
        )


def _check_consistent(state: UfmState, dist: LabelDistribution) -> None:
    if state.K != dist.K:
        raise ConfigError(f"state has K={state.K}, distribution has K={dist.K}")
    want = {key for key, r in dist.counts.items() if r > 0}
    if set(state.features) != want:
        raise ConfigError("state feature groups do not match the distribution's nonzero label sets")
    reps = {H.shape[0] for H in state.features.values()}
    if len(reps) != 1:
        raise ConfigError("all groups must carry the same number of replicas")


def _evaluate(W: np.ndarray, H: np.ndarray, lay: Layout, lw: float, lh: float, grad: bool = True):
    """Objective, data term and (optionally) gradients on flattened arrays."""
    Z = H @ W.T
    zmax = Z.max(axis=1, keepdims=True)
    E = np.exp(Z - zmax)
    sumE = E.sum(axis=1)
    lse = zmax[:, 0] + np.log(sumE)
    losses = lay.mult * lse - np.einsum("ik,ik->i", lay.Y, Z)
    g = float(lay.weights @ losses) / lay.N
    reg = 0.5 * lw * float(np.sum(W * W)) + 0.5 * lh * float(lay.weights @ np.einsum("id,id->i", H, H))
    f = g + reg
    if not math.isfinite(f):
        raise NumericError("objective became non-finite")
    if not grad:
        return f, g, None, None
    P = E / sumE[:, None]
    Gz = (lay.weights / lay.N)[:, None] * (lay.mult[:, None] * P - lay.Y)
    dW = Gz.T @ H + lw * W
    dH = Gz @ W + lh * lay.weights[:, None] * H
    return f, g, dW, dH


def _grad_norm(dW: np.ndarray, dH: np.ndarray) -> float:
    return float(np.linalg.norm(dW) + np.sqrt(np.einsum("id,id->i", dH, dH)).max())


def objective(state: UfmState, dist: LabelDistribution, lambda_w: float, lambda_h: float) -> float:
    """``f(W, H)`` with the weighted feature ridge."""
    _check_consistent(state, dist)
    lay = Layout(dist, state.replicas)
    return _evaluate(state.W, state.feature_matrix(lay), lay, lambda_w, lambda_h, grad=False)[0]


def data_term(state: UfmState, dist: LabelDistribution, m: int | None = None) -> float:
    """Empirical PAL risk ``g(WH)``, or the group risk ``g_m`` (averaged over ``N_m``) for one ``m``."""
    _check_consistent(state, dist)
    lay = Layout(dist, state.replicas)
    H = state.feature_matrix(lay)
    Z = H @ state.W.T
    zmax = Z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(Z - zmax).sum(axis=1))
    losses = lay.mult * lse - np.einsum("ik,ik->i", lay.Y, Z)
    mask = np.ones(lay.n_rows, bool) if m is None else lay.mult == m
    total = math.fsum(lay.weights[mask] * losses[mask])
    denom = lay.N if m is None else float(lay.weights[mask].sum())
    return total / denom


def gradients(state: UfmState, dist: LabelDistribution, lambda_w: float, lambda_h: float):
    """``(dW, dH)`` with ``dH`` keyed like ``state.features`` (replicas x d per group)."""
    _check_consistent(state, dist)
    lay = Layout(dist, state.replicas)
    _, _, dW, dH = _evaluate(state.W, state.feature_matrix(lay), lay, lambda_w, lambda_h)
    return dW, {key: dH[lay.rows_of(g)] for g, key in enumerate(lay.groups)}


def scaling_identity_residual(state: UfmState, dist: LabelDistribution, lambda_w: float, lambda_h: float) -> float:
    """``|lambda_H ||H||^2 - lambda_W ||W||^2| / (lambda_W ||W||^2)``; zero at critical points."""
    wn = lambda_w * float(np.sum(state.W**2))
    hn = lambda_h * state.h_norm_sq(dist)
    if wn == 0.0:
        return 0.0 if hn == 0.0 else math.inf
    return abs(hn - wn) / wn


@dataclass
class RunSummary:
    restart: int
    objective_value: float
    grad_norm: float
    converged: bool
    iterations: int
    stalled: bool = False


@dataclass
class OptimizeResult:
    best: UfmState
    runs: list[RunSummary]
    config: UfmConfig
    history: list[float] = field(default_factory=list, repr=False)

    @property
    def converged(self) -> bool:
        return self.best.converged

    @property
    def n_converged(self) -> int:
        return sum(r.converged for r in self.runs)

    def objective_spread(self) -> float:
        """Relative spread ``(max - min) / |min|`` of the converged runs' objectives."""
        vals = [r.objective_value for r in self.runs if r.converged]
        if not vals:
            return math.nan
        lo, hi = min(vals), max(vals)
        return (hi - lo) / max(abs(lo), 1e-300)

    def metadata(self) -> dict[str, Any]:
        return {
            "converged": self.converged,
            "n_converged": self.n_converged,
            "restarts": len(self.runs),
            "best_restart": self.best.restart,
            "objective_spread": self.objective_spread(),
            "runs": [asdict(r) for r in self.runs],
        }


def initial_state(dist: LabelDistribution, config: UfmConfig, restart: int) -> UfmState:
    """Gaussian initialisation, deterministic in ``(config.seed, restart)``."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, restart]))
    K, d = dist.K, config.resolved_d(dist.K)
    lay = Layout(dist, config.replicas)
    W = rng.normal(0.0, config.init_scale, size=(K, d))
    H = rng.normal(0.0, config.init_scale, size=(lay.n_rows, d))
    return UfmState.from_matrix(W, H, lay, restart=restart)


def descend(
    state: UfmState,
    dist: LabelDistribution,
    config: UfmConfig,
    *,
    record_history: bool = False,
) -> tuple[UfmState, bool, list[float]]:
    """Gradient descent with Armijo backtracking from ``state``.

    Each iteration tries a Barzilai-Borwein step (``lr0`` on the first one)
    and halves it until the Armijo condition holds.  Once the predicted
    decrease is below float64 resolution of ``f`` the actual decrease is
    estimated by the trapezoid rule on directional derivatives, which keeps
    the sufficient-decrease test meaningful down to tiny gradients.

    Returns ``(final_state, stalled, objective_history)``.
    """
    lay = Layout(dist, state.replicas)
    lw, lh = config.lambda_w, config.lambda_h
    W = state.W.copy()
    H = state.feature_matrix(lay)
    f, _, dW, dH = _evaluate(W, H, lay, lw, lh)
    t = config.lr0
    history = [f] if record_history else []
    stalled = False
    it = 0
    gn = _grad_norm(dW, dH)
    while it < config.max_iters and gn > config.grad_tol:
        gg = float(np.sum(dW * dW) + np.sum(dH * dH))
        step = min(max(t, _MIN_STEP), _MAX_STEP)
        while True:
            Wn = W - step * dW
            Hn = H - step * dH
            fn, _, dWn, dHn = _evaluate(Wn, Hn, lay, lw, lh)
            df = fn - f
            if abs(df) <= _ROUNDOFF_ULPS * _EPS * max(1.0, abs(f)):
                cross = float(np.sum(dWn * dW) + np.sum(dHn * dH))
                df = -0.5 * step * (gg + cross)
            if df <= -ARMIJO_C * step * gg:
                break
            step *= 0.5
            if step < _MIN_STEP:
                stalled = True
                break
        if stalled:
            break
        sW, sH = Wn - W, Hn - H
        yW, yH = dWn - dW, dHn - dH
        sy = float(np.sum(sW * yW) + np.sum(sH * yH))
        if sy > 0:
            if it % 2 == 0:
                t = float(np.sum(sW * sW) + np.sum(sH * sH)) / sy
            else:
                t = sy / float(np.sum(yW * yW) + np.sum(yH * yH))
        else:
            t = 2.0 * step
        W, H, f, dW, dH = Wn, Hn, fn, dWn, dHn
        gn = _grad_norm(dW, dH)
        it += 1
        if record_history:
            history.append(f)
    out = UfmState.from_matrix(
        W,
        H,
        lay,
        objective_value=f,
        grad_norm=gn,
        converged=gn <= config.grad_tol,
        iterations=it,
        restart=state.restart,
    )
    return out, stalled, history


def _run_restart(args) -> tuple[UfmState, bool, list[float]]:
    dist, config, restart, record = args
    return descend(initial_state(dist, config, restart), dist, config, record_history=record)


def optimize(
    config: UfmConfig,
    dist: LabelDistribution,
    *,
    record_history: bool = False,
) -> OptimizeResult:
    """Run ``config.restarts`` independent descents; keep the lowest objective.

    Ties on the objective go to the lower restart index, so the result does
    not depend on the order in which parallel workers finish.
    """
    config.validate(dist.K)
    jobs = [(dist, config, r, record_history) for r in range(config.restarts)]
    if config.workers > 1 and config.restarts > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            outs = list(pool.map(_run_restart, jobs))
    else:
        outs = [_run_restart(j) for j in jobs]
    runs = [
        RunSummary(
            restart=s.restart,
            objective_value=s.objective_value,
            grad_norm=s.grad_norm,
            converged=s.converged,
            iterations=s.iterations,
            stalled=stalled,
        )
        for s, stalled, _ in outs
    ]
    pool_idx = [i for i, r in enumerate(runs) if r.converged] or list(range(len(runs)))
    best_i = min(pool_idx, key=lambda i: (runs[i].objective_value, i))
    best, _, hist = outs[best_i]
    if not best.converged:
        log.warning("no restart reached grad_tol=%g (best grad_norm %.3e)", config.grad_tol, best.grad_norm)
    return OptimizeResult(best=best, runs=runs, config=config, history=hist)
