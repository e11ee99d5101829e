"""Randomized property suite behind ``mlcollapse verify``.

Every property draws its own stream from ``SeedSequence([seed, index])`` so
adding a property never perturbs the draws of another.  A trial passes when
slack (``lhs - rhs`` of the inequality, or minus an error) is at least
``-tol``; the worst slack seen is reported alongside the pass count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .bounds import interface_check, theta_matrix
from .label_space import random_distribution
from .pal import affine_bound, bound_check, pal_grad, pal_loss, tight_logits
from .spectral import centering_projector, second_moment, kappa
from .ufm import Layout, UfmConfig, UfmState, _evaluate, initial_state, descend, scaling_identity_residual

FAULTS = ("affine_sign", "grad_sign")

SHIFT_TOL = 1e-12
AFFINE_TOL = 1e-12
TIGHT_TOL = 1e-9
LEMMA_TOL = 1e-10
GRAD_RTOL = 1e-6
SCALING_TOL = 1e-6
# optimizer runs are costly; the critical-point property uses at most this many
CRITICAL_TRIALS = 20


@dataclass
class PropertyResult:
    name: str
    trials: int
    passed: int
    worst_slack: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.passed == self.trials


@dataclass
class SuiteResult:
    seed: int
    trials: int
    fault: str | None
    properties: list[PropertyResult]

    @property
    def ok(self) -> bool:
        return all(p.ok for p in self.properties)

    def failed(self) -> list[str]:
        return [p.name for p in self.properties if not p.ok]

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "trials": self.trials,
            "fault": self.fault,
            "ok": self.ok,
            "properties": [
                {"name": p.name, "trials": p.trials, "passed": p.passed, "worst_slack": p.worst_slack,
                 "tol": p.tol, "ok": p.ok}
                for p in self.properties
            ],
        }


def _label_set(rng: np.random.Generator, K: int, m: int) -> tuple[int, ...]:
    return tuple(sorted(int(c) for c in rng.choice(K, size=m, replace=False)))


def _km(rng: np.random.Generator, kmin: int = 3, kmax: int = 10) -> tuple[int, int]:
    K = int(rng.integers(kmin, kmax + 1))
    return K, int(rng.integers(1, K))


def _consts(K: int, m: int, c1: float, fault: str | None):
    ab = affine_bound(K, m, c1)
    if fault == "affine_sign":
        ab = replace(ab, gamma1=-ab.gamma1)
    return ab


def shift_invariance(rng, fault):
    K, m = _km(rng, 2)
    S = _label_set(rng, K, m)
    z = rng.normal(0.0, 3.0, K)
    c = rng.uniform(-10.0, 10.0)
    return -abs(pal_loss(z + c, S) - pal_loss(z, S))


def affine_bound_holds(rng, fault):
    K, m = _km(rng)
    c1 = float(np.exp(rng.uniform(math.log(0.1), math.log(10.0))))
    z = rng.normal(0.0, float(np.exp(rng.uniform(-2, 2))), K)
    return bound_check(z, _label_set(rng, K, m), _consts(K, m, c1, fault))[2]


def affine_tightness(rng, fault):
    K, m = _km(rng)
    c1 = float(np.exp(rng.uniform(math.log(0.1), math.log(10.0))))
    S = _label_set(rng, K, m)
    z = tight_logits(K, S, c1, mean_shift=rng.uniform(-5, 5))
    return -abs(bound_check(z, S, _consts(K, m, c1, fault))[2])


def _random_centered_G(rng):
    K, m = _km(rng, 3, 8)
    dist = random_distribution(rng, K, [m])
    G = second_moment(dist, m)
    P = centering_projector(K)
    return K, m, P @ G @ P, G


def spectral_lower_bound(rng, fault):
    K, _, B, G = _random_centered_G(rng)
    k, _ = kappa(G, K)
    Z = rng.normal(size=(K, int(rng.integers(1, 6))))
    PZ = centering_projector(K) @ Z
    return float(np.trace(Z.T @ B @ Z)) - k * float(np.sum(PZ * PZ))


def trace_inequality(rng, fault):
    K, m, B, _ = _random_centered_G(rng)
    Z = rng.normal(size=(K, int(rng.integers(1, 6))))
    return m * (K - m) / K * float(np.sum(Z * Z)) - float(np.trace(Z.T @ B @ Z))


def _random_state(rng, K_max: int = 6, replicas_max: int = 3):
    K = int(rng.integers(3, K_max + 1))
    ms = sorted({int(m) for m in rng.integers(1, K, size=2)})
    dist = random_distribution(rng, K, ms, max_count=15)
    d = int(rng.integers(K - 1, K + 3))
    lay = Layout(dist, int(rng.integers(1, replicas_max + 1)))
    W = rng.normal(size=(K, d))
    H = rng.normal(size=(lay.n_rows, d))
    return dist, lay, W, H


def interface_inequality(rng, fault):
    dist, lay, W, H = _random_state(rng)
    state = UfmState.from_matrix(W, H, lay)
    worst = math.inf
    for m in dist.multiplicities:
        lhs, rhs, _ = interface_check(theta_matrix(state, dist, m), state, dist, m)
        worst = min(worst, (rhs - lhs) / max(1.0, rhs))
    return worst


def pal_gradient(rng, fault):
    K, m = _km(rng, 2)
    S = _label_set(rng, K, m)
    z = rng.normal(0.0, 2.0, K)
    g = pal_grad(z, S) * (-1.0 if fault == "grad_sign" else 1.0)
    h = 1e-5
    fd = np.array([(pal_loss(z + h * e, S) - pal_loss(z - h * e, S)) / (2 * h) for e in np.eye(K)])
    return -float(np.linalg.norm(g - fd)) / max(float(np.linalg.norm(fd)), 1e-12)


def ufm_gradient(rng, fault):
    """Directional finite differences of the full objective along three random directions."""
    dist, lay, W, H = _random_state(rng, K_max=5)
    lw, lh = float(rng.uniform(1e-3, 1e-1)), float(rng.uniform(1e-3, 1e-1))
    _, _, dW, dH = _evaluate(W, H, lay, lw, lh)
    if fault == "grad_sign":
        dW, dH = -dW, -dH
    h = 1e-5
    worst = math.inf
    for _ in range(3):
        vW, vH = rng.normal(size=W.shape), rng.normal(size=H.shape)
        fp = _evaluate(W + h * vW, H + h * vH, lay, lw, lh, grad=False)[0]
        fm = _evaluate(W - h * vW, H - h * vH, lay, lw, lh, grad=False)[0]
        fd = (fp - fm) / (2 * h)
        an = float(np.sum(dW * vW) + np.sum(dH * vH))
        worst = min(worst, -abs(an - fd) / max(abs(fd), 1e-8))
    return worst


def scaling_identity(rng, fault):
    """``<W, grad_W g> = <H, grad_H g>`` at every state; the critical-point identity follows from it."""
    _, lay, W, H = _random_state(rng)
    _, _, dW, dH = _evaluate(W, H, lay, 0.0, 0.0)
    a, b = float(np.sum(W * dW)), float(np.sum(H * dH))
    return -abs(a - b) / max(1.0, abs(a))


def scaling_identity_critical(rng, fault):
    K = int(rng.integers(3, 5))
    dist = random_distribution(rng, K, [1, 2], max_count=10)
    lam = float(np.exp(rng.uniform(math.log(1e-3), math.log(5e-2))))
    cfg = UfmConfig(lambda_w=lam, lambda_h=float(lam * rng.uniform(0.5, 2.0)), restarts=1, seed=int(rng.integers(2**31)))
    state, _, _ = descend(initial_state(dist, cfg, 0), dist, cfg)
    if not state.converged:
        return -math.inf
    return -scaling_identity_residual(state, dist, cfg.lambda_w, cfg.lambda_h)


PROPERTIES: list[tuple[str, Callable, float, int | None]] = [
    ("shift_invariance", shift_invariance, SHIFT_TOL, None),
    ("affine_bound", affine_bound_holds, AFFINE_TOL, None),
    ("affine_tightness", affine_tightness, TIGHT_TOL, None),
    ("spectral_lower_bound", spectral_lower_bound, LEMMA_TOL, None),
    ("trace_inequality", trace_inequality, LEMMA_TOL, None),
    ("interface_inequality", interface_inequality, LEMMA_TOL, None),
    ("pal_gradient", pal_gradient, GRAD_RTOL, None),
    ("ufm_gradient", ufm_gradient, GRAD_RTOL, None),
    ("scaling_identity", scaling_identity, LEMMA_TOL, None),
    ("scaling_identity_critical", scaling_identity_critical, SCALING_TOL, CRITICAL_TRIALS),
]


def run_suite(seed: int, trials: int, fault: str | None = None) -> SuiteResult:
    if trials < 1:
        raise ValueError("trials must be a positive integer")
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r} (expected one of {FAULTS})")
    results = []
    for idx, (name, fn, tol, cap) in enumerate(PROPERTIES):
        rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
        n = trials if cap is None else min(trials, cap)
        passed, worst = 0, math.inf
        for _ in range(n):
            s = fn(rng, fault)
            worst = min(worst, s)
            passed += s >= -tol
        results.append(PropertyResult(name, n, passed, worst, tol))
    return SuiteResult(seed=seed, trials=trials, fault=fault, properties=results)
