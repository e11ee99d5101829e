import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mlcollapse.errors import ConfigError
from mlcollapse.label_space import LabelDistribution, balanced, random_distribution
from mlcollapse.pal import pal_loss
from mlcollapse.spectral import centering_projector
from mlcollapse.ufm import (
    Layout,
    UfmConfig,
    UfmState,
    data_term,
    descend,
    gradients,
    initial_state,
    objective,
    optimize,
    scaling_identity_residual,
)


def oracle_objective(state, dist, lw, lh):
    """Per-replica loop over pal_loss; each replica counts for r/replicas samples."""
    g = reg_h = 0.0
    for (m, S), H in state.features.items():
        w = dist.counts[(m, S)] / H.shape[0]
        for h in H:
            g += w * pal_loss(state.W @ h, S)
            reg_h += w * float(h @ h)
    return g / dist.N + lw / 2 * float(np.sum(state.W**2)) + lh / 2 * reg_h


def random_instance(rng, K_max=6, d_max=8):
    K = int(rng.integers(3, K_max + 1))
    ms = sorted({1, int(rng.integers(1, K))})
    dist = random_distribution(rng, K, ms, max_count=12)
    d = int(rng.integers(K - 1, d_max + 1))
    lay = Layout(dist, int(rng.integers(1, 3)))
    st_ = UfmState.from_matrix(rng.normal(size=(K, d)), rng.normal(size=(lay.n_rows, d)), lay)
    return dist, st_


def fd_gradients(state, dist, lw, lh, h=1e-5):
    def f_at(W, feats):
        return objective(UfmState(W=W, features=feats), dist, lw, lh)

    dW = np.zeros_like(state.W)
    for idx in np.ndindex(*state.W.shape):
        Wp, Wm = state.W.copy(), state.W.copy()
        Wp[idx] += h
        Wm[idx] -= h
        dW[idx] = (f_at(Wp, state.features) - f_at(Wm, state.features)) / (2 * h)
    dH = {}
    for key, H in state.features.items():
        G = np.zeros_like(H)
        for idx in np.ndindex(*H.shape):
            fp = {k: v.copy() for k, v in state.features.items()}
            fm = {k: v.copy() for k, v in state.features.items()}
            fp[key][idx] += h
            fm[key][idx] -= h
            G[idx] = (f_at(state.W, fp) - f_at(state.W, fm)) / (2 * h)
        dH[key] = G
    return dW, dH


def flat(dW, dH):
    return np.concatenate([dW.ravel()] + [dH[k].ravel() for k in sorted(dH)])


def test_objective_matches_oracle(rng):
    for _ in range(20):
        dist, st_ = random_instance(rng)
        assert objective(st_, dist, 1e-2, 3e-2) == pytest.approx(oracle_objective(st_, dist, 1e-2, 3e-2), rel=1e-13)


def test_zero_state_objective():
    dist = random_distribution(np.random.default_rng(0), 5, [1, 2])
    lay = Layout(dist, 2)
    st_ = UfmState.from_matrix(np.zeros((5, 5)), np.zeros((lay.n_rows, 5)), lay)
    want = sum(r * m * math.log(5) for (m, _), r in dist.counts.items()) / dist.N
    assert objective(st_, dist, 1.0, 1.0) == pytest.approx(want, rel=1e-14)


def test_count_rescaling_keeps_data_term(rng):
    dist, st_ = random_instance(rng)
    double = LabelDistribution(dist.K, {k: 2 * r for k, r in dist.counts.items()})
    assert data_term(st_, double) == pytest.approx(data_term(st_, dist), rel=1e-14)
    # the per-sample feature ridge doubles with the sample count
    assert st_.h_norm_sq(double) == pytest.approx(2 * st_.h_norm_sq(dist), rel=1e-14)


def test_group_data_term(rng):
    dist, st_ = random_instance(rng)
    parts = [
        sum(dist.counts[(mm, S)] for (mm, S) in dist.counts if mm == m) * data_term(st_, dist, m)
        for m in dist.multiplicities
    ]
    assert sum(parts) / dist.N == pytest.approx(data_term(st_, dist), rel=1e-13)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    for _ in range(10):
        dist, st_ = random_instance(rng, K_max=4, d_max=4)
        dW, dH = gradients(st_, dist, 1e-2, 2e-2)
        fW, fH = fd_gradients(st_, dist, 1e-2, 2e-2)
        a, b = flat(dW, dH), flat(fW, fH)
        assert np.linalg.norm(a - b) <= 1e-6 * np.linalg.norm(b)


def test_projection_never_increases_objective(rng):
    for _ in range(100):
        dist, st_ = random_instance(rng)
        st_.W += rng.normal() * np.ones((dist.K, 1)) @ rng.normal(size=(1, st_.d))
        P = centering_projector(dist.K)
        proj = UfmState(W=P @ st_.W, features=st_.features)
        assert objective(proj, dist, 5e-3, 5e-3) <= objective(st_, dist, 5e-3, 5e-3) + 1e-15


def test_k2_matches_grid_search():
    """One sample with S={1}, d=1: f(a, b) = log(1 + e^{-2ab}) + lam a^2 + lam/2 b^2 after centering."""
    lam = 0.1
    dist = LabelDistribution(2, {(1, (1,)): 1})
    res = optimize(UfmConfig(d=1, lambda_w=lam, lambda_h=lam, restarts=3, seed=2), dist)
    assert res.converged
    a = np.linspace(0, 3, 3001)[:, None]
    b = np.linspace(0, 6, 3001)[None, :]
    grid = np.logaddexp(0, -2 * a * b) + lam * a**2 + lam / 2 * b**2
    assert res.best.objective_value == pytest.approx(grid.min(), abs=1e-6)
    assert res.best.objective_value <= grid.min() + 1e-12


def test_balanced_k3_restart_agreement():
    res = optimize(UfmConfig(d=3, lambda_w=5e-3, lambda_h=5e-3, restarts=6, seed=0), balanced(3, 10))
    assert res.n_converged == 6
    assert res.objective_spread() <= 1e-8
    assert res.best.grad_norm <= 1e-10


def test_history_monotone():
    dist = balanced(4, 5, 2)
    cfg = UfmConfig(replicas=2, restarts=1, seed=3)
    st_, stalled, hist = descend(initial_state(dist, cfg, 0), dist, cfg, record_history=True)
    assert st_.converged and not stalled
    inc = np.diff(hist)
    assert np.all(inc <= 64 * np.finfo(float).eps * np.abs(hist[1:]))
    assert len(hist) == st_.iterations + 1


def test_determinism_and_parallel_schedule():
    dist = random_distribution(np.random.default_rng(9), 4, [1, 2])
    cfg = UfmConfig(replicas=2, restarts=4, seed=11)
    a, b = optimize(cfg, dist), optimize(cfg, dist)
    c = optimize(UfmConfig(replicas=2, restarts=4, seed=11, workers=2), dist)
    for other in (b, c):
        np.testing.assert_array_equal(a.best.W, other.best.W)
        assert a.best.restart == other.best.restart
        assert [r.objective_value for r in a.runs] == [r.objective_value for r in other.runs]
    d = optimize(UfmConfig(replicas=2, restarts=4, seed=12), dist)
    assert not np.array_equal(a.best.W, d.best.W)


@given(st.integers(0, 2**31))
def test_scaling_identity_at_convergence(seed):
    rng = np.random.default_rng(seed)
    dist = random_distribution(rng, int(rng.integers(3, 6)), [1, 2], max_count=8)
    lw = float(rng.uniform(1e-3, 5e-2))
    lh = float(rng.uniform(1e-3, 5e-2))
    res = optimize(UfmConfig(lambda_w=lw, lambda_h=lh, restarts=1, seed=seed), dist)
    assert res.converged
    assert scaling_identity_residual(res.best, dist, lw, lh) <= 1e-6


def test_nonconvergence_is_flagged():
    res = optimize(UfmConfig(max_iters=3, restarts=2), balanced(4, 3))
    assert not res.converged and res.n_converged == 0
    assert math.isnan(res.objective_spread())
    assert res.best.iterations == 3


def test_checkpoint_roundtrip(rng):
    dist, st_ = random_instance(rng)
    st_.objective_value = 1.25
    text = json.dumps(st_.to_json_dict())
    back = UfmState.from_json_dict(json.loads(text))
    np.testing.assert_array_equal(back.W, st_.W)
    assert back.features.keys() == st_.features.keys()
    for k in st_.features:
        np.testing.assert_array_equal(back.features[k], st_.features[k])
    assert objective(back, dist, 1e-2, 1e-2) == objective(st_, dist, 1e-2, 1e-2)
    assert all("/" in k for k in json.loads(text)["features"])
    with pytest.raises(ConfigError):
        UfmState.from_json_dict({"W": [[1.0]], "features": {"bad": [[1.0]]}})


def test_state_must_match_distribution(rng):
    dist, st_ = random_instance(rng)
    other = balanced(dist.K + 1, 2)
    with pytest.raises(ConfigError):
        objective(st_, other, 1e-2, 1e-2)


@pytest.mark.parametrize(
    "kw",
    [{"d": 2}, {"lambda_w": 0}, {"lambda_h": -1.0}, {"replicas": 0}, {"grad_tol": 0}, {"restarts": 0}, {"seed": -1}],
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        UfmConfig(**kw).validate(4)


def test_config_from_dict():
    assert UfmConfig.from_dict({"d": 5, "seed": 3}) == UfmConfig(d=5, seed=3)
    with pytest.raises(ConfigError, match="unknown"):
        UfmConfig.from_dict({"learning_rate": 1})
