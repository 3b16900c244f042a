import itertools

import numpy as np
import pytest
from scipy.special import xlogy

from ssmarnet.em import (
    _expected_stats, block_profile, compact, em_fit, em_step, initial_params, label_scores, penalized_objective,
)
from ssmarnet.model import default_hyperparams, simulate_observations, simulate_states
from ssmarnet.statespace import _Pass

from _oracles import dense_posterior, random_params, three_cluster_data


def test_expected_statistics_match_dense_posterior():
    rng = np.random.default_rng(0)
    d, T = 3, 9
    theta = random_params(d, rng)
    Y = rng.normal(0, 1, (d, T))
    G, G1, H, Sxy, x0, x0sq = _expected_stats(_Pass(Y, theta.transition, theta.c, theta.tau, theta.mu))
    mean, cov = dense_posterior(Y, theta)
    second = cov + np.outer(mean.ravel(), mean.ravel())

    def block(s, t):
        return second[s * d:(s + 1) * d, t * d:(t + 1) * d]

    np.testing.assert_allclose(G, sum(block(t, t) for t in range(T)), atol=1e-9)
    np.testing.assert_allclose(G1, sum(block(t, t) for t in range(1, T + 1)), atol=1e-9)
    np.testing.assert_allclose(H, sum(block(t - 1, t) for t in range(1, T + 1)), atol=1e-9)
    np.testing.assert_allclose(Sxy, np.sum(mean[1:].T * Y, axis=1), atol=1e-9)
    np.testing.assert_allclose(x0, mean[0], atol=1e-9)
    np.testing.assert_allclose(x0sq, np.diag(block(0, 0)), atol=1e-9)


@pytest.mark.parametrize("n1, n, lo, hi", [(3, 10, 0.0, 0.1), (0, 4, 0.9, 1.0), (4, 4, 0.9, 1.0),
                                           (1, 2, 0.0, 0.1), (7, 9, 0.9, 1.0), (2, 2, 0.0, 0.1)])
def test_block_profile_is_the_constrained_maximum(n1, n, lo, hi):
    val, arg = block_profile(n1, n, lo, hi)
    grid = np.linspace(lo, hi, 200001)
    best = np.max(xlogy(n1, grid) + xlogy(n - n1, 1 - grid))
    assert best - 1e-12 <= float(val) <= best + 1e-7
    assert lo <= float(arg) <= hi


def _profiled_objective(gamma, m, K, h):
    """Brute-force max over B and p of the edge, label and weight terms."""
    lo, hi = h.box(K)
    total = 0.0
    for k, l in itertools.product(range(K), range(K)):
        rows, cols = np.flatnonzero(m == k), np.flatnonzero(m == l)
        n = len(rows) * len(cols)
        n1 = gamma[np.ix_(rows, cols)].sum()
        total += float(block_profile(n1, n, lo[k, l], hi[k, l])[0])
    counts = np.bincount(m, minlength=K).astype(float)
    alpha = np.asarray(h.alpha)
    a = counts + alpha - 1.0
    total += float(np.sum(xlogy(a, a / a.sum())))
    return total


@pytest.mark.parametrize("seed", range(6))
def test_label_scores_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    d, K = 6, 4
    h = default_hyperparams(K)
    lo, hi = h.box(K)
    gamma = (rng.random((d, d)) < 0.5).astype(np.int8)
    m = rng.integers(0, K, d)
    for i in range(d):
        scores = label_scores(i, gamma, m, K, lo, hi, np.asarray(h.alpha))
        brute = []
        for k in range(K):
            mk = m.copy()
            mk[i] = k
            brute.append(_profiled_objective(gamma, mk, K, h))
        np.testing.assert_allclose(scores - scores[m[i]], np.array(brute) - brute[m[i]], atol=1e-9)


def test_initial_params_contract():
    rng = np.random.default_rng(1)
    Y = rng.normal(3, 2, (6, 80))
    h = default_hyperparams(6)
    theta = initial_params(Y, h)
    theta.check(h)
    np.testing.assert_array_equal(theta.m, np.arange(6))
    np.testing.assert_allclose(theta.c, Y.std(axis=1))
    np.testing.assert_allclose(theta.tau, 0.1 * Y.var(axis=1))
    np.testing.assert_allclose(np.diag(theta.B), 0.95)
    assert np.all(theta.gamma.sum(axis=1) <= 3)


def test_constant_channel_is_named():
    Y = np.random.default_rng(0).normal(size=(4, 50))
    Y[2] = 1.5
    with pytest.raises(ValueError, match="channel 2"):
        initial_params(Y, default_hyperparams(4))


def test_white_noise_gives_small_initial_coefficients():
    Y = np.random.default_rng(2).normal(size=(5, 1000))
    theta = initial_params(Y, default_hyperparams(5))
    assert np.all(np.abs(theta.A) < 0.2)


def test_em_step_from_truth_does_not_decrease_objective():
    rng = np.random.default_rng(4)
    d = 4
    theta = random_params(d, rng, K=d).replace(m=np.arange(d), B=np.eye(d) * 0.9 + 0.05, p=np.full(d, 0.25))
    Y = simulate_observations(simulate_states(theta, 60, rng), theta, rng)
    h = default_hyperparams(d)
    before = penalized_objective(Y, theta, h)
    after = penalized_objective(Y, em_step(Y, theta, h), h)
    assert after >= before - 1e-8


@pytest.mark.parametrize("seed", range(6))
def test_objective_trace_is_monotone(seed):
    rng = np.random.default_rng(seed)
    d, T = int(rng.integers(2, 8)), int(rng.integers(20, 120))
    Y = rng.normal(0, 1, (d, T)) * rng.uniform(0.2, 5.0, (d, 1))
    res = em_fit(Y, default_hyperparams(1), max_iter=25)
    assert np.all(np.diff(res.trace) >= -1e-8)
    assert 1 <= res.K_selected <= d
    res.theta.check(default_hyperparams(res.K_selected))


def test_em_is_deterministic():
    Y = np.random.default_rng(7).normal(size=(4, 60))
    a = em_fit(Y, default_hyperparams(1), max_iter=10)
    b = em_fit(Y, default_hyperparams(1), max_iter=10)
    np.testing.assert_array_equal(a.trace, b.trace)
    np.testing.assert_array_equal(a.theta.A, b.theta.A)


def test_three_clusters_recovered():
    Y, truth = three_cluster_data(0)
    res = em_fit(Y, default_hyperparams(1))
    assert res.K_selected == 3
    same = res.theta.m[:, None] == res.theta.m[None, :]
    np.testing.assert_array_equal(same, truth.m[:, None] == truth.m[None, :])


def test_independent_channels_stay_mostly_separate():
    rng = np.random.default_rng(100)
    d, T = 10, 500
    x = np.zeros((d, T))
    e = rng.normal(size=(d, T))
    for t in range(1, T):
        x[:, t] = 0.5 * x[:, t - 1] + e[:, t]
    res = em_fit(x + 0.3 * rng.normal(size=(d, T)), default_hyperparams(1))
    assert res.K_selected >= d / 2
    assert np.all(np.diff(res.trace) >= -1e-8)


def test_compact_relabels_and_drops_empty_clusters():
    rng = np.random.default_rng(3)
    theta = random_params(5, rng, K=5).replace(m=[3, 3, 1, 4, 1], B=np.eye(5) * 0.9 + 0.05, p=np.full(5, 0.2))
    out = compact(theta, default_hyperparams(5))
    np.testing.assert_array_equal(out.m, [0, 0, 1, 2, 1])
    assert out.K == 3
    np.testing.assert_allclose(out.p, [0.4, 0.4, 0.2])
    out.check(default_hyperparams(3))


def test_em_rejects_bad_input():
    Y = np.random.default_rng(0).normal(size=(3, 20))
    Y[1, 4] = np.inf
    with pytest.raises(ValueError, match="non-finite"):
        em_fit(Y, default_hyperparams(1))
    with pytest.raises(ValueError):
        em_fit(np.ones((3, 20)), default_hyperparams(1), max_iter=0)
