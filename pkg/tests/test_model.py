import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from ssmarnet.model import (
    Hyperparams, ModelParams, TimeSeriesMatrix, default_hyperparams, draw_prior, log_joint_density,
    log_joint_terms, log_prior, relabel, simulate_observations, simulate_states,
)

from _oracles import random_params


def _scalar_reference(Y, X, theta, h):
    """Factor-by-factor log density written with scipy.stats and explicit loops."""
    d, T = Y.shape
    total = 0.0
    for i in range(d):
        for t in range(T):
            total += stats.norm.logpdf(Y[i, t], theta.c[i] * X[i, t + 1], math.sqrt(theta.tau[i]))
            mean = sum(theta.gamma[i, j] * theta.A[i, j] * X[j, t] for j in range(d))
            total += stats.norm.logpdf(X[i, t + 1], mean, 1.0)
        total += stats.norm.logpdf(X[i, 0], theta.mu[i], 1.0)
    K = theta.K
    for i in range(d):
        for j in range(d):
            total += stats.bernoulli.logpmf(theta.gamma[i, j], theta.B[theta.m[i], theta.m[j]])
            total += stats.norm.logpdf(theta.A[i, j], 0.0, h.xi0)
    for k in range(K):
        for l in range(K):
            lo, width = (h.l0, 1 - h.l0) if k == l else (0.0, h.u0)
            total += stats.uniform.logpdf(theta.B[k, l], lo, width)
    total += stats.dirichlet.logpdf(theta.p, [h.alpha[0]] * K)
    for i in range(d):
        total += math.log(theta.p[theta.m[i]])
        total += stats.norm.logpdf(theta.c[i], 0.0, h.xi1) + stats.norm.logpdf(theta.mu[i], 0.0, h.xi1)
        total += stats.invgamma.logpdf(theta.tau[i], h.rho0, scale=h.rho0)
    return total


@pytest.mark.parametrize("seed", range(5))
def test_log_joint_matches_scalar_reference(seed):
    rng = np.random.default_rng(seed)
    d, T, K = 2, 3, 2
    h = Hyperparams(rho0=0.5, alpha=(1.0,) * K)
    theta = random_params(d, rng, K=K)
    X = rng.normal(size=(d, T + 1))
    Y = rng.normal(size=(d, T))
    assert log_joint_density(Y, X, theta, h) == pytest.approx(_scalar_reference(Y, X, theta, h), abs=1e-12)


def test_standard_normal_terms():
    theta = ModelParams(gamma=[[0]], A=[[0.0]], B=[[0.95]], m=[0], c=[1.0], tau=[1.0], mu=[0.0], p=[1.0])
    terms = log_joint_terms(np.zeros((1, 1)), np.zeros((1, 2)), theta, default_hyperparams(1))
    assert terms["observation"] == -0.5 * math.log(2 * math.pi)
    assert terms["state"] == -0.5 * math.log(2 * math.pi)


def test_outside_support_is_minus_infinity():
    rng = np.random.default_rng(0)
    theta = random_params(3, rng, K=2)
    B = theta.B.copy()
    B[0, 1] = 0.5
    bad = theta.replace(B=B)
    h = default_hyperparams(2)
    X, Y = rng.normal(size=(3, 5)), rng.normal(size=(3, 4))
    assert log_joint_density(Y, X, bad, h) == -np.inf
    assert log_prior(theta.replace(tau=[1.0, -1.0, 1.0]), h) == -np.inf


def test_default_hyperparams():
    h = default_hyperparams(4)
    assert (h.l0, h.u0, h.xi0, h.xi1, h.rho0) == (0.9, 0.1, 1.0, 10.0, 0.01)
    assert h.alpha == (1.0,) * 4
    with pytest.raises(ValueError):
        default_hyperparams(0)
    with pytest.raises(ValueError, match="u0 < l0"):
        Hyperparams(l0=0.1, u0=0.2)
    assert Hyperparams.from_dict(h.to_dict()) == h


def test_box_bounds():
    lo, hi = default_hyperparams(3).box()
    np.testing.assert_array_equal(np.diag(lo), 0.9)
    np.testing.assert_array_equal(np.diag(hi), 1.0)
    assert lo[0, 1] == 0.0 and hi[0, 1] == 0.1


def test_time_series_invariants():
    with pytest.raises(ValueError, match="d >= 2"):
        TimeSeriesMatrix(np.zeros((1, 5)))
    with pytest.raises(ValueError, match="channel 1"):
        TimeSeriesMatrix([[0.0, 1.0], [np.nan, 0.0]])
    with pytest.raises(ValueError, match="labels"):
        TimeSeriesMatrix(np.zeros((2, 3)), channel_labels=("a",))
    Y = TimeSeriesMatrix(np.zeros((2, 3)), 250)
    assert Y.channel_labels == ("ch1", "ch2") and Y.sample_rate_hz == 250.0
    with pytest.raises(ValueError):
        Y.values[0, 0] = 1.0


def test_model_params_validation():
    good = dict(gamma=np.eye(2), A=np.eye(2), B=[[0.95]], m=[0, 0], c=[1, 1], tau=[1, 1], mu=[0, 0], p=[1.0])
    ModelParams(**good)
    with pytest.raises(ValueError, match="binary"):
        ModelParams(**{**good, "gamma": [[2, 0], [0, 1]]})
    with pytest.raises(ValueError, match="shape"):
        ModelParams(**{**good, "A": np.eye(3)})
    with pytest.raises(ValueError, match="labels"):
        ModelParams(**{**good, "m": [0, 1]})
    theta = ModelParams(**good)
    np.testing.assert_array_equal(theta.one_hot(), [[1, 1]])
    with pytest.raises(ValueError, match="box"):
        theta.replace(B=[[0.5]]).check(default_hyperparams(1))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
def test_prior_draws_are_in_support(d, K, seed):
    h = default_hyperparams(K)
    theta = draw_prior(d, h, np.random.default_rng(seed))
    theta.check(h)
    assert np.isfinite(log_prior(theta, h))


def test_simulation_shapes_and_noise_free_limit():
    rng = np.random.default_rng(1)
    theta = random_params(3, rng).replace(tau=[1e-20] * 3)
    X = simulate_states(theta, 7, rng)
    Y = simulate_observations(X, theta, rng)
    assert X.shape == (3, 8) and Y.shape == (3, 7)
    np.testing.assert_allclose(Y, theta.c[:, None] * X[:, 1:], atol=1e-8)


def test_relabel_first_appearance():
    new, used = relabel([4, 4, 1, 7, 1])
    np.testing.assert_array_equal(new, [0, 0, 1, 2, 1])
    np.testing.assert_array_equal(used, [4, 1, 7])
