"""Reference computations and shared synthetic data for the test-suite.

The oracles do not import the code paths they check.
"""

import numpy as np
from scipy import stats

from ssmarnet.model import ModelParams, simulate_observations, simulate_states


def random_params(d, rng, K=1, scale=0.4, tau_range=(0.2, 1.5)):
    """A random stable-ish parameter set with all invariants satisfied."""
    K = int(K)
    m = rng.integers(0, K, size=d)
    B = np.full((K, K), 0.05)
    np.fill_diagonal(B, 0.95)
    gamma = (rng.random((d, d)) < 0.7).astype(np.int8)
    A = rng.normal(0.0, scale / np.sqrt(d), (d, d))
    return ModelParams(
        gamma=gamma, A=A, B=B, m=m,
        c=rng.uniform(0.5, 1.5, d) * rng.choice([-1, 1], d),
        tau=rng.uniform(*tau_range, d),
        mu=rng.normal(0, 1, d),
        p=np.full(K, 1.0 / K),
    )


def dense_gaussian(theta, T, init_var=1.0):
    """Mean and covariance of vec(x(0..T)) and vec(y(1..T)) (time-major)."""
    d = theta.d
    F = theta.gamma * theta.A
    n = d * (T + 1)
    # x = mean + Phi w, w = (x(0) - mu, eta(1), ..., eta(T)) ~ N(0, I)
    Phi = np.zeros((n, n))
    powers = [np.eye(d)]
    for _ in range(T):
        powers.append(F @ powers[-1])
    mx = np.zeros(n)
    for t in range(T + 1):
        mx[t * d:(t + 1) * d] = powers[t] @ theta.mu
        for s in range(t + 1):
            Phi[t * d:(t + 1) * d, s * d:(s + 1) * d] = powers[t - s]
    Phi[:, :d] *= np.sqrt(init_var)
    Sxx = Phi @ Phi.T
    C = np.zeros((d * T, n))
    for t in range(T):
        C[t * d:(t + 1) * d, (t + 1) * d:(t + 2) * d] = np.diag(theta.c)
    R = np.diag(np.tile(theta.tau, T))
    my = C @ mx
    Syy = C @ Sxx @ C.T + R
    Sxy = Sxx @ C.T
    return mx, Sxx, my, Syy, Sxy


def dense_loglik(Y, theta, init_var=1.0):
    d, T = Y.shape
    _, _, my, Syy, _ = dense_gaussian(theta, T, init_var)
    return stats.multivariate_normal(my, Syy).logpdf(Y.T.reshape(-1))


def dense_posterior(Y, theta, init_var=1.0):
    """Conditional mean (T+1, d) and full covariance of x(0..T) given Y."""
    d, T = Y.shape
    mx, Sxx, my, Syy, Sxy = dense_gaussian(theta, T, init_var)
    gain = np.linalg.solve(Syy, Sxy.T).T
    mean = mx + gain @ (Y.T.reshape(-1) - my)
    cov = Sxx - gain @ Sxy.T
    return mean.reshape(T + 1, d), cov


def geweke_draws(h, d, T, n, rng, gibbs_step, draw_prior, simulate_states, simulate_observations, stat):
    """Marginal-conditional and successive-conditional samples of ``stat(theta)``.

    The two simulators target the same joint law of (theta, X, Y) only if the
    Gibbs kernel leaves p(theta, X | Y) invariant.
    """
    marginal = np.array([stat(draw_prior(d, h, rng)) for _ in range(n)])
    theta = draw_prior(d, h, rng)
    Y = simulate_observations(simulate_states(theta, T, rng), theta, rng)
    successive = np.empty_like(marginal)
    for s in range(n):
        # (X, theta) after one sweep is a joint draw given Y, so Y can be redrawn from it
        X, theta = gibbs_step(Y, theta, h, rng)
        Y = simulate_observations(X, theta, rng)
        successive[s] = stat(theta)
    return marginal, successive


def mcmc_standard_error(x):
    """Standard error of the mean of a stationary chain.

    Integrated autocorrelation time from Geyer's initial positive sequence:
    autocovariances are summed in adjacent pairs until a pair turns negative.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    z = x - x.mean()
    f = np.fft.rfft(z, 2 * n)
    acov = np.fft.irfft(f * np.conj(f))[:n] / n
    if acov[0] == 0:
        return 0.0
    rho = acov / acov[0]
    tau = 1.0
    for k in range(1, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        tau += 2 * pair
    return float(np.sqrt(acov[0] * tau / n))


def three_cluster_data(seed, d=15, T=500):
    """Three equal clusters with dense strong within-cluster edges only."""
    rng = np.random.default_rng(seed)
    m = np.repeat(np.arange(3), d // 3)
    same = m[:, None] == m[None, :]
    gamma = (same & (rng.random((d, d)) < 0.9)).astype(np.int8)
    A = gamma * rng.uniform(0.15, 0.35, (d, d)) * rng.choice([-1, 1], (d, d))
    rad = np.max(np.abs(np.linalg.eigvals(A)))
    if rad > 0.9:
        A *= 0.9 / rad
    theta = ModelParams(gamma=gamma, A=A, B=np.eye(3) * 0.9 + 0.05, m=m, c=np.ones(d), tau=np.full(d, 0.2),
                        mu=np.zeros(d), p=np.ones(3) / 3)
    return simulate_observations(simulate_states(theta, T, rng), theta, rng), theta
