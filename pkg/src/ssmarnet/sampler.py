"""Partially collapsed Gibbs sampler for the clustered state-space MAR.

One iteration updates, in order: the latent states (FFBS, with the initial
means integrated out), every ``(gamma_ij, A_ij)`` pair in row-major order with
``A_ij`` integrated out of the indicator draw, the cluster labels, the block
probabilities, the cluster weights, and finally ``(c, tau, mu)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import betainc, betaincinv, expit, xlog1py, xlogy

from .model import Hyperparams, ModelParams, as_array
from .statespace import _Pass


@dataclass
class ChainConfig:
    n_iter: int = 10_000
    n_burnin: int = 5_000
    thin: int = 1
    seed: int = 0
    K: int | None = None
    trace_A: str | list = "auto"

    def __post_init__(self):
        if self.n_iter < 1 or self.thin < 1:
            raise ValueError("n_iter and thin must be positive")
        if not 0 <= self.n_burnin < self.n_iter:
            raise ValueError(f"need 0 <= n_burnin < n_iter, got {self.n_burnin} / {self.n_iter}")
        if self.K is not None and self.K < 1:
            raise ValueError("K must be positive")

    @property
    def n_retained(self) -> int:
        return -(-(self.n_iter - self.n_burnin) // self.thin)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ChainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown chain config field(s): {sorted(unknown)}")
        return cls(**data)


@dataclass
class ChainOutput:
    gamma_sum: np.ndarray
    same_cluster_sum: np.ndarray
    n_retained: int
    traces: dict[str, np.ndarray] = field(default_factory=dict)
    final_state: ModelParams | None = None
    seed: int | None = None


# ---------------------------------------------------------------------------
# single-site conditionals
# ---------------------------------------------------------------------------

def edge_log_odds(s_xx: float, s_xr: float, q: float, xi0: float) -> float:
    """Posterior log-odds of ``gamma_ij = 1`` with ``A_ij`` integrated out."""
    with np.errstate(divide="ignore"):
        prior = np.log(q) - np.log1p(-q)
    v = xi0 ** 2
    return float(prior - 0.5 * np.log1p(v * s_xx) + v * s_xr ** 2 / (2.0 * (1.0 + v * s_xx)))


def sample_edge_and_weight(i: int, j: int, X: np.ndarray, state: ModelParams, h: Hyperparams,
                           rng) -> tuple[int, float]:
    """Draw ``gamma_ij`` then ``A_ij`` given the latent states and all else."""
    F = state.transition
    lag = X[:, :-1]
    r = X[i, 1:] - F[i] @ lag + F[i, j] * lag[j]
    s_xx = float(lag[j] @ lag[j])
    s_xr = float(lag[j] @ r)
    q = state.B[state.m[i], state.m[j]]
    g = int(rng.random() < expit(edge_log_odds(s_xx, s_xr, q, h.xi0)))
    z = rng.standard_normal()
    if g:
        prec = s_xx + h.xi0 ** -2
        return 1, s_xr / prec + z / np.sqrt(prec)
    return 0, h.xi0 * z


@njit(cache=True)
def _edge_sweep(G, H, gamma, A, B, m, xi0, U, Z):
    d = G.shape[0]
    v = xi0 * xi0
    for i in range(d):
        w = gamma[i] * A[i]
        for j in range(d):
            gx = G[j, j]
            b = H[j, i] - (np.dot(G[j], w) - gx * w[j])
            q = B[m[i], m[j]]
            lo = np.log(q) - np.log1p(-q) - 0.5 * np.log1p(v * gx) + v * b * b / (2.0 * (1.0 + v * gx))
            prob = 1.0 / (1.0 + np.exp(-lo))
            if U[i, j] < prob:
                prec = gx + 1.0 / v
                a = b / prec + Z[i, j] / np.sqrt(prec)
                gamma[i, j] = 1
                w[j] = a
            else:
                a = xi0 * Z[i, j]
                gamma[i, j] = 0
                w[j] = 0.0
            A[i, j] = a


def sweep_edges(X: np.ndarray, state: ModelParams, h: Hyperparams, rng: np.random.Generator):
    """Row-major sweep of all ``(gamma_ij, A_ij)`` pairs; returns new arrays."""
    d = state.d
    lag = X[:, :-1]
    G = np.ascontiguousarray(lag @ lag.T)
    H = np.ascontiguousarray(lag @ X[:, 1:].T)
    gamma = np.array(state.gamma, dtype=np.int8)
    A = np.array(state.A, dtype=float)
    U = rng.random((d, d))
    Z = rng.standard_normal((d, d))
    with np.errstate(divide="ignore", over="ignore"):
        _edge_sweep(G, H, gamma, A, np.ascontiguousarray(state.B), np.ascontiguousarray(state.m),
                    float(h.xi0), U, Z)
    return gamma, A


def cluster_label_logpmf(i: int, m: np.ndarray, gamma: np.ndarray, B: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Unnormalised log conditional of ``m_i`` over the K labels."""
    d = len(m)
    others = np.arange(d) != i
    mo = m[others]
    g = gamma.astype(bool)
    with np.errstate(divide="ignore"):
        logB, log1mB, logp = np.log(B), np.log1p(-B), np.log(p)
    row = np.where(g[i, others][None, :], logB[:, mo], log1mB[:, mo]).sum(axis=1)
    col = np.where(g[others, i][None, :], logB[mo, :].T, log1mB[mo, :].T).sum(axis=1)
    own = np.where(g[i, i], np.diag(logB), np.diag(log1mB))
    return logp + row + col + own


def _categorical(logw: np.ndarray, u: float) -> int:
    w = np.exp(logw - np.max(logw))
    cdf = np.cumsum(w)
    return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), len(w) - 1))


def sample_cluster_labels(state: ModelParams, h: Hyperparams, rng) -> np.ndarray:
    """Sequential draw of every ``m_i`` from its categorical conditional."""
    m = np.array(state.m)
    if state.K == 1:
        return np.zeros_like(m)
    for i in range(state.d):
        m[i] = _categorical(cluster_label_logpmf(i, m, state.gamma, state.B, state.p), rng.random())
    return m


def block_counts(gamma: np.ndarray, m: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Present-edge counts and ordered-pair counts per block (i=j pairs included)."""
    M = np.zeros((K, len(m)))
    M[m, np.arange(len(m))] = 1.0
    n1 = M @ gamma @ M.T
    sizes = M.sum(axis=1)
    return n1, np.outer(sizes, sizes)


def _beta_logpdf_unnorm(x, a, b):
    return xlogy(a - 1.0, x) + xlog1py(b - 1.0, -x)


def _truncated_beta_reject(a, b, lo, hi, rng) -> float:
    # density is monotone on [lo, hi]; exponential envelope tangent at the heavier end
    mode = (a - 1.0) / (a + b - 2.0) if a + b > 2.0 else 0.5
    x0, sign = (hi, -1.0) if mode >= hi else (lo, 1.0)
    eps = 1e-300
    slope = (a - 1.0) / max(x0, eps) - (b - 1.0) / max(1.0 - x0, eps)
    rate = abs(slope)
    width = hi - lo
    f0 = _beta_logpdf_unnorm(x0, a, b)
    while True:
        u = rng.random()
        if rate * width < 1e-12:
            e = u * width
        else:
            e = -np.log1p(-u * -np.expm1(-rate * width)) / rate
        x = x0 + sign * e
        if np.log(rng.random()) <= _beta_logpdf_unnorm(x, a, b) - (f0 - rate * e):
            return float(x)


def truncated_beta(a, b, lo, hi, rng) -> np.ndarray:
    """Draw Beta(a, b) restricted to ``[lo, hi]`` (elementwise, a, b >= 1)."""
    a, b, lo, hi = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a, b, lo, hi)))
    u = rng.random(a.shape)
    Flo, Fhi = betainc(a, b, lo), betainc(a, b, hi)
    Slo, Shi = betainc(b, a, 1.0 - lo), betainc(b, a, 1.0 - hi)
    upper = Flo >= 0.5
    with np.errstate(all="ignore"):
        x_low = betaincinv(a, b, Flo + u * (Fhi - Flo))
        x_up = 1.0 - betaincinv(b, a, Shi + u * (Slo - Shi))
    x = np.where(upper, x_up, x_low)
    mass = np.where(upper, Slo - Shi, Fhi - Flo)
    bad = ~np.isfinite(x) | (mass <= 1e-250) | (x < lo) | (x > hi)
    for k in zip(*np.nonzero(bad)):
        x[k] = _truncated_beta_reject(a[k], b[k], lo[k], hi[k], rng)
    return np.clip(x, lo, hi)


def sample_block_probs(state: ModelParams, h: Hyperparams, rng) -> np.ndarray:
    """Draw each ``B[k1, k2]`` from its truncated-Beta conditional."""
    n1, npairs = block_counts(state.gamma, state.m, state.K)
    lo, hi = h.box(state.K)
    return truncated_beta(1.0 + n1, 1.0 + npairs - n1, lo, hi, rng)


def sample_cluster_weights(state: ModelParams, h: Hyperparams, rng) -> np.ndarray:
    counts = np.bincount(state.m, minlength=state.K)
    return rng.dirichlet(np.asarray(h.with_K(state.K).alpha) + counts)


def gain_conditional(Y: np.ndarray, X: np.ndarray, tau: np.ndarray, h: Hyperparams):
    """Mean and variance of the normal conditional of each gain ``c_i``."""
    x = X[:, 1:]
    var = 1.0 / (np.einsum("it,it->i", x, x) / tau + h.xi1 ** -2)
    return var * np.einsum("it,it->i", x, Y) / tau, var


def noise_conditional(Y: np.ndarray, X: np.ndarray, c: np.ndarray, h: Hyperparams):
    """Shape and scale of the inverse-gamma conditional of each ``tau_i``."""
    resid = np.sum((Y - c[:, None] * X[:, 1:]) ** 2, axis=1)
    return np.full(len(c), h.rho0 + 0.5 * Y.shape[1]), h.rho0 + 0.5 * resid


def initial_mean_conditional(X: np.ndarray, h: Hyperparams):
    v = h.xi1 ** 2 / (1.0 + h.xi1 ** 2)
    return v * X[:, 0], np.full(X.shape[0], v)


def sample_observation_params(Y, X: np.ndarray, state: ModelParams, h: Hyperparams, rng):
    """Draw gains ``c``, then noise variances ``tau``, then initial means ``mu``."""
    Y = as_array(Y)
    d = state.d
    mean, var = gain_conditional(Y, X, state.tau, h)
    c = mean + np.sqrt(var) * rng.standard_normal(d)
    shape, scale = noise_conditional(Y, X, c, h)
    tau = scale / rng.gamma(shape, 1.0, size=d)
    mean, var = initial_mean_conditional(X, h)
    mu = mean + np.sqrt(var) * rng.standard_normal(d)
    return c, tau, mu


def gibbs_step(Y: np.ndarray, state: ModelParams, h: Hyperparams, rng: np.random.Generator):
    """One full sweep; returns ``(X, new_state)``."""
    # mu integrated out: x(0) ~ N(0, 1 + xi1^2). Nothing before the final mu | x(0)
    # draw reads mu, so (X, mu) is an exact block update
    X = _Pass(Y, state.transition, state.c, state.tau, np.zeros(state.d), p0=1.0 + h.xi1 ** 2).sample(rng)
    gamma, A = sweep_edges(X, state, h, rng)
    state = state.replace(gamma=gamma, A=A)
    state = state.replace(m=sample_cluster_labels(state, h, rng))
    state = state.replace(B=sample_block_probs(state, h, rng))
    state = state.replace(p=sample_cluster_weights(state, h, rng))
    c, tau, mu = sample_observation_params(Y, X, state, h, rng)
    return X, state.replace(c=c, tau=tau, mu=mu)


# ---------------------------------------------------------------------------
# chains
# ---------------------------------------------------------------------------

def _traced_A(cfg: ChainConfig, d: int) -> list[tuple[int, int]]:
    if cfg.trace_A == "auto":
        return [(i, j) for i in range(d) for j in range(d)] if d <= 10 else [(i, i) for i in range(d)]
    if cfg.trace_A == "all":
        return [(i, j) for i in range(d) for j in range(d)]
    if cfg.trace_A == "none":
        return []
    return [tuple(int(v) for v in pair) for pair in cfg.trace_A]


def run_chain(Y, init: ModelParams, cfg: ChainConfig, h: Hyperparams) -> ChainOutput:
    """Run one Gibbs chain from ``init``; deterministic given ``cfg.seed``."""
    Y = as_array(Y)
    if not np.all(np.isfinite(Y)):
        raise ValueError("Y contains non-finite values")
    if Y.shape[0] != init.d:
        raise ValueError(f"Y has {Y.shape[0]} channels but init has d={init.d}")
    if cfg.K is not None and cfg.K != init.K:
        raise ValueError(f"config K={cfg.K} does not match init K={init.K}")
    h = h.with_K(init.K)
    init.check(h)
    d, K = init.d, init.K
    rng = np.random.default_rng(cfg.seed)

    S = cfg.n_retained
    gamma_sum = np.zeros((d, d), dtype=np.int64)
    same_sum = np.zeros((d, d), dtype=np.int64)
    a_idx = _traced_A(cfg, d)
    names = ([f"c[{i + 1}]" for i in range(d)] + [f"tau[{i + 1}]" for i in range(d)]
             + [f"mu[{i + 1}]" for i in range(d)]
             + [f"A[{i + 1},{j + 1}]" for i, j in a_idx]
             + [f"B[{k + 1},{l + 1}]" for k in range(K) for l in range(K)])
    trace = np.empty((S, len(names)))
    rows = np.array([p[0] for p in a_idx], dtype=int)
    cols = np.array([p[1] for p in a_idx], dtype=int)

    state = init
    s = 0
    for it in range(cfg.n_iter):
        _, state = gibbs_step(Y, state, h, rng)
        if it >= cfg.n_burnin and (it - cfg.n_burnin) % cfg.thin == 0:
            gamma_sum += state.gamma
            same_sum += state.m[:, None] == state.m[None, :]
            trace[s] = np.concatenate([state.c, state.tau, state.mu, state.A[rows, cols], state.B.ravel()])
            s += 1
    traces = {name: trace[:, k].copy() for k, name in enumerate(names)}
    return ChainOutput(gamma_sum=gamma_sum, same_cluster_sum=same_sum, n_retained=S,
                       traces=traces, final_state=state, seed=cfg.seed)


def chain_seeds(seed: int, n_chains: int) -> list[int]:
    """Independent per-chain seeds derived from one master seed."""
    return [int(s.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
            for s in np.random.SeedSequence(seed).spawn(n_chains)]


def _run_chain_job(args):
    return run_chain(*args)


def run_chains(Y, init: ModelParams, cfg: ChainConfig, h: Hyperparams, n_chains: int,
               jobs: int = 1) -> list[ChainOutput]:
    """Several independent chains from the same start; results do not depend on ``jobs``."""
    cfgs = [dataclasses.replace(cfg, seed=s) for s in chain_seeds(cfg.seed, n_chains)]
    tasks = [(as_array(Y), init, c, h) for c in cfgs]
    if jobs <= 1 or n_chains == 1:
        return [_run_chain_job(t) for t in tasks]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_chain_job, tasks))


def merge_chains(outputs: list[ChainOutput]) -> ChainOutput:
    """Pool accumulators of independent chains (integer sums, order-free)."""
    return ChainOutput(
        gamma_sum=sum(o.gamma_sum for o in outputs),
        same_cluster_sum=sum(o.same_cluster_sum for o in outputs),
        n_retained=sum(o.n_retained for o in outputs),
    )
