"""Domain types and the joint log density of the clustered state-space MAR.

Observation model ``y_i(t) = c_i x_i(t) + eps_i(t)`` with ``eps_i ~ N(0, tau_i)``;
state model ``x_i(t) = sum_j gamma_ij A_ij x_j(t-1) + eta_i(t)`` with unit
state noise; ``x_i(0) ~ N(mu_i, 1)``.  Edge indicators follow a stochastic
blockmodel: ``gamma_ij ~ Bernoulli(B[m_i, m_j])``.

Conventions
-----------
* Node indices and cluster labels are 0-based in the Python API.  The file
  formats (see :mod:`ssmarnet.io`) write them 1-based.
* ``gamma[i, j] == 1`` means a directed edge ``j -> i``.
* Latent states are plain arrays of shape ``(d, T + 1)``; column 0 is ``x(0)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import gammaln, xlogy

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class TimeSeriesMatrix:
    """Observed recordings, ``values`` has shape (channels, time points)."""

    values: np.ndarray
    sample_rate_hz: float = 1.0
    channel_labels: tuple[str, ...] = ()

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError(f"values must be 2-D (d, T), got shape {values.shape}")
        d, T = values.shape
        if d < 2 or T < 2:
            raise ValueError(f"need d >= 2 and T >= 2, got d={d}, T={T}")
        if not np.all(np.isfinite(values)):
            bad = int(np.argwhere(~np.isfinite(values))[0, 0])
            raise ValueError(f"non-finite values in channel {bad}")
        if not self.sample_rate_hz > 0:
            raise ValueError("sample_rate_hz must be positive")
        labels = tuple(self.channel_labels) or tuple(f"ch{i + 1}" for i in range(d))
        if len(labels) != d:
            raise ValueError(f"{len(labels)} channel labels for {d} channels")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "channel_labels", labels)
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))

    @property
    def d(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: np.ndarray, sample_rate_hz: float | None = None) -> "TimeSeriesMatrix":
        rate = self.sample_rate_hz if sample_rate_hz is None else sample_rate_hz
        return TimeSeriesMatrix(values, rate, self.channel_labels)


def as_array(Y) -> np.ndarray:
    """Return the (d, T) float array behind ``Y`` (TimeSeriesMatrix or array)."""
    if isinstance(Y, TimeSeriesMatrix):
        return Y.values
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2:
        raise ValueError(f"expected a 2-D (d, T) array, got shape {Y.shape}")
    return Y


@dataclass(frozen=True)
class Hyperparams:
    """Fixed prior constants.

    ``xi0`` is the prior std of the connection coefficients, ``xi1`` the prior
    std of the gains and initial-state means, ``rho0`` the shape and scale of
    the inverse-gamma prior on the observation variances.
    """

    l0: float = 0.9
    u0: float = 0.1
    xi0: float = 1.0
    xi1: float = 10.0
    rho0: float = 0.01
    alpha: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in np.atleast_1d(self.alpha)))
        if not (0.0 < self.l0 < 1.0 and 0.0 < self.u0 < 1.0):
            raise ValueError("l0 and u0 must lie in (0, 1)")
        if not self.u0 < self.l0:
            raise ValueError(f"need u0 < l0, got u0={self.u0}, l0={self.l0}")
        if min(self.xi0, self.xi1, self.rho0) <= 0:
            raise ValueError("xi0, xi1 and rho0 must be positive")
        if len(self.alpha) < 1 or min(self.alpha) <= 0:
            raise ValueError("alpha must be a non-empty vector of positive reals")

    @property
    def K(self) -> int:
        return len(self.alpha)

    def with_K(self, K: int) -> "Hyperparams":
        """Same constants with a Dirichlet vector of length ``K``."""
        if K == self.K:
            return self
        if len(set(self.alpha)) != 1:
            raise ValueError("cannot resize a non-uniform alpha vector")
        return dataclasses.replace(self, alpha=(self.alpha[0],) * K)

    def box(self, K: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Lower and upper prior bounds for every entry of B."""
        K = self.K if K is None else K
        lo = np.zeros((K, K))
        hi = np.full((K, K), self.u0)
        np.fill_diagonal(lo, self.l0)
        np.fill_diagonal(hi, 1.0)
        return lo, hi

    def to_dict(self) -> dict:
        return dataclasses.asdict(self) | {"alpha": list(self.alpha)}

    @classmethod
    def from_dict(cls, data: dict) -> "Hyperparams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown hyperparameter field(s): {sorted(unknown)}")
        return cls(**data)


def default_hyperparams(K: int) -> Hyperparams:
    """Default prior constants for ``K`` clusters (uniform Dirichlet weights)."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    return Hyperparams(alpha=(1.0,) * int(K))


@dataclass(frozen=True)
class ModelParams:
    """Full parameter set of the model.

    ``m`` holds dense 0-based cluster labels; :meth:`one_hot` rebuilds the
    K x d membership matrix.
    """

    gamma: np.ndarray
    A: np.ndarray
    B: np.ndarray
    m: np.ndarray
    c: np.ndarray
    tau: np.ndarray
    mu: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        conv = {
            "gamma": np.asarray(self.gamma, dtype=np.int8),
            "A": np.asarray(self.A, dtype=float),
            "B": np.atleast_2d(np.asarray(self.B, dtype=float)),
            "m": np.asarray(self.m, dtype=np.int64),
            "c": np.asarray(self.c, dtype=float),
            "tau": np.asarray(self.tau, dtype=float),
            "mu": np.asarray(self.mu, dtype=float),
            "p": np.atleast_1d(np.asarray(self.p, dtype=float)),
        }
        d = conv["c"].shape[0]
        K = conv["p"].shape[0]
        for name, shape in [("gamma", (d, d)), ("A", (d, d)), ("B", (K, K)), ("m", (d,)),
                            ("tau", (d,)), ("mu", (d,))]:
            if conv[name].shape != shape:
                raise ValueError(f"{name} has shape {conv[name].shape}, expected {shape}")
        if conv["m"].size and (conv["m"].min() < 0 or conv["m"].max() >= K):
            raise ValueError(f"cluster labels must lie in 0..{K - 1}")
        if np.any(conv["gamma"] & ~np.int8(1)):
            raise ValueError("gamma must be binary")
        for name, arr in conv.items():
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def d(self) -> int:
        return self.c.shape[0]

    @property
    def K(self) -> int:
        return self.p.shape[0]

    @property
    def transition(self) -> np.ndarray:
        """Effective VAR(1) matrix ``gamma * A``."""
        return self.gamma * self.A

    def one_hot(self) -> np.ndarray:
        M = np.zeros((self.K, self.d), dtype=np.int8)
        M[self.m, np.arange(self.d)] = 1
        return M

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)

    def check(self, h: Hyperparams, atol: float = 1e-9) -> None:
        """Raise ``ValueError`` if any prior-support invariant is violated."""
        lo, hi = h.box(self.K)
        if np.any(self.B < lo - atol) or np.any(self.B > hi + atol):
            raise ValueError("B outside its prior box")
        if abs(self.p.sum() - 1.0) > 1e-8 or np.any(self.p < 0):
            raise ValueError("p is not on the simplex")
        if np.any(self.tau <= 0):
            raise ValueError("tau must be positive")


@dataclass(frozen=True)
class PosteriorSummary:
    clust_prob: np.ndarray
    edge_prob: np.ndarray
    num_samples: int

    def __post_init__(self):
        cp = np.asarray(self.clust_prob, dtype=float)
        ep = np.asarray(self.edge_prob, dtype=float)
        if cp.shape != ep.shape or cp.ndim != 2 or cp.shape[0] != cp.shape[1]:
            raise ValueError("clust_prob and edge_prob must be square and of equal shape")
        if self.num_samples < 1:
            raise ValueError("num_samples must be positive")
        object.__setattr__(self, "clust_prob", cp)
        object.__setattr__(self, "edge_prob", ep)

    @property
    def d(self) -> int:
        return self.edge_prob.shape[0]


@dataclass(frozen=True)
class NetworkEstimate:
    """Node partition plus directed edges ``(j, i)`` meaning ``j -> i``."""

    clusters: list[list[int]]
    edges: list[tuple[int, int]]
    threshold_m: float
    threshold_gamma: float
    edge_weights: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# log densities
# ---------------------------------------------------------------------------

def _norm_logpdf(x, mean, var):
    x = np.asarray(x, dtype=float)
    return -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


def log_prior_terms(theta: ModelParams, h: Hyperparams) -> dict[str, float]:
    """Log prior density of every parameter block (``-inf`` off support)."""
    K = theta.K
    lo, hi = h.box(K)
    if np.any(theta.B < lo) or np.any(theta.B > hi) or np.any(theta.tau <= 0):
        return {"support": -np.inf}
    if np.any(theta.p < 0) or abs(theta.p.sum() - 1.0) > 1e-8:
        return {"support": -np.inf}
    alpha = np.asarray(h.with_K(K).alpha)

    q = theta.B[theta.m[:, None], theta.m[None, :]]
    g = theta.gamma.astype(float)
    edges = float(np.sum(xlogy(g, q) + xlogy(1.0 - g, 1.0 - q)))

    block = float(np.sum(-np.log(hi - lo)))
    labels = float(np.sum(np.log(theta.p[theta.m]))) if theta.d else 0.0
    weights = float(gammaln(alpha.sum()) - gammaln(alpha).sum() + np.sum(xlogy(alpha - 1.0, theta.p)))
    coeffs = float(np.sum(_norm_logpdf(theta.A, 0.0, h.xi0 ** 2)))
    gains = float(np.sum(_norm_logpdf(theta.c, 0.0, h.xi1 ** 2)))
    means = float(np.sum(_norm_logpdf(theta.mu, 0.0, h.xi1 ** 2)))
    r = h.rho0
    noise = float(np.sum(r * np.log(r) - gammaln(r) - (r + 1.0) * np.log(theta.tau) - r / theta.tau))
    return {
        "edges": edges, "blocks": block, "labels": labels, "weights": weights,
        "coeffs": coeffs, "gains": gains, "means": means, "noise": noise,
    }


def log_prior(theta: ModelParams, h: Hyperparams) -> float:
    terms = log_prior_terms(theta, h)
    total = sum(terms.values())
    return float(total) if np.isfinite(total) else -np.inf


def log_joint_terms(Y, X: np.ndarray, theta: ModelParams, h: Hyperparams) -> dict[str, float]:
    """Per-factor decomposition of ``log p(Y | X) + log p(X) + log p(theta)``."""
    Y = as_array(Y)
    X = np.asarray(X, dtype=float)
    d, T = Y.shape
    if X.shape != (d, T + 1) or theta.d != d:
        raise ValueError(f"inconsistent shapes: Y {Y.shape}, X {X.shape}, theta d={theta.d}")
    obs = _norm_logpdf(Y, theta.c[:, None] * X[:, 1:], theta.tau[:, None])
    state = _norm_logpdf(X[:, 1:], theta.transition @ X[:, :-1], 1.0)
    init = _norm_logpdf(X[:, 0], theta.mu, 1.0)
    terms = {
        "observation": float(obs.sum()),
        "state": float(state.sum()),
        "initial": float(init.sum()),
    }
    terms.update({f"prior_{k}": v for k, v in log_prior_terms(theta, h).items()})
    return terms


def log_joint_density(Y, X: np.ndarray, theta: ModelParams, h: Hyperparams) -> float:
    """Unnormalised log posterior density of ``(X, theta)`` given ``Y``."""
    total = sum(log_joint_terms(Y, X, theta, h).values())
    if not np.isfinite(total):
        return -np.inf
    return float(total)


# ---------------------------------------------------------------------------
# generative model
# ---------------------------------------------------------------------------

def draw_prior(d: int, h: Hyperparams, rng: np.random.Generator) -> ModelParams:
    """One draw of all parameters from the prior (``K = len(h.alpha)``)."""
    K = h.K
    p = rng.dirichlet(np.asarray(h.alpha))
    m = rng.choice(K, size=d, p=p)
    lo, hi = h.box(K)
    B = lo + (hi - lo) * rng.random((K, K))
    gamma = (rng.random((d, d)) < B[m[:, None], m[None, :]]).astype(np.int8)
    A = h.xi0 * rng.standard_normal((d, d))
    c = h.xi1 * rng.standard_normal(d)
    mu = h.xi1 * rng.standard_normal(d)
    tau = 1.0 / rng.gamma(h.rho0, 1.0 / h.rho0, size=d)
    return ModelParams(gamma=gamma, A=A, B=B, m=m, c=c, tau=tau, mu=mu, p=p)


def simulate_states(theta: ModelParams, T: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``X ~ p(X | theta)``, shape (d, T + 1)."""
    d = theta.d
    F = theta.transition
    X = np.empty((d, T + 1))
    X[:, 0] = theta.mu + rng.standard_normal(d)
    noise = rng.standard_normal((d, T))
    for t in range(1, T + 1):
        X[:, t] = F @ X[:, t - 1] + noise[:, t - 1]
    return X


def simulate_observations(X: np.ndarray, theta: ModelParams, rng: np.random.Generator) -> np.ndarray:
    """Draw ``Y ~ p(Y | X, theta)``, shape (d, T)."""
    d, T1 = X.shape
    eps = rng.standard_normal((d, T1 - 1)) * np.sqrt(theta.tau)[:, None]
    return theta.c[:, None] * X[:, 1:] + eps


def relabel(m: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Compact labels to 0..K'-1 in order of first appearance.

    Returns ``(new_labels, used)`` where ``used[k']`` is the old label.
    """
    m = np.asarray(m)
    _, first = np.unique(m, return_index=True)
    used = m[np.sort(first)]
    lookup = {old: new for new, old in enumerate(used)}
    return np.array([lookup[v] for v in m], dtype=np.int64), used
