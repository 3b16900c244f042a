"""Kalman filter, RTS smoother and forward-filtering backward-sampling.

The model is linear-Gaussian with transition ``F = gamma * A``, unit state
noise, observation matrix ``diag(c)``, observation noise ``diag(tau)`` and
``x(0) ~ N(mu, I)``.

The covariance recursions do not depend on the data.  They are iterated until
the predicted covariance stops changing (relative change below ``rtol``) and
the converged matrices are reused for the remaining time points, so a pass
over ``T`` points costs ``O(t_conv d^3 + T d^2)``.  Covariance sequences are
stored compactly as ``mats[idx[t]]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import linalg

from .model import LOG_2PI, ModelParams, as_array

RTOL = 1e-12


@dataclass
class FilterResult:
    """Per-time filter moments; index 0 holds the prior of ``x(0)``."""

    pred_mean: np.ndarray   # (T+1, d)
    pred_cov: np.ndarray    # (T+1, d, d)
    filt_mean: np.ndarray   # (T+1, d)
    filt_cov: np.ndarray    # (T+1, d, d)
    loglik: float


@dataclass
class SmootherResult:
    smooth_mean: np.ndarray  # (T+1, d)
    smooth_cov: np.ndarray   # (T+1, d, d)
    crosscov: np.ndarray     # (T, d, d); crosscov[t-1] = Cov(x(t), x(t-1) | Y)


@dataclass
class _Riccati:
    Pp: np.ndarray       # (n, d, d) predicted covariance, slot 0 unused
    Pf: np.ndarray       # (n, d, d) filtered covariance, slot 0 = I
    K: np.ndarray        # (n, d, d) gain
    Sinv: np.ndarray     # (n, d, d) inverse innovation covariance
    logdetS: np.ndarray  # (n,)
    J: np.ndarray        # (n, d, d) backward gain Pf F' Pp(next)^-1
    idx: np.ndarray      # (T+1,) slot of time t
    t_conv: int


def _sym(P):
    return 0.5 * (P + P.T)


def _chol_psd(P):
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(P)
        return V * np.sqrt(np.clip(w, 0.0, None))


def _riccati(F: np.ndarray, c: np.ndarray, tau: np.ndarray, T: int, rtol: float = RTOL,
             p0: float = 1.0) -> _Riccati:
    d = c.shape[0]
    I = np.eye(d)
    Pp, Pf, Ks, Sinvs, logdets = [np.full((d, d), np.nan)], [p0 * I], [np.zeros((d, d))], [np.zeros((d, d))], [0.0]
    t_conv = T
    for t in range(1, T + 1):
        P = _sym(F @ Pf[-1] @ F.T + I)
        if t >= 2 and np.max(np.abs(P - Pp[-1])) <= rtol * max(1.0, np.max(np.abs(P))):
            t_conv = t - 1
            break
        S = c[:, None] * P * c[None, :]
        S[np.diag_indices(d)] += tau
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(
                f"innovation covariance is singular at t={t}; check tau and c") from exc
        Sinv = linalg.cho_solve((L, True), I)
        K = (P * c[None, :]) @ Sinv
        IKC = I - K * c[None, :]
        Pnew = _sym(IKC @ P @ IKC.T + (K * tau[None, :]) @ K.T)
        Pp.append(P)
        Pf.append(Pnew)
        Ks.append(K)
        Sinvs.append(Sinv)
        logdets.append(2.0 * np.sum(np.log(np.diag(L))))

    n = t_conv + 1
    J = np.zeros((n, d, d))
    for s in range(n):
        nxt = min(s + 1, t_conv)
        if nxt == s and t_conv == T:
            continue
        cf = linalg.cho_factor(Pp[nxt])
        J[s] = linalg.cho_solve(cf, F @ Pf[s]).T
    idx = np.minimum(np.arange(T + 1), t_conv).astype(np.int64)
    return _Riccati(np.array(Pp), np.array(Pf), np.array(Ks), np.array(Sinvs),
                    np.array(logdets), J, idx, t_conv)


@njit(cache=True)
def _forward_means(Yt, F, c, mu, K, idx):
    T, d = Yt.shape
    mp = np.empty((T + 1, d))
    mf = np.empty((T + 1, d))
    v = np.zeros((T + 1, d))
    mp[0] = mu
    mf[0] = mu
    for t in range(1, T + 1):
        mp[t] = np.dot(F, mf[t - 1])
        v[t] = Yt[t - 1] - c * mp[t]
        mf[t] = mp[t] + np.dot(K[idx[t]], v[t])
    return mp, mf, v


@njit(cache=True)
def _innovation_loglik(v, Sinv, logdetS, idx, log2pi):
    T1, d = v.shape
    total = 0.0
    for t in range(1, T1):
        s = idx[t]
        q = np.dot(v[t], np.dot(Sinv[s], v[t]))
        total += -0.5 * (d * log2pi + logdetS[s] + q)
    return total


@njit(cache=True)
def _backward_sample(mf, mp, J, L, L_last, idx, eps):
    T1, d = mf.shape
    T = T1 - 1
    X = np.empty((T1, d))
    X[T] = mf[T] + np.dot(L_last, eps[T])
    for t in range(T - 1, -1, -1):
        s = idx[t]
        X[t] = mf[t] + np.dot(J[s], X[t + 1] - mp[t + 1]) + np.dot(L[s], eps[t])
    return X


@njit(cache=True)
def _backward_means(mf, mp, J, idx):
    T1, d = mf.shape
    ms = np.empty((T1, d))
    ms[T1 - 1] = mf[T1 - 1]
    for t in range(T1 - 2, -1, -1):
        ms[t] = mf[t] + np.dot(J[idx[t]], ms[t + 1] - mp[t + 1])
    return ms


class _Pass:
    """One forward filtering pass, shared by the smoother, sampler and EM."""

    def __init__(self, Y: np.ndarray, F: np.ndarray, c: np.ndarray, tau: np.ndarray, mu: np.ndarray,
                 p0: float = 1.0):
        if np.any(tau <= 0):
            raise ValueError("tau must be positive")
        self.Yt = np.ascontiguousarray(Y.T)
        self.F = np.ascontiguousarray(F, dtype=float)
        self.T, self.d = self.Yt.shape
        self.ric = _riccati(self.F, c, tau, self.T, p0=p0)
        self.mp, self.mf, self.v = _forward_means(
            self.Yt, self.F, np.ascontiguousarray(c, dtype=float),
            np.ascontiguousarray(mu, dtype=float), self.ric.K, self.ric.idx)
        self.loglik = float(_innovation_loglik(self.v, self.ric.Sinv, self.ric.logdetS, self.ric.idx, LOG_2PI))
        self._smoothed = None

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        ric = self.ric
        L = np.empty_like(ric.Pf)
        for s in range(len(L)):
            L[s] = _chol_psd(_sym(ric.Pf[s] - ric.J[s] @ self.F @ ric.Pf[s]))
        L_last = _chol_psd(ric.Pf[ric.idx[self.T]])
        eps = rng.standard_normal((self.T + 1, self.d))
        return _backward_sample(self.mf, self.mp, ric.J, L, L_last, ric.idx, eps).T.copy()

    def smooth(self):
        """Smoothed means plus compact smoothed / lag-one covariances."""
        if self._smoothed is not None:
            return self._smoothed
        ric, T = self.ric, self.T
        ms = _backward_means(self.mf, self.mp, ric.J, ric.idx)

        mats = [ric.Pf[ric.idx[T]]]
        ps_idx = np.empty(T + 1, dtype=np.int64)
        ps_idx[T] = 0
        cur = mats[0]
        t = T - 1
        while t >= 0:
            s, s1 = ric.idx[t], ric.idx[t + 1]
            Jt = ric.J[s]
            new = _sym(ric.Pf[s] + Jt @ (cur - ric.Pp[s1]) @ Jt.T)
            mats.append(new)
            k = len(mats) - 1
            if t >= ric.t_conv and np.max(np.abs(new - cur)) <= RTOL * max(1.0, np.max(np.abs(new))):
                ps_idx[ric.t_conv:t + 1] = k
                t = ric.t_conv - 1
            else:
                ps_idx[t] = k
                t -= 1
            cur = new
        Ps = np.array(mats)

        # Cov(x(t), x(t-1) | Y) = Ps(t) J(t-1)' for t = 1..T
        pairs = np.stack([ps_idx[1:], ric.idx[:-1]], axis=1)
        uniq, inv = np.unique(pairs, axis=0, return_inverse=True)
        cross = np.array([Ps[a] @ ric.J[b].T for a, b in uniq]).reshape(len(uniq), self.d, self.d)
        self._smoothed = (ms, Ps, ps_idx, cross, inv.reshape(-1))
        return self._smoothed


def _pass_for(Y, theta: ModelParams) -> _Pass:
    Y = as_array(Y)
    if Y.shape[0] != theta.d:
        raise ValueError(f"Y has {Y.shape[0]} channels but theta has d={theta.d}")
    return _Pass(Y, theta.transition, theta.c, theta.tau, theta.mu)


def kalman_filter(Y, theta: ModelParams) -> FilterResult:
    """Exact filtered moments and marginal log-likelihood ``log p(Y | theta)``."""
    fp = _pass_for(Y, theta)
    ric = fp.ric
    pred_cov = ric.Pp[ric.idx].copy()
    pred_cov[0] = np.eye(fp.d)
    return FilterResult(
        pred_mean=fp.mp, pred_cov=pred_cov,
        filt_mean=fp.mf, filt_cov=ric.Pf[ric.idx].copy(),
        loglik=fp.loglik,
    )


def kalman_smoother(Y, theta: ModelParams) -> SmootherResult:
    """Rauch-Tung-Striebel smoother with lag-one cross-covariances."""
    ms, Ps, ps_idx, cross, cross_idx = _pass_for(Y, theta).smooth()
    return SmootherResult(smooth_mean=ms, smooth_cov=Ps[ps_idx], crosscov=cross[cross_idx])


def ffbs_sample(Y, theta: ModelParams, rng: np.random.Generator) -> np.ndarray:
    """One exact joint draw of the latent states, shape (d, T + 1)."""
    return _pass_for(Y, theta).sample(rng)
