"""MAP-EM initializer with cluster-count selection.

Starts from ``K = d`` singleton clusters.  Each iteration runs the smoother
at the current parameters (E-step), then a generalized M-step made of
coordinate moves that never lower the expected complete-data log posterior:

* closed-form ``c``, ``tau`` and ``mu``;
* best-response updates of every ``gamma_ij`` (with ``A_ij`` at its
  coordinate optimum when on and 0 when off), followed by an exact ridge
  refit of each row of ``A`` on its active set;
* best-response updates of every label ``m_i``.

``B`` and ``p`` are profiled out at their constrained maximizers whenever a
discrete coordinate is compared, and then set to those maximizers, so the
penalized objective ``log p(Y | theta) + log p(theta)`` cannot decrease.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from numba import njit
from scipy.special import xlog1py, xlogy

from .model import Hyperparams, ModelParams, as_array, log_prior, relabel
from .statespace import _Pass


class EMResult(NamedTuple):
    theta: ModelParams
    K_selected: int
    trace: np.ndarray


def initial_params(Y, h: Hyperparams) -> ModelParams:
    """Moment-based starting point with every node in its own cluster."""
    Y = as_array(Y)
    if not np.all(np.isfinite(Y)):
        raise ValueError("Y contains non-finite values")
    d = Y.shape[0]
    sd = Y.std(axis=1)
    flat = np.flatnonzero(sd <= 1e-12 * np.maximum(1.0, np.abs(Y).max(axis=1)))
    if flat.size:
        raise ValueError(f"channel {int(flat[0])} has zero variance")
    Z = (Y - Y.mean(axis=1, keepdims=True)) / sd[:, None]
    A = np.linalg.lstsq(Z[:, :-1].T, Z[:, 1:].T, rcond=None)[0].T
    gamma = (np.abs(A) > np.median(np.abs(A), axis=1, keepdims=True)).astype(np.int8)
    B = np.full((d, d), h.u0 / 2)
    np.fill_diagonal(B, (h.l0 + 1.0) / 2)
    return ModelParams(gamma=gamma, A=A, B=B, m=np.arange(d), c=sd, tau=0.1 * sd ** 2,
                       mu=Y[:, 0] / sd, p=np.full(d, 1.0 / d))


def penalized_objective(Y, theta: ModelParams, h: Hyperparams) -> float:
    """``log p(Y | theta) + log p(theta)``."""
    fp = _Pass(as_array(Y), theta.transition, theta.c, theta.tau, theta.mu)
    return fp.loglik + log_prior(theta, h.with_K(theta.K))


# ---------------------------------------------------------------------------
# profiled block and weight terms
# ---------------------------------------------------------------------------

def block_profile(n1, n, lo, hi):
    """``max_B n1 log B + (n - n1) log(1 - B)`` over ``B in [lo, hi]`` and its argmax."""
    n1, n = np.asarray(n1, dtype=float), np.asarray(n, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        Bhat = np.clip(np.where(n > 0, n1 / np.where(n > 0, n, 1.0), 0.5 * (lo + hi)), lo, hi)
    return xlogy(n1, Bhat) + xlog1py(n - n1, -Bhat), Bhat


def _weight_profile_terms(counts, alpha):
    # p_k proportional to n_k + alpha_k - 1; returns per-cluster terms before the log-normalizer
    a = counts + alpha - 1.0
    return xlogy(a, a)


def _weights_hat(counts, alpha):
    a = np.maximum(counts + alpha - 1.0, 0.0)
    return a / a.sum()


@njit(cache=True)
def _fprof(n1, n, lo, hi):
    if n <= 0.0:
        return 0.0
    b = min(max(n1 / n, lo), hi)
    out = 0.0
    if n1 > 0.0:
        out += n1 * np.log(b)
    if n - n1 > 0.0:
        out += (n - n1) * np.log1p(-b)
    return out


@njit(cache=True)
def _icm_edges(G, H, gamma, A, m, n1, npairs, lo, hi, xi0):
    """One best-response pass over all (gamma_ij, A_ij); updates in place."""
    d = G.shape[0]
    prior_prec = 1.0 / (xi0 * xi0)
    changed = 0
    for i in range(d):
        w = gamma[i] * A[i]
        for j in range(d):
            gx = G[j, j]
            b = H[j, i] - (np.dot(G[j], w) - gx * w[j])
            prec = gx + prior_prec
            k, l = m[i], m[j]
            cur = gamma[i, j]
            base = n1[k, l] - cur
            f_on = _fprof(base + 1.0, npairs[k, l], lo[k, l], hi[k, l])
            f_off = _fprof(base, npairs[k, l], lo[k, l], hi[k, l])
            on = 0.5 * b * b / prec + f_on
            if cur == 1:
                new = 0 if f_off > on else 1
            else:
                new = 1 if on > f_off else 0
            if new != cur:
                changed += 1
                n1[k, l] += new - cur
            gamma[i, j] = new
            if new == 1:
                A[i, j] = b / prec
                w[j] = A[i, j]
            else:
                A[i, j] = 0.0
                w[j] = 0.0
    return changed


def _ridge_rows(G, H, gamma, xi0):
    d = G.shape[0]
    A = np.zeros((d, d))
    for i in range(d):
        act = np.flatnonzero(gamma[i])
        if act.size:
            M = G[np.ix_(act, act)] + np.eye(act.size) / xi0 ** 2
            A[i, act] = np.linalg.solve(M, H[act, i])
    return A


def _counts(gamma, m, K):
    M = np.zeros((K, len(m)))
    M[m, np.arange(len(m))] = 1.0
    sizes = M.sum(axis=1)
    return M @ gamma @ M.T, np.outer(sizes, sizes), M


def label_scores(i: int, gamma, m, K: int, lo, hi, alpha) -> np.ndarray:
    """Profiled objective of moving node ``i`` to each label, up to a constant."""
    d = len(m)
    g = np.asarray(gamma, dtype=float)
    M = np.zeros((K, d))
    M[m, np.arange(d)] = 1.0
    M[:, i] = 0.0
    s = M.sum(axis=1)
    n1 = M @ g @ M.T
    npairs = np.outer(s, s)
    r = M @ g[i]          # edges into i from each cluster
    c = M @ g[:, i]       # edges out of i into each cluster
    Fb = block_profile(n1, npairs, lo, hi)[0]
    base = Fb.sum(axis=1) + Fb.sum(axis=0) - np.diag(Fb)

    Fr = block_profile(n1 + r[None, :], npairs + s[None, :], lo, hi)[0]
    Fc = block_profile(n1.T + c[None, :], npairs.T + s[None, :], lo.T, hi.T)[0]
    Fd = block_profile(np.diag(n1) + r + c + g[i, i], np.diag(npairs) + 2 * s + 1, np.diag(lo), np.diag(hi))[0]
    new = Fr.sum(axis=1) - np.diag(Fr) + Fc.sum(axis=1) - np.diag(Fc) + Fd
    return new - base + _weight_profile_terms(s + 1.0, alpha) - _weight_profile_terms(s, alpha)


def _icm_labels(gamma, m, K, lo, hi, alpha):
    """One best-response pass over the labels; ties keep the current label."""
    m = m.copy()
    for i in range(len(m)):
        score = label_scores(i, gamma, m, K, lo, hi, alpha)
        cur = m[i]
        best = int(np.argmax(score))
        if score[best] > score[cur] + 1e-12 * (1.0 + abs(score[cur])):
            m[i] = best
    return m


def _profiled_blocks(gamma, m, K, lo, hi):
    n1, npairs, _ = _counts(gamma, m, K)
    return block_profile(n1, npairs, lo, hi)[1]


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------

def _expected_stats(fp: _Pass):
    ms, Ps, ps_idx, cross, cross_idx = fp.smooth()
    T = fp.T
    w_all = np.bincount(ps_idx, minlength=len(Ps)).astype(float)
    w_first = w_all.copy()
    w_first[ps_idx[T]] -= 1.0   # t = 0..T-1
    w_last = w_all.copy()
    w_last[ps_idx[0]] -= 1.0    # t = 1..T
    G = ms[:-1].T @ ms[:-1] + np.tensordot(w_first, Ps, axes=1)
    G1 = ms[1:].T @ ms[1:] + np.tensordot(w_last, Ps, axes=1)
    wc = np.bincount(cross_idx, minlength=len(cross)).astype(float)
    H = ms[:-1].T @ ms[1:] + np.tensordot(wc, cross, axes=1).T
    Sxy = np.einsum("ti,it->i", ms[1:], fp.Yt.T)
    x0 = ms[0]
    x0sq = ms[0] ** 2 + np.diag(Ps[ps_idx[0]])
    return G, G1, H, Sxy, x0, x0sq


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def em_step(Y: np.ndarray, theta: ModelParams, h: Hyperparams, fp: _Pass | None = None) -> ModelParams:
    """One generalized EM iteration at fixed K."""
    if fp is None:
        fp = _Pass(Y, theta.transition, theta.c, theta.tau, theta.mu)
    G, G1, H, Sxy, x0, x0sq = _expected_stats(fp)
    d, T = Y.shape
    K = theta.K
    h = h.with_K(K)
    alpha = np.asarray(h.alpha)
    if np.any(alpha < 1.0):
        raise ValueError("EM needs alpha >= 1 so the profiled weights stay bounded")
    lo, hi = h.box(K)
    Syy = np.einsum("it,it->i", Y, Y)
    Sxx = np.diag(G1)

    c = (Sxy / theta.tau) / (Sxx / theta.tau + h.xi1 ** -2)
    R = Syy - 2.0 * c * Sxy + c ** 2 * Sxx
    tau = (0.5 * R + h.rho0) / (0.5 * T + h.rho0 + 1.0)
    mu = x0 / (1.0 + h.xi1 ** -2)

    gamma = np.array(theta.gamma, dtype=np.int8)
    A = np.array(theta.transition, dtype=float)
    n1, npairs, _ = _counts(gamma, theta.m, K)
    _icm_edges(np.ascontiguousarray(G), np.ascontiguousarray(H), gamma, A, np.ascontiguousarray(theta.m),
               n1, npairs, lo, hi, float(h.xi0))
    A = _ridge_rows(G, H, gamma, h.xi0)

    m = _icm_labels(gamma, np.array(theta.m), K, lo, hi, alpha)
    B = _profiled_blocks(gamma, m, K, lo, hi)
    p = _weights_hat(np.bincount(m, minlength=K).astype(float), alpha)
    return ModelParams(gamma=gamma, A=A, B=B, m=m, c=c, tau=tau, mu=mu, p=p)


def compact(theta: ModelParams, h: Hyperparams) -> ModelParams:
    """Drop empty clusters and relabel in order of first appearance."""
    m, _ = relabel(theta.m)
    K = int(m.max()) + 1
    hk = h.with_K(K)
    lo, hi = hk.box(K)
    B = _profiled_blocks(theta.gamma, m, K, lo, hi)
    p = _weights_hat(np.bincount(m, minlength=K).astype(float), np.asarray(hk.alpha))
    return theta.replace(m=m, B=B, p=p)


def em_fit(Y, h: Hyperparams, max_iter: int = 200, tol: float = 1e-6,
           init: ModelParams | None = None) -> EMResult:
    """Run EM from ``K = d`` singletons; returns the compacted estimate.

    ``trace`` holds the penalized objective at the start and after every
    iteration (evaluated with ``K = d`` clusters).
    """
    Y = as_array(Y)
    if not np.all(np.isfinite(Y)):
        raise ValueError("Y contains non-finite values")
    d = Y.shape[0]
    if d < 2:
        raise ValueError("need at least two channels")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    h = h.with_K(d)
    theta = initial_params(Y, h) if init is None else init
    if theta.K != d:
        raise ValueError(f"EM starts from K = d = {d} clusters, init has K={theta.K}")

    fp = _Pass(Y, theta.transition, theta.c, theta.tau, theta.mu)
    trace = [fp.loglik + log_prior(theta, h)]
    for _ in range(max_iter):
        theta = em_step(Y, theta, h, fp)
        fp = _Pass(Y, theta.transition, theta.c, theta.tau, theta.mu)
        trace.append(fp.loglik + log_prior(theta, h))
        if abs(trace[-1] - trace[-2]) < tol * max(1.0, abs(trace[-1])):
            break
    theta = compact(theta, h)
    return EMResult(theta, theta.K, np.array(trace))
