"""Posterior probabilities, empirical-null thresholds, clusters, edges and R-hat."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .model import NetworkEstimate, PosteriorSummary, TimeSeriesMatrix


def posterior_summary(out) -> PosteriorSummary:
    """Clustering and edge probabilities from a chain's integer accumulators."""
    S = int(out.n_retained)
    if S < 1:
        raise ValueError("chain output has no retained draws")
    return PosteriorSummary(
        clust_prob=np.asarray(out.same_cluster_sum, dtype=float) / S,
        edge_prob=np.asarray(out.gamma_sum, dtype=float) / S,
        num_samples=S,
    )


def null_offsets(d: int, T: int, length: int, rng: np.random.Generator) -> np.ndarray:
    """Random start indices, one per channel, pairwise at least ``2T`` apart.

    Sorted starts are drawn as ``sorted uniform integers + 2T * rank`` (every
    feasible configuration of gaps is reachable), then assigned to channels in
    random order.
    """
    need = 2 * T * d + T
    if length < need:
        raise ValueError(f"series of length {length} is too short: need at least {need} = 2*T*d + T")
    slack = length - T - 2 * T * (d - 1)
    base = np.sort(rng.integers(0, slack + 1, size=d))
    starts = base + 2 * T * np.arange(d)
    return rng.permutation(starts)


def build_null_dataset(long_series, T: int, rng: np.random.Generator) -> TimeSeriesMatrix:
    """Decouple channels by taking each from a different, well separated window."""
    values = long_series.values if isinstance(long_series, TimeSeriesMatrix) else np.asarray(long_series, float)
    d, L = values.shape
    starts = null_offsets(d, T, L, rng)
    out = np.stack([values[i, s:s + T] for i, s in enumerate(starts)])
    if isinstance(long_series, TimeSeriesMatrix):
        return long_series.with_values(out)
    return TimeSeriesMatrix(out)


def _offdiag(M: np.ndarray) -> np.ndarray:
    return M[~np.eye(M.shape[0], dtype=bool)]


def calibrate_thresholds(null_summaries: Sequence[PosteriorSummary], pvalue: float = 0.01) -> tuple[float, float]:
    """``(1 - pvalue)`` quantiles of pooled off-diagonal null probabilities."""
    if not 0.0 < pvalue < 1.0:
        raise ValueError("pvalue must lie in (0, 1)")
    if not null_summaries:
        raise ValueError("need at least one null summary")
    m = np.concatenate([_offdiag(s.clust_prob) for s in null_summaries])
    g = np.concatenate([_offdiag(s.edge_prob) for s in null_summaries])
    if m.size == 0:
        raise ValueError("null summaries have no off-diagonal entries")
    q = 1.0 - pvalue
    return float(np.quantile(m, q)), float(np.quantile(g, q))


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)

    def groups(self) -> list[list[int]]:
        out: dict[int, list[int]] = {}
        for x in range(len(self.parent)):
            out.setdefault(self.find(x), []).append(x)
        return sorted(out.values())


def extract_clusters(summary: PosteriorSummary, threshold_m: float) -> list[list[int]]:
    """Connected components of ``{(i, j): clust_prob[i, j] > threshold_m}``."""
    P = summary.clust_prob
    uf = UnionFind(P.shape[0])
    for i, j in zip(*np.nonzero(P > threshold_m)):
        if i != j:
            uf.union(int(i), int(j))
    return uf.groups()


def select_edges(summary: PosteriorSummary, threshold_gamma: float) -> list[tuple[int, int]]:
    """Directed edges ``(j, i)`` meaning ``j -> i`` with ``edge_prob[i, j] > threshold``."""
    rows, cols = np.nonzero(summary.edge_prob > threshold_gamma)
    return sorted((int(j), int(i)) for i, j in zip(rows, cols))


def network_estimate(summary: PosteriorSummary, threshold_m: float, threshold_gamma: float) -> NetworkEstimate:
    edges = select_edges(summary, threshold_gamma)
    return NetworkEstimate(
        clusters=extract_clusters(summary, threshold_m),
        edges=edges,
        threshold_m=float(threshold_m),
        threshold_gamma=float(threshold_gamma),
        edge_weights={e: float(summary.edge_prob[e[1], e[0]]) for e in edges},
    )


def gelman_rubin(traces: Sequence[Sequence[float]]) -> float:
    """Potential scale reduction factor of one scalar over several chains."""
    x = np.asarray(traces, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least two chains of equal length")
    n = x.shape[1]
    if n < 10:
        raise ValueError("chains must have at least 10 draws")
    W = x.var(axis=1, ddof=1).mean()
    if W <= 0:
        raise ValueError("zero within-chain variance: trace is degenerate")
    B = n * x.mean(axis=1).var(ddof=1)
    return float(np.sqrt((n - 1) / n + B / (n * W)))
