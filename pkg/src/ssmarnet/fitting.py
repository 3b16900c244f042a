"""EM initialisation followed by Gibbs chains: the standard fit of one dataset."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .em import EMResult, compact, em_fit
from .inference import posterior_summary
from .model import Hyperparams, ModelParams, PosteriorSummary, as_array, default_hyperparams
from .sampler import ChainConfig, ChainOutput, merge_chains, run_chains


@dataclass(frozen=True)
class FitConfig:
    seed: int
    n_iter: int = 10000
    n_burnin: int = 5000
    thin: int = 1
    n_chains: int = 1
    K: int | None = None
    em_max_iter: int = 200
    em_tol: float = 1e-6
    trace_A: object = "auto"

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if self.K is not None and self.K < 1:
            raise ValueError("K must be a positive integer")
        self.chain_config()          # validates the chain fields

    def chain_config(self, K: int | None = None) -> ChainConfig:
        return ChainConfig(n_iter=self.n_iter, n_burnin=self.n_burnin, thin=self.thin, seed=self.seed,
                           K=K, trace_A=self.trace_A)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "FitConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown fit field(s): {sorted(unknown)}")
        return cls(**data)


@dataclass
class FitResult:
    em: EMResult
    init: ModelParams
    chains: list[ChainOutput]
    output: ChainOutput
    summary: PosteriorSummary
    hyperparams: Hyperparams


def set_cluster_count(theta: ModelParams, K: int, h: Hyperparams) -> ModelParams:
    """Map a labelled estimate onto exactly ``K`` clusters.

    Extra clusters are added empty. When there are too many, the ``K - 1``
    largest keep their labels and the rest are merged into one.
    """
    theta = compact(theta, h.with_K(theta.K))
    sizes = np.bincount(theta.m, minlength=theta.K)
    if theta.K > K:
        keep = np.argsort(-sizes, kind="stable")[:K - 1]
        new = np.full(theta.K, K - 1)
        new[keep] = np.arange(K - 1)
        m = new[theta.m]
    else:
        m = theta.m
    hk = h.with_K(K)
    lo, hi = hk.box(K)
    B = 0.5 * (lo + hi)
    counts = np.bincount(m, minlength=K)
    for k in range(K):
        for l in range(K):
            rows, cols = np.flatnonzero(m == k), np.flatnonzero(m == l)
            if rows.size and cols.size:
                B[k, l] = np.clip(theta.gamma[np.ix_(rows, cols)].mean(), lo[k, l], hi[k, l])
    p = (counts + 1.0) / (counts.sum() + K)
    return theta.replace(m=m, B=B, p=p)


def fit_dataset(Y, cfg: FitConfig, h: Hyperparams | None = None, jobs: int = 1) -> FitResult:
    """EM from singletons, then ``cfg.n_chains`` chains started at the EM estimate."""
    Y = as_array(Y)
    h = h or default_hyperparams(1)
    em = em_fit(Y, h, max_iter=cfg.em_max_iter, tol=cfg.em_tol)
    K = cfg.K or em.K_selected
    hk = h.with_K(K)
    init = set_cluster_count(em.theta, K, h)
    chains = run_chains(Y, init, cfg.chain_config(K), hk, cfg.n_chains, jobs=jobs)
    output = merge_chains(chains) if len(chains) > 1 else chains[0]
    return FitResult(em=em, init=init, chains=chains, output=output, summary=posterior_summary(output),
                     hyperparams=hk)
