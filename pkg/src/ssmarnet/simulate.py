"""Synthetic benchmark systems and ROC scoring.

The benchmark is a third-order clustered VAR with temporally and spatially
correlated model and observation errors, observed with per-channel gains.
``build_example1`` draws the system, ``simulate_example1`` draws data from
it, so several independent series (for example a long one used to build an
empirical null) can share one system.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .model import TimeSeriesMatrix, as_array


@dataclass(frozen=True)
class Example1Config:
    cluster_sizes: tuple[int, ...] = (15, 15, 20)
    T: int = 1000
    within_density: float = 0.9
    between_density: float = 0.09
    snr: float = 10.0
    seed: int = 0
    n_lags: int = 3
    coef_range: tuple[float, float] = (0.1, 0.5)
    max_radius: float = 0.95
    error_ar: float = 0.5
    gain_range: tuple[float, float] = (0.8, 1.2)
    burn_in: int = 200

    def __post_init__(self):
        object.__setattr__(self, "cluster_sizes", tuple(int(s) for s in self.cluster_sizes))
        if not self.cluster_sizes or min(self.cluster_sizes) < 1:
            raise ValueError("cluster_sizes must be positive integers")
        for name in ("within_density", "between_density"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.T < 10:
            raise ValueError("T must be at least 10")
        if self.snr <= 0:
            raise ValueError("snr must be positive")
        if not abs(self.error_ar) < 1:
            raise ValueError("error_ar must lie in (-1, 1)")

    @property
    def d(self) -> int:
        return sum(self.cluster_sizes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Example1Config":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown simulation field(s): {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


@dataclass
class GroundTruth:
    cluster_sizes: list[int]
    lag_coeffs: np.ndarray            # (n_lags, d, d); [l, i, j] acts on x_j(t - l - 1)
    labels: np.ndarray
    extras: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.lag_coeffs.shape[1]

    @property
    def edge_matrix(self) -> np.ndarray:
        """``[i, j]`` true iff some lag coefficient from j to i is nonzero."""
        return np.any(self.lag_coeffs != 0, axis=0)

    @property
    def true_edges(self) -> set[tuple[int, int]]:
        rows, cols = np.nonzero(self.edge_matrix)
        return {(int(j), int(i)) for i, j in zip(rows, cols)}

    @property
    def within_mask(self) -> np.ndarray:
        same = self.labels[:, None] == self.labels[None, :]
        return same & ~np.eye(self.d, dtype=bool)

    @property
    def between_mask(self) -> np.ndarray:
        return self.labels[:, None] != self.labels[None, :]


@dataclass
class Example1System:
    truth: GroundTruth
    gains: np.ndarray
    sigma_model: np.ndarray    # innovation covariance of the model error
    sigma_obs: np.ndarray      # innovation covariance of the observation error (before scaling)
    obs_scale: np.ndarray      # diagonal of D
    error_ar: float
    burn_in: int


def _correlation_block(n: int, rng: np.random.Generator, low: float, high: float, max_tries: int,
                       shrink: bool, min_eig: float) -> np.ndarray:
    off = np.zeros((n, n))
    for _ in range(max_tries):
        U = np.triu(rng.uniform(low, high, (n, n)), 1)
        off = U + U.T
        if n == 1 or 1.0 + np.linalg.eigvalsh(off)[0] > 0:
            return np.eye(n) + off
    if not shrink:
        raise RuntimeError(f"no positive definite {n}x{n} correlation block after {max_tries} draws")
    # blocks beyond roughly 12 nodes are almost never PD under U(0, 0.5); scale the last
    # draw's off-diagonal part just enough to lift its smallest eigenvalue to min_eig
    lam = np.linalg.eigvalsh(off)[0]
    return np.eye(n) + off * ((1.0 - min_eig) / -lam)


def block_correlation(sizes, rng: np.random.Generator, low: float = 0.0, high: float = 0.5,
                      max_tries: int = 100, shrink: bool = True, min_eig: float = 0.05) -> np.ndarray:
    """Block-diagonal matrix, unit diagonal, within-block entries ~ U(low, high), strictly PD.

    Each block is redrawn up to ``max_tries`` times. If none is PD, the last draw's
    off-diagonal entries are scaled down (``shrink=True``) or an error is raised.
    """
    d = sum(sizes)
    S = np.zeros((d, d))
    a = 0
    for n in sizes:
        S[a:a + n, a:a + n] = _correlation_block(n, rng, low, high, max_tries, shrink, min_eig)
        a += n
    return S


def companion(lags: np.ndarray) -> np.ndarray:
    L, d, _ = lags.shape
    C = np.zeros((L * d, L * d))
    C[:d] = np.concatenate(list(lags), axis=1)
    C[d:, :-d] = np.eye((L - 1) * d)
    return C


def spectral_radius(lags: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(companion(lags)))))


def _stabilize(lags: np.ndarray, target: float) -> np.ndarray:
    if spectral_radius(lags) <= target:
        return lags
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if spectral_radius(mid * lags) <= target:
            lo = mid
        else:
            hi = mid
    out = lo * lags
    while spectral_radius(out) > target:
        out *= 0.99
    return out


def stationary_state_variance(lags: np.ndarray, sigma_model: np.ndarray, error_ar: float) -> np.ndarray:
    """Stationary variance of every state under AR(1) model errors."""
    L, d, _ = lags.shape
    n = (L + 1) * d
    # augmented state (x(t), ..., x(t-L+1), eta(t))
    F = np.zeros((n, n))
    F[:d, :L * d] = np.concatenate(list(lags), axis=1)
    F[:d, L * d:] = error_ar * np.eye(d)
    F[d:L * d, :(L - 1) * d] = np.eye((L - 1) * d)
    F[L * d:, L * d:] = error_ar * np.eye(d)
    G = np.zeros((n, d))
    G[:d] = np.eye(d)
    G[L * d:] = np.eye(d)
    P = linalg.solve_discrete_lyapunov(F, G @ sigma_model @ G.T)
    return np.diag(P)[:d].copy()


def build_example1(cfg: Example1Config, rng: np.random.Generator | None = None) -> Example1System:
    """Draw edge pattern, lag coefficients, gains and error covariances."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    sizes = cfg.cluster_sizes
    d = cfg.d
    labels = np.repeat(np.arange(len(sizes)), sizes)
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, cfg.within_density, cfg.between_density)
    edges = rng.random((d, d)) < prob

    L = cfg.n_lags
    lags = np.zeros((L, d, d))
    lo, hi = cfg.coef_range
    # one signed coefficient per edge, divided among the lags by a flat Dirichlet share
    for i, j in zip(*np.nonzero(edges)):
        a = rng.uniform(lo, hi) * rng.choice([-1.0, 1.0])
        lags[:, i, j] = a * rng.dirichlet(np.ones(L))
    lags = _stabilize(lags, cfg.max_radius)

    gains = rng.uniform(*cfg.gain_range, d)
    sigma_model = block_correlation(sizes, rng)
    sigma_obs = block_correlation(sizes, rng)
    signal_var = gains ** 2 * stationary_state_variance(lags, sigma_model, cfg.error_ar)
    # stationary observation-error variance is D_ii / (1 - a^2); match it to signal_var / snr
    obs_scale = signal_var / cfg.snr * (1.0 - cfg.error_ar ** 2)
    truth = GroundTruth(cluster_sizes=list(sizes), lag_coeffs=lags, labels=labels)
    return Example1System(truth, gains, sigma_model, sigma_obs, obs_scale, cfg.error_ar, cfg.burn_in)


def generate_ar1_noise(T: int, coef: float, cov, rng: np.random.Generator) -> np.ndarray:
    """``e(t) = coef e(t-1) + N(0, cov)`` started in its stationary law; shape (d, T)."""
    if not abs(coef) < 1:
        raise ValueError(f"need |coef| < 1, got {coef}")
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    try:
        Lc = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("cov is not positive definite") from exc
    d = cov.shape[0]
    z = Lc @ rng.standard_normal((d, T))
    e = np.empty((d, T))
    e[:, 0] = z[:, 0] / np.sqrt(1.0 - coef ** 2)
    for t in range(1, T):
        e[:, t] = coef * e[:, t - 1] + z[:, t]
    return e


def simulate_example1(system: Example1System, T: int, rng: np.random.Generator,
                      sample_rate_hz: float = 1.0) -> tuple[TimeSeriesMatrix, np.ndarray]:
    """Observed series and the noiseless signal ``c * x``, both (d, T)."""
    lags = system.truth.lag_coeffs
    L, d, _ = lags.shape
    n = T + system.burn_in
    eta = generate_ar1_noise(n, system.error_ar, system.sigma_model, rng)
    x = np.zeros((d, n + L))
    for t in range(n):
        acc = eta[:, t].copy()
        for l in range(L):
            acc += lags[l] @ x[:, L + t - l - 1]
        x[:, L + t] = acc
    x = x[:, L + system.burn_in:]
    root = np.sqrt(system.obs_scale)
    eps = generate_ar1_noise(T, system.error_ar, root[:, None] * system.sigma_obs * root[None, :], rng)
    signal = system.gains[:, None] * x
    return TimeSeriesMatrix(signal + eps, sample_rate_hz), signal


def generate_example1(cfg: Example1Config | None = None, **overrides) -> tuple[TimeSeriesMatrix, GroundTruth]:
    """Draw a benchmark system and one series of length ``cfg.T`` from it."""
    cfg = dataclasses.replace(cfg or Example1Config(), **overrides)
    rng = np.random.default_rng(cfg.seed)
    system = build_example1(cfg, rng)
    Y, signal = simulate_example1(system, cfg.T, rng)
    system.truth.extras.update(gains=system.gains, obs_scale=system.obs_scale)
    return Y, system.truth


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def _candidates(truth: GroundTruth, restrict: str) -> np.ndarray:
    if restrict == "all":
        return ~np.eye(truth.d, dtype=bool)
    if restrict == "within":
        return truth.within_mask
    if restrict == "between":
        return truth.between_mask
    raise ValueError(f"restrict must be all, within or between, got {restrict!r}")


def roc_points(scores, truth: GroundTruth, restrict: str = "all"):
    """``(thresholds, fpr, tpr)`` of the rule ``score >= threshold``, starting at (0, 0)."""
    scores = np.asarray(scores, dtype=float)
    if scores.shape != (truth.d, truth.d):
        raise ValueError(f"scores must be {truth.d}x{truth.d}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    mask = _candidates(truth, restrict)
    s = scores[mask]
    y = truth.edge_matrix[mask]
    P, N = int(y.sum()), int((~y).sum())
    if P == 0 or N == 0:
        raise ValueError(f"need both positives and negatives among {restrict} pairs (got {P} and {N})")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    thresholds = np.r_[np.inf, s[last]]
    return thresholds, np.r_[0.0, fp / N], np.r_[0.0, tp / P]


def roc_curve(scores, truth: GroundTruth, restrict: str = "all") -> tuple[np.ndarray, float]:
    """ROC points ``(FPR, TPR)`` over all distinct thresholds and the trapezoid AUC."""
    _, fpr, tpr = roc_points(scores, truth, restrict)
    return np.column_stack([fpr, tpr]), float(np.trapezoid(tpr, fpr))


def rates_at(selected, truth: GroundTruth, restrict: str = "all") -> tuple[float, float]:
    """``(TPR, FPR)`` of a boolean selection matrix ``[i, j]`` (edge j -> i)."""
    mask = _candidates(truth, restrict)
    sel = np.asarray(selected, dtype=bool)[mask]
    y = truth.edge_matrix[mask]
    return float(sel[y].mean()) if y.any() else float("nan"), float(sel[~y].mean()) if (~y).any() else float("nan")


def lag1_ls_scores(Y) -> np.ndarray:
    """``|A|`` of a lag-one least-squares VAR fit to standardized data."""
    Y = as_array(Y)
    Z = (Y - Y.mean(axis=1, keepdims=True)) / Y.std(axis=1, keepdims=True)
    A = np.linalg.lstsq(Z[:, :-1].T, Z[:, 1:].T, rcond=None)[0].T
    return np.abs(A)


# ---------------------------------------------------------------------------
# synthetic recordings with a known onset node
# ---------------------------------------------------------------------------

PERIOD_LABELS = ("pre2", "pre1", "post1", "post2")


@dataclass(frozen=True)
class OnsetConfig:
    """A VAR(1) recording in which one node starts driving all others at each onset.

    The model runs at ``model_rate_hz``; the recording is upsampled to
    ``sample_rate_hz`` and contaminated with line noise and a common-mode
    artifact, which preprocessing is expected to remove.
    """

    d: int = 8
    source: int = 2
    n_seizures: int = 3
    period_s: float = 3.0
    spacing_s: float = 20.0
    model_rate_hz: float = 1000.0
    sample_rate_hz: float = 2000.0
    self_coef: float = 0.5
    baseline_coef: float = 0.15
    drive: float = 0.4
    n_targets: int = 4
    line_hz: float = 60.0
    line_amp: float = 2.0
    common_amp: float = 4.0
    obs_sd: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.source < self.d:
            raise ValueError("source must index a node")
        if not 1 <= self.n_targets < self.d:
            raise ValueError("n_targets must lie in [1, d - 1]")
        if self.spacing_s < 4 * self.period_s:
            raise ValueError("spacing_s must leave room for four periods around each onset")
        ratio = self.sample_rate_hz / self.model_rate_hz
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError("sample_rate_hz must be an integer multiple of model_rate_hz")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def onset_transitions(cfg: OnsetConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Baseline and ictal transition matrices."""
    d = cfg.d
    base = cfg.self_coef * np.eye(d)
    for i in range(d):
        base[(i + 1) % d, i] = cfg.baseline_coef * rng.choice([-1.0, 1.0])
    ictal = base.copy()
    # a node driving every other node looks like a common mode, which
    # first-component removal would largely cancel
    others = np.flatnonzero(np.arange(d) != cfg.source)
    targets = rng.choice(others, cfg.n_targets, replace=False)
    ictal[targets, cfg.source] += cfg.drive
    for F in (base, ictal):
        rad = np.max(np.abs(np.linalg.eigvals(F)))
        if rad >= 0.95:
            raise ValueError(f"transition is not stable enough (spectral radius {rad:.3f})")
    return base, ictal


def generate_onset_recording(cfg: OnsetConfig | None = None) -> tuple[TimeSeriesMatrix, dict]:
    """Raw recording and a manifest ``{sample_rate_hz, seizures: [{onset_s, periods}]}``."""
    from scipy import signal

    cfg = cfg or OnsetConfig()
    rng = np.random.default_rng(cfg.seed)
    base, ictal = onset_transitions(cfg, rng)
    fs = cfg.model_rate_hz
    onsets = [cfg.spacing_s * (k + 0.5) for k in range(cfg.n_seizures)]
    n = int(round(cfg.spacing_s * cfg.n_seizures * fs))
    ictal_on = np.zeros(n, dtype=bool)
    for onset in onsets:
        ictal_on[int(round(onset * fs)):int(round((onset + 2 * cfg.period_s) * fs))] = True

    x = np.zeros((cfg.d, n))
    e = rng.standard_normal((cfg.d, n))
    prev = np.zeros(cfg.d)
    for t in range(n):
        prev = (ictal if ictal_on[t] else base) @ prev + e[:, t]
        x[:, t] = prev

    up = int(round(cfg.sample_rate_hz / fs))
    raw = signal.resample_poly(x, up, 1, axis=1) if up > 1 else x
    tt = np.arange(raw.shape[1]) / cfg.sample_rate_hz
    raw = raw + cfg.obs_sd * rng.standard_normal(raw.shape)
    raw += cfg.line_amp * np.sin(2 * np.pi * cfg.line_hz * tt + rng.uniform(0, 2 * np.pi, (cfg.d, 1)))
    # slow common-mode artifact with channel-specific loadings
    common = np.convolve(rng.standard_normal(raw.shape[1]), np.ones(200) / np.sqrt(200), mode="same")
    raw += cfg.common_amp * rng.uniform(0.5, 1.5, (cfg.d, 1)) * common[None, :]

    P = cfg.period_s
    manifest = {
        "sample_rate_hz": cfg.sample_rate_hz,
        "source": cfg.source,
        "seizures": [
            {"onset_s": onset,
             "periods": [{"label": lab, "start_s": a * P, "end_s": (a + 1) * P}
                         for lab, a in zip(PERIOD_LABELS, (-2, -1, 0, 1))]}
            for onset in onsets
        ],
    }
    return TimeSeriesMatrix(raw, cfg.sample_rate_hz), manifest
