"""Preprocessing, segmentation and onset-zone scoring for multichannel recordings.

The flow is: down-sample, notch out line noise, remove the first principal
component, cut each seizure's periods into fixed windows, fit every window,
average the posterior probabilities within each period, and compare the
average directional connectivity (ADC) of every node across periods.
"""

from __future__ import annotations

import dataclasses
import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import signal

from .fitting import FitConfig, fit_dataset
from .model import Hyperparams, PosteriorSummary, TimeSeriesMatrix

PRE2, PRE1, POST1, POST2 = "pre2", "pre1", "post1", "post2"


def _integer_factor(rate: float, target: float) -> int:
    ratio = rate / target
    factor = int(round(ratio))
    if factor < 1 or abs(ratio - factor) > 1e-9 * ratio:
        raise ValueError(f"target rate {target} Hz is not an integer divisor of {rate} Hz")
    return factor


def antialias_sos(rate: float, target: float) -> np.ndarray:
    """Elliptic low-pass passing ``0.4 * target`` and stopping from ``0.45 * target``.

    Each pass gives 0.05 dB ripple and 30 dB stopband; run forward-backward
    that doubles to 0.1 dB and 60 dB.
    """
    wp, ws = 0.4 * target, 0.45 * target
    order, wn = signal.ellipord(wp, ws, 0.05, 30.0, fs=rate)
    return signal.ellip(order, 0.05, 30.0, wn, btype="low", output="sos", fs=rate)


def downsample(Y: TimeSeriesMatrix, target_hz: float) -> TimeSeriesMatrix:
    factor = _integer_factor(Y.sample_rate_hz, target_hz)
    if factor == 1:
        return Y.with_values(Y.values.copy())
    sos = antialias_sos(Y.sample_rate_hz, target_hz)
    b, a = signal.sos2tf(sos)
    if np.abs(np.roots(a)).max() < 1 - 1e-9:
        # Gustafsson's initial conditions keep stopband tones from leaking in at the edges
        filtered = signal.filtfilt(b, a, Y.values, axis=1, method="gust")
    else:
        filtered = signal.sosfiltfilt(sos, Y.values, axis=1)
    return Y.with_values(filtered[:, ::factor], sample_rate_hz=Y.sample_rate_hz / factor)


def _harmonic_extension(x: np.ndarray, w: float, n_pad: int) -> np.ndarray:
    """``n_pad`` samples preceding ``x``.

    A least-squares fit of ``{1, cos wk, sin wk}`` to the first ``n_pad + 1``
    samples splits the edge into a sinusoid at ``w``, continued exactly, and a
    remainder, extended by odd reflection. Both parts are linear in ``x``.
    """
    k = np.arange(n_pad + 1)
    basis = np.column_stack([np.ones(k.size), np.cos(w * k), np.sin(w * k)])
    coef = np.linalg.lstsq(basis, x[:, :k.size].T, rcond=None)[0][1:]
    r = x[:, :k.size] - (basis[:, 1:] @ coef).T
    back = np.arange(1, n_pad + 1)
    ext = (np.column_stack([np.cos(w * back), -np.sin(w * back)]) @ coef).T + 2 * r[:, :1] - r[:, back]
    return ext[:, ::-1]


def notch_filter(Y: TimeSeriesMatrix, freq_hz: float = 60.0, q: float = 30.0) -> TimeSeriesMatrix:
    """Zero-phase second-order notch.

    Plain reflection padding leaves edge transients of the notched tone that
    decay over ``q / (pi * freq)`` seconds; the padding here continues the
    tone instead, so a pure tone is removed down to the edges.
    """
    nyq = Y.sample_rate_hz / 2
    if not 0 < freq_hz < nyq:
        raise ValueError(f"notch frequency {freq_hz} Hz must lie in (0, {nyq}) Hz")
    if q <= 0:
        raise ValueError("q must be positive")
    fs = Y.sample_rate_hz
    b, a = signal.iirnotch(freq_hz, q, fs=fs)
    x = Y.values
    n_pad = int(min(Y.T - 1, np.ceil(6 * q * fs / (np.pi * freq_hz))))
    w = 2 * np.pi * freq_hz / fs
    left = _harmonic_extension(x, w, n_pad)
    right = _harmonic_extension(x[:, ::-1], w, n_pad)[:, ::-1]
    y = signal.filtfilt(b, a, np.concatenate([left, x, right], axis=1), axis=1, padtype=None)
    return Y.with_values(y[:, n_pad:n_pad + Y.T])


def remove_first_pc(Y: TimeSeriesMatrix) -> TimeSeriesMatrix:
    """Center each channel and project out the top principal direction."""
    X = Y.values - Y.values.mean(axis=1, keepdims=True)
    scale = np.abs(Y.values).max()
    if scale == 0 or np.abs(X).max() <= 1e-14 * scale:
        raise ValueError("input has rank zero after centering")
    _, vecs = np.linalg.eigh(X @ X.T)
    v = vecs[:, -1]
    return Y.with_values(X - np.outer(v, v @ X))


def segment_series(Y: TimeSeriesMatrix, window_s: float,
                   periods: Sequence[tuple[str, float, float]]) -> list[tuple[str, TimeSeriesMatrix]]:
    """Consecutive non-overlapping windows aligned to each period start."""
    if window_s <= 0:
        raise ValueError("window_s must be positive")
    fs = Y.sample_rate_hz
    w = int(round(window_s * fs))
    out = []
    for label, start_s, end_s in periods:
        a, b = int(round(start_s * fs)), int(round(end_s * fs))
        if a < 0 or b > Y.T:
            raise ValueError(f"period {label!r} [{start_s}, {end_s}] s lies outside the recording")
        n = (b - a) // w
        if n < 1:
            raise ValueError(f"period {label!r} is shorter than one {window_s} s window")
        out.extend((label, Y.with_values(Y.values[:, a + k * w:a + (k + 1) * w])) for k in range(n))
    return out


def average_probabilities(groups: Mapping[str, Sequence[PosteriorSummary]]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-period elementwise means ``(clust_prob, edge_prob)``."""
    out = {}
    d = None
    for label, summaries in groups.items():
        if not summaries:
            raise ValueError(f"period {label!r} has no summaries")
        for s in summaries:
            if d is None:
                d = s.d
            if s.d != d:
                raise ValueError(f"summary of dimension {s.d} in period {label!r}, expected {d}")
        out[label] = (np.mean([s.clust_prob for s in summaries], axis=0),
                      np.mean([s.edge_prob for s in summaries], axis=0))
    return out


def adc_profile(edge_prob_avg) -> np.ndarray:
    """Average outgoing edge probability of each node (column means)."""
    P = np.asarray(edge_prob_avg, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError("edge probability matrix must be square")
    return P.mean(axis=0)


def soz_candidates(adc_by_seizure: Sequence[Mapping[str, np.ndarray]]) -> set[int]:
    """Nodes whose mean onset ADC change exceeds every pre-seizure change.

    Each item maps ``pre2``, ``pre1``, ``post1`` (``post2`` optional) to an
    ADC vector for one seizure.
    """
    if not adc_by_seizure:
        raise ValueError("need at least one seizure")
    onset, baseline = [], []
    d = None
    for k, adc in enumerate(adc_by_seizure):
        missing = [p for p in (PRE2, PRE1, POST1) if p not in adc]
        if missing:
            raise ValueError(f"seizure {k} lacks period(s) {missing}; two pre-seizure periods and post1 are required")
        vecs = {p: np.asarray(adc[p], dtype=float) for p in (PRE2, PRE1, POST1)}
        for p, v in vecs.items():
            d = v.size if d is None else d
            if v.shape != (d,):
                raise ValueError(f"seizure {k} period {p} has ADC of shape {v.shape}, expected ({d},)")
        onset.append(vecs[POST1] - vecs[PRE1])
        baseline.append(np.abs(vecs[PRE1] - vecs[PRE2]))
    delta = np.mean(onset, axis=0)
    threshold = np.max(baseline)
    return {int(j) for j in np.flatnonzero(delta > threshold)}


# ---------------------------------------------------------------------------
# end to end
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    fit: FitConfig
    target_hz: float = 1000.0
    notch_hz: float | None = 60.0
    notch_q: float = 30.0
    notch_first: bool = False
    remove_pc: bool = True
    window_s: float = 1.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        if "fit" not in data:
            raise ValueError("pipeline config needs a 'fit' section")
        fit = FitConfig.from_dict(data.pop("fit"))
        known = {f.name for f in dataclasses.fields(cls)} - {"fit"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown pipeline field(s): {sorted(unknown)}")
        return cls(fit=fit, **data)


@dataclass
class PipelineResult:
    adc: list[dict[str, np.ndarray]]                      # per seizure, per period
    averages: list[dict[str, tuple[np.ndarray, np.ndarray]]]
    candidates: set[int]
    n_segments: int
    segment_summaries: list[list[tuple[str, PosteriorSummary]]] = field(repr=False, default_factory=list)


def preprocess(Y: TimeSeriesMatrix, cfg: PipelineConfig) -> TimeSeriesMatrix:
    notch = (lambda Z: notch_filter(Z, cfg.notch_hz, cfg.notch_q)) if cfg.notch_hz else (lambda Z: Z)
    if cfg.notch_first:
        Y = downsample(notch(Y), cfg.target_hz)
    else:
        Y = notch(downsample(Y, cfg.target_hz))
    return remove_first_pc(Y) if cfg.remove_pc else Y


def parse_manifest(manifest: Mapping) -> list[tuple[float, list[tuple[str, float, float]]]]:
    """``[(onset_s, [(label, start_s, end_s), ...]), ...]`` with period times relative to onset."""
    if "seizures" not in manifest or not manifest["seizures"]:
        raise ValueError("manifest field 'seizures' is missing or empty")
    out = []
    for k, sz in enumerate(manifest["seizures"]):
        if "onset_s" not in sz:
            raise ValueError(f"manifest field 'seizures[{k}].onset_s' is missing")
        if "periods" not in sz:
            raise ValueError(f"manifest field 'seizures[{k}].periods' is missing")
        periods = []
        for n, p in enumerate(sz["periods"]):
            for key in ("label", "start_s", "end_s"):
                if key not in p:
                    raise ValueError(f"manifest field 'seizures[{k}].periods[{n}].{key}' is missing")
            if not p["end_s"] > p["start_s"]:
                raise ValueError(f"manifest field 'seizures[{k}].periods[{n}]' has end_s <= start_s")
            periods.append((str(p["label"]), float(p["start_s"]), float(p["end_s"])))
        out.append((float(sz["onset_s"]), periods))
    return out


def segment_seed(seed: int, seizure: int, index: int) -> int:
    digest = hashlib.sha256(f"{seed}:{seizure}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _fit_segment(args):
    Y, cfg, h = args
    return fit_dataset(Y, cfg, h).summary


def run_pipeline(Y: TimeSeriesMatrix, manifest: Mapping, cfg: PipelineConfig, jobs: int = 1,
                 h: Hyperparams | None = None) -> PipelineResult:
    """Preprocess, segment, fit every window, and score onset candidates."""
    seizures = parse_manifest(manifest)
    Z = preprocess(Y, cfg)
    tasks, owners = [], []
    for k, (onset, periods) in enumerate(seizures):
        absolute = [(lab, onset + a, onset + b) for lab, a, b in periods]
        for n, (label, seg) in enumerate(segment_series(Z, cfg.window_s, absolute)):
            tasks.append((seg, dataclasses.replace(cfg.fit, seed=segment_seed(cfg.fit.seed, k, n)), h))
            owners.append((k, label))
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            summaries = list(pool.map(_fit_segment, tasks))
    else:
        summaries = [_fit_segment(t) for t in tasks]

    per_seizure: list[list[tuple[str, PosteriorSummary]]] = [[] for _ in seizures]
    for (k, label), s in zip(owners, summaries):
        per_seizure[k].append((label, s))
    averages, adc = [], []
    for items in per_seizure:
        groups: dict[str, list[PosteriorSummary]] = {}
        for label, s in items:
            groups.setdefault(label, []).append(s)
        avg = average_probabilities(groups)
        averages.append(avg)
        adc.append({label: adc_profile(pg) for label, (_, pg) in avg.items()})
    return PipelineResult(adc=adc, averages=averages, candidates=soz_candidates(adc),
                          n_segments=len(tasks), segment_summaries=per_seizure)
