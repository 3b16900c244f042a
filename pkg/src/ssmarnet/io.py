"""File formats. Node ids and cluster labels are 1-based on disk, 0-based in memory."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .model import ModelParams, NetworkEstimate, PosteriorSummary, TimeSeriesMatrix
from .sampler import ChainOutput
from .simulate import GroundTruth


class SchemaError(ValueError):
    """A data file is missing a field or has one of the wrong form."""


def require(data: Mapping, key: str, where: str = "") -> Any:
    if not isinstance(data, Mapping):
        raise SchemaError(f"{where or 'document'} must be a JSON object")
    if key not in data:
        raise SchemaError(f"missing field '{where + '.' if where else ''}{key}'")
    return data[key]


def _matrix(data: Mapping, key: str, where: str, shape=None) -> np.ndarray:
    value = require(data, key, where)
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"field '{where}.{key}' is not numeric") from exc
    if shape is not None and arr.shape != shape:
        raise SchemaError(f"field '{where}.{key}' has shape {arr.shape}, expected {shape}")
    return arr


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path) -> Any:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path} is not valid JSON: {exc}") from exc


def write_rows(path, header, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# time series
# ---------------------------------------------------------------------------

def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def write_timeseries(path, Y: TimeSeriesMatrix) -> None:
    """CSV with one row per channel after a header of channel labels, plus a JSON sidecar."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(Y.channel_labels)
        w.writerows([repr(float(v)) for v in row] for row in Y.values.T)
    write_json(sidecar_path(path), {"sample_rate_hz": Y.sample_rate_hz, "channel_labels": list(Y.channel_labels)})


def read_timeseries(path, sample_rate_hz: float | None = None) -> TimeSeriesMatrix:
    """Read a series written by :func:`write_timeseries` or a bare numeric CSV.

    A bare CSV has one row per channel (no header). A header row of labels
    marks the column-per-channel layout used by :func:`write_timeseries`.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(f) if r]
    if not rows:
        raise SchemaError(f"{path} is empty")
    labels: tuple[str, ...] = ()
    try:
        [float(v) for v in rows[0]]
        values = np.array(rows, dtype=float)
    except ValueError:
        labels = tuple(rows[0])
        try:
            values = np.array(rows[1:], dtype=float).T
        except ValueError as exc:
            raise SchemaError(f"{path} has non-numeric or ragged data rows") from exc
    meta_path = sidecar_path(path)
    rate = 1.0
    if meta_path.is_file():
        meta = read_json(meta_path)
        rate = float(require(meta, "sample_rate_hz", meta_path.name))
        labels = tuple(meta.get("channel_labels", labels))
    if sample_rate_hz is not None:
        rate = sample_rate_hz
    return TimeSeriesMatrix(values, rate, labels)


# ---------------------------------------------------------------------------
# model objects
# ---------------------------------------------------------------------------

def params_to_dict(theta: ModelParams) -> dict:
    return {
        "gamma": theta.gamma.tolist(), "A": theta.A.tolist(), "B": theta.B.tolist(),
        "m": (theta.m + 1).tolist(), "c": theta.c.tolist(), "tau": theta.tau.tolist(),
        "mu": theta.mu.tolist(), "p": theta.p.tolist(),
    }


def params_from_dict(data: Mapping, where: str = "theta") -> ModelParams:
    fields = {k: require(data, k, where) for k in ("gamma", "A", "B", "m", "c", "tau", "mu", "p")}
    m = np.asarray(fields["m"])
    if m.size and m.min() < 1:
        raise SchemaError(f"field '{where}.m' must hold 1-based cluster labels")
    fields["m"] = m - 1
    try:
        return ModelParams(**fields)
    except ValueError as exc:
        raise SchemaError(f"{where}: {exc}") from exc


def summary_to_dict(s: PosteriorSummary) -> dict:
    return {"clust_prob": s.clust_prob.tolist(), "edge_prob": s.edge_prob.tolist(), "num_samples": s.num_samples}


def summary_from_dict(data: Mapping, where: str = "summary") -> PosteriorSummary:
    cp = _matrix(data, "clust_prob", where)
    ep = _matrix(data, "edge_prob", where, cp.shape)
    S = require(data, "num_samples", where)
    if not isinstance(S, int) or S < 1:
        raise SchemaError(f"field '{where}.num_samples' must be a positive integer")
    for key, M in (("clust_prob", cp), ("edge_prob", ep)):
        if M.ndim != 2 or M.shape[0] != M.shape[1] or np.any((M < 0) | (M > 1)):
            raise SchemaError(f"field '{where}.{key}' must be a square matrix with entries in [0, 1]")
    return PosteriorSummary(cp, ep, S)


def chain_to_dict(out: ChainOutput) -> dict:
    data = {
        "gamma_sum": out.gamma_sum.tolist(), "same_cluster_sum": out.same_cluster_sum.tolist(),
        "n_retained": int(out.n_retained), "seed": out.seed,
    }
    if out.final_state is not None:
        data["final_state"] = params_to_dict(out.final_state)
    return data


def chain_from_dict(data: Mapping, where: str = "chain") -> ChainOutput:
    g = np.asarray(require(data, "gamma_sum", where), dtype=np.int64)
    s = np.asarray(require(data, "same_cluster_sum", where), dtype=np.int64)
    n = require(data, "n_retained", where)
    if g.shape != s.shape or g.ndim != 2:
        raise SchemaError(f"fields '{where}.gamma_sum' and '{where}.same_cluster_sum' must be equal square matrices")
    final = params_from_dict(data["final_state"], f"{where}.final_state") if "final_state" in data else None
    return ChainOutput(gamma_sum=g, same_cluster_sum=s, n_retained=int(n), final_state=final, seed=data.get("seed"))


def write_traces(path, traces: Mapping[str, np.ndarray]) -> None:
    names = list(traces)
    cols = [np.asarray(traces[n]) for n in names]
    write_rows(path, names, ([repr(float(c[k])) for c in cols] for k in range(len(cols[0]) if cols else 0)))


def read_traces(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise SchemaError(f"{path} is empty")
    data = np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))
    return {name: data[:, k] for k, name in enumerate(rows[0])}


def network_to_dict(net: NetworkEstimate) -> dict:
    return {
        "clusters": [[i + 1 for i in c] for c in net.clusters],
        "edges": [[j + 1, i + 1] for j, i in net.edges],
        "thresholds": {"threshold_m": net.threshold_m, "threshold_gamma": net.threshold_gamma},
    }


def write_network_tables(prefix, net: NetworkEstimate) -> None:
    write_rows(f"{prefix}_edges.csv", ["from", "to", "probability"],
               [[j + 1, i + 1, repr(net.edge_weights.get((j, i), float("nan")))] for j, i in net.edges])
    write_rows(f"{prefix}_clusters.csv", ["node", "cluster"],
               sorted([i + 1, k + 1] for k, c in enumerate(net.clusters) for i in c))


def truth_to_dict(truth: GroundTruth) -> dict:
    return {
        "cluster_sizes": list(map(int, truth.cluster_sizes)),
        "labels": (truth.labels + 1).tolist(),
        "edges": sorted([j + 1, i + 1] for j, i in truth.true_edges),
        "lag_coeffs": truth.lag_coeffs.tolist(),
    }


def truth_from_dict(data: Mapping, where: str = "truth") -> GroundTruth:
    sizes = [int(s) for s in require(data, "cluster_sizes", where)]
    lags = _matrix(data, "lag_coeffs", where)
    d = sum(sizes)
    if lags.ndim != 3 or lags.shape[1:] != (d, d):
        raise SchemaError(f"field '{where}.lag_coeffs' must have shape (lags, {d}, {d})")
    labels = np.asarray(data.get("labels", np.repeat(np.arange(1, len(sizes) + 1), sizes))) - 1
    return GroundTruth(cluster_sizes=sizes, lag_coeffs=lags, labels=labels)
