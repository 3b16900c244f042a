"""Command-line entry point.

Every subcommand writes ``manifest.json`` into its output directory with the
resolved configuration, seed and SHA-256 of every input file, so a run can be
repeated exactly. Settings come from flags, then from the subcommand's
section of a JSON config file (``--config`` or ``$SSMAR_CONFIG``), then from
built-in defaults.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, io
from .fitting import FitConfig, fit_dataset
from .inference import (
    build_null_dataset, calibrate_thresholds, gelman_rubin, network_estimate,
)
from .model import Hyperparams
from .pipeline import PipelineConfig, run_pipeline
from .sampler import chain_seeds
from .simulate import (
    Example1Config, build_example1, lag1_ls_scores, roc_curve, roc_points, simulate_example1,
)

CONFIG_ENV = "SSMAR_CONFIG"


def _load_section(args, name: str) -> dict:
    path = args.config or os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    data = io.read_json(path)
    if not isinstance(data, dict):
        raise io.SchemaError(f"config {path} must be a JSON object")
    section = data.get(name, {})
    if not isinstance(section, dict):
        raise io.SchemaError(f"config field '{name}' must be an object")
    return dict(section)


def _manifest(args, out: Path, config: dict, inputs: list, outputs: list) -> None:
    io.write_json(out / "manifest.json", {
        "command": args.command,
        "version": __version__,
        "seed": getattr(args, "seed", None),
        "config": config,
        "inputs": {str(p): io.file_sha256(p) for p in inputs},
        "outputs": sorted(str(Path(o).relative_to(out)) for o in outputs),
    })


def _default_jobs() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# shared fit options
# ---------------------------------------------------------------------------

def _add_fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k", type=int, help="number of clusters (default: chosen by EM)")
    p.add_argument("--iters", type=int, help="Gibbs iterations per chain (default 10000)")
    p.add_argument("--burnin", type=int, help="discarded iterations (default: half of --iters)")
    p.add_argument("--thin", type=int)
    p.add_argument("--chains", type=int, help="independent chains (default 1)")
    p.add_argument("--em-iters", type=int, help="maximum EM iterations (default 200)")


def _fit_settings(args, section: dict) -> tuple[FitConfig, Hyperparams]:
    h = Hyperparams.from_dict(section.pop("hyperparams")) if "hyperparams" in section else Hyperparams()
    flags = {"K": args.k, "n_iter": args.iters, "n_burnin": args.burnin, "thin": args.thin,
             "n_chains": args.chains, "em_max_iter": args.em_iters}
    section.update({k: v for k, v in flags.items() if v is not None})
    if (args.iters is not None and args.burnin is None) or ("n_iter" in section and "n_burnin" not in section):
        section["n_burnin"] = section["n_iter"] // 2
    section["seed"] = args.seed
    return FitConfig.from_dict(section), h


def _config_record(cfg: FitConfig, h: Hyperparams) -> dict:
    return {"fit": cfg.to_dict(), "hyperparams": h.to_dict()}


def _write_fit(out: Path, res, outputs: list) -> None:
    files = {
        "chain_output.json": io.chain_to_dict(res.output),
        "summary.json": io.summary_to_dict(res.summary),
        "em.json": {"theta_hat": io.params_to_dict(res.em.theta), "K_selected": res.em.K_selected},
    }
    for name, obj in files.items():
        io.write_json(out / name, obj)
        outputs.append(out / name)
    io.write_rows(out / "em_trace.csv", ["iteration", "objective"],
                  [[k, repr(float(v))] for k, v in enumerate(res.em.trace)])
    outputs.append(out / "em_trace.csv")
    for k, chain in enumerate(res.chains, 1):
        io.write_traces(out / f"traces_chain{k}.csv", chain.traces)
        outputs.append(out / f"traces_chain{k}.csv")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    section = _load_section(args, "simulate")
    flags = {"T": args.T, "snr": args.snr, "within_density": args.within, "between_density": args.between}
    if args.cluster_sizes:
        flags["cluster_sizes"] = [int(s) for s in args.cluster_sizes.split(",")]
    section.update({k: v for k, v in flags.items() if v is not None})
    section["seed"] = args.seed
    cfg = Example1Config.from_dict(section)
    rng = np.random.default_rng(cfg.seed)
    system = build_example1(cfg, rng)
    Y, _ = simulate_example1(system, cfg.T, rng)
    out = Path(args.out)
    outputs = [out / "y.csv", io.sidecar_path(out / "y.csv"), out / "truth.json"]
    io.write_timeseries(out / "y.csv", Y)
    io.write_json(out / "truth.json", io.truth_to_dict(system.truth))
    if args.null_length:
        # an independent, longer realization of the same system, used to build empirical nulls
        Z, _ = simulate_example1(system, args.null_length, rng)
        io.write_timeseries(out / "null_source.csv", Z)
        outputs += [out / "null_source.csv", io.sidecar_path(out / "null_source.csv")]
    _manifest(args, out, {"simulate": cfg.to_dict(), "null_length": args.null_length}, [], outputs)
    return 0


def cmd_fit(args) -> int:
    cfg, h = _fit_settings(args, _load_section(args, "fit"))
    Y = io.read_timeseries(args.data)
    res = fit_dataset(Y, cfg, h, jobs=args.jobs)
    out = Path(args.out)
    outputs: list = []
    _write_fit(out, res, outputs)
    _manifest(args, out, _config_record(cfg, h), [args.data], outputs)
    return 0


def cmd_null(args) -> int:
    cfg, h = _fit_settings(args, _load_section(args, "fit"))
    long_series = io.read_timeseries(args.data)
    out = Path(args.out)
    outputs = []
    for r, s in enumerate(chain_seeds(args.seed, args.replicates), 1):
        null = build_null_dataset(long_series, args.T, np.random.default_rng(s))
        res = fit_dataset(null, dataclasses.replace(cfg, seed=s), h, jobs=args.jobs)
        path = out / f"null_summary_{r}.json"
        io.write_json(path, io.summary_to_dict(res.summary))
        outputs.append(path)
    record = _config_record(cfg, h) | {"T": args.T, "replicates": args.replicates}
    _manifest(args, out, record, [args.data], outputs)
    return 0


def _summary_files(paths) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(p.glob("null_summary_*.json")))
        elif p.is_file():
            files.append(p)
        else:
            raise FileNotFoundError(f"no such file or directory: {p}")
    if not files:
        raise FileNotFoundError("no null summaries found")
    return files


def cmd_calibrate(args) -> int:
    files = _summary_files(args.null)
    summaries = [io.summary_from_dict(io.read_json(f), f.name) for f in files]
    tm, tg = calibrate_thresholds(summaries, args.pvalue)
    out = Path(args.out)
    io.write_json(out / "thresholds.json", {"threshold_m": tm, "threshold_gamma": tg, "pvalue": args.pvalue,
                                            "n_null": len(summaries)})
    _manifest(args, out, {"pvalue": args.pvalue}, files, [out / "thresholds.json"])
    return 0


def cmd_network(args) -> int:
    summary = io.summary_from_dict(io.read_json(args.summary))
    inputs = [args.summary]
    tm, tg = args.pm, args.pg
    if args.thresholds:
        thr = io.read_json(args.thresholds)
        tm = io.require(thr, "threshold_m", "thresholds") if tm is None else tm
        tg = io.require(thr, "threshold_gamma", "thresholds") if tg is None else tg
        inputs.append(args.thresholds)
    if tm is None or tg is None:
        raise ValueError("give --pm and --pg, or --thresholds")
    net = network_estimate(summary, tm, tg)
    out = Path(args.out)
    io.write_json(out / "network.json", io.network_to_dict(net))
    io.write_network_tables(out / "network", net)
    outputs = [out / "network.json", out / "network_edges.csv", out / "network_clusters.csv"]
    _manifest(args, out, {"threshold_m": tm, "threshold_gamma": tg}, inputs, outputs)
    return 0


def cmd_roc(args) -> int:
    truth = io.truth_from_dict(io.read_json(args.truth))
    inputs = [args.truth]
    if args.summary:
        scores = io.summary_from_dict(io.read_json(args.summary)).edge_prob
        inputs.append(args.summary)
    elif args.scores_csv:
        scores = np.loadtxt(args.scores_csv, delimiter=",", ndmin=2)
        inputs.append(args.scores_csv)
    elif args.baseline_data:
        scores = lag1_ls_scores(io.read_timeseries(args.baseline_data))
        inputs.append(args.baseline_data)
    else:
        raise ValueError("give one of --summary, --scores-csv or --baseline-data")
    out = Path(args.out)
    thr, fpr, tpr = roc_points(scores, truth, args.restrict)
    _, auc = roc_curve(scores, truth, args.restrict)
    io.write_rows(out / "roc.csv", ["threshold", "fpr", "tpr"],
                  [[repr(float(a)), repr(float(b)), repr(float(c))] for a, b, c in zip(thr, fpr, tpr)])
    io.write_json(out / "auc.json", {"auc": auc, "restrict": args.restrict})
    _manifest(args, out, {"restrict": args.restrict}, inputs, [out / "roc.csv", out / "auc.json"])
    return 0


def cmd_pipeline(args) -> int:
    section = _load_section(args, "pipeline")
    fit_section = section.pop("fit", {})
    cfg_fit, h = _fit_settings(args, fit_section)
    section["fit"] = cfg_fit.to_dict()
    cfg = PipelineConfig.from_dict(section)
    manifest = io.read_json(args.manifest)
    Y = io.read_timeseries(args.data, sample_rate_hz=manifest.get("sample_rate_hz"))
    res = run_pipeline(Y, manifest, cfg, jobs=args.jobs, h=h)
    out = Path(args.out)
    rows = [[k + 1, period, j + 1, repr(float(v))]
            for k, adc in enumerate(res.adc) for period, vec in adc.items() for j, v in enumerate(vec)]
    io.write_rows(out / "adc.csv", ["seizure", "period", "node", "adc"], rows)
    io.write_rows(out / "candidates.csv", ["node", "label"],
                  [[j + 1, Y.channel_labels[j]] for j in sorted(res.candidates)])
    _manifest(args, out, cfg.to_dict() | {"hyperparams": h.to_dict()}, [args.data, args.manifest], [out / "adc.csv", out / "candidates.csv"])
    return 0


def cmd_diag(args) -> int:
    traces = [io.read_traces(p) for p in args.traces]
    common = [n for n in traces[0] if all(n in t for t in traces[1:])]
    if args.sample:
        if args.seed is None:
            raise ValueError("--sample needs --seed")
        rng = np.random.default_rng(args.seed)
        common = sorted(rng.choice(common, min(args.sample, len(common)), replace=False).tolist(),
                        key=common.index)
    rows = []
    for name in common:
        try:
            rows.append([name, repr(gelman_rubin([t[name] for t in traces]))])
        except ValueError as exc:
            rows.append([name, f"nan ({exc})"])
    out = Path(args.out)
    io.write_rows(out / "rhat.csv", ["parameter", "rhat"], rows)
    _manifest(args, out, {"sample": args.sample, "seed": args.seed}, args.traces, [out / "rhat.csv"])
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssmarnet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_, seed=True):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
        p.add_argument("--jobs", type=int, default=_default_jobs(), help="worker processes")
        if seed:
            p.add_argument("--seed", type=int, required=True)
        return p

    p = add("simulate", cmd_simulate, "generate a clustered benchmark dataset")
    p.add_argument("--T", type=int)
    p.add_argument("--cluster-sizes", help="comma separated, e.g. 15,15,20")
    p.add_argument("--within", type=float, help="within-cluster edge density")
    p.add_argument("--between", type=float, help="between-cluster edge density")
    p.add_argument("--snr", type=float)
    p.add_argument("--null-length", type=int, help="also write a long series from the same system")

    p = add("fit", cmd_fit, "EM then Gibbs sampling on one dataset")
    p.add_argument("--data", required=True)
    _add_fit_flags(p)

    p = add("null", cmd_null, "fit decoupled null datasets cut from a long series")
    p.add_argument("--data", required=True, help="long series")
    p.add_argument("--T", type=int, required=True, help="length of each null dataset")
    p.add_argument("--replicates", type=int, default=1)
    _add_fit_flags(p)

    p = add("calibrate", cmd_calibrate, "selection thresholds from null summaries", seed=False)
    p.add_argument("--null", nargs="+", required=True, help="null summary files or directories")
    p.add_argument("--pvalue", type=float, default=0.01)

    p = add("network", cmd_network, "clusters and edges from a posterior summary", seed=False)
    p.add_argument("--summary", required=True)
    p.add_argument("--pm", type=float, help="clustering threshold")
    p.add_argument("--pg", type=float, help="edge threshold")
    p.add_argument("--thresholds", help="thresholds.json from calibrate")

    p = add("roc", cmd_roc, "ROC curve of edge scores against a known truth", seed=False)
    p.add_argument("--truth", required=True)
    p.add_argument("--summary")
    p.add_argument("--scores-csv", help="d x d score matrix, row i column j scores j -> i")
    p.add_argument("--baseline-data", help="score with the lag-one least-squares baseline")
    p.add_argument("--restrict", choices=["all", "within", "between"], default="all")

    p = add("pipeline", cmd_pipeline, "preprocess, segment, fit and score onset candidates")
    p.add_argument("--data", required=True, help="raw recording CSV")
    p.add_argument("--manifest", required=True, help="seizure and period definitions (JSON)")
    _add_fit_flags(p)

    p = add("diag", cmd_diag, "Gelman-Rubin statistics over chain trace files", seed=False)
    p.add_argument("--traces", nargs="+", required=True)
    p.add_argument("--sample", type=int, help="score a random subset of this many parameters")
    p.add_argument("--seed", type=int, help="required with --sample")
    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"ssmarnet {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
