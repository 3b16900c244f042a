import json
import subprocess
import sys

import numpy as np
import pytest

from ssmarnet import io
from ssmarnet.cli import _fit_settings, build_parser, dispatch


def _run(*argv):
    return dispatch([str(a) for a in argv])


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert _run("simulate", "--out", out, "--seed", 3, "--T", 120, "--cluster-sizes", "3,3",
                "--null-length", 1500) == 0
    return out


@pytest.fixture(scope="module")
def fitted(sim, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    assert _run("fit", "--out", out, "--data", sim / "y.csv", "--seed", 1, "--iters", 40,
                "--em-iters", 5, "--jobs", 1) == 0
    return out


def test_simulate_is_byte_reproducible(sim, tmp_path):
    assert _run("simulate", "--out", tmp_path, "--seed", 3, "--T", 120, "--cluster-sizes", "3,3",
                "--null-length", 1500) == 0
    for name in ("y.csv", "y.meta.json", "truth.json", "null_source.csv", "manifest.json"):
        assert io.file_sha256(sim / name) == io.file_sha256(tmp_path / name), name


def test_simulate_outputs(sim):
    Y = io.read_timeseries(sim / "y.csv")
    assert Y.values.shape == (6, 120)
    truth = json.loads((sim / "truth.json").read_text())
    assert truth["cluster_sizes"] == [3, 3] and min(truth["labels"]) == 1
    manifest = json.loads((sim / "manifest.json").read_text())
    assert manifest["command"] == "simulate" and manifest["seed"] == 3
    assert "null_source.csv" in manifest["outputs"]
    assert not any("time" in k for k in manifest)


def test_fit_retains_half_of_iterations_by_default(fitted):
    summary = json.loads((fitted / "summary.json").read_text())
    assert summary["num_samples"] == 20
    manifest = json.loads((fitted / "manifest.json").read_text())
    assert manifest["config"]["fit"]["n_burnin"] == 20
    assert set(manifest["outputs"]) >= {"chain_output.json", "summary.json", "em.json", "em_trace.csv",
                                        "traces_chain1.csv"}


def test_default_fit_settings_keep_five_thousand_draws():
    args = build_parser().parse_args(["fit", "--out", "o", "--data", "y.csv", "--seed", "0"])
    cfg, _ = _fit_settings(args, {})
    assert (cfg.n_iter, cfg.n_burnin, cfg.chain_config().n_retained) == (10000, 5000, 5000)


def test_fit_does_not_depend_on_jobs(sim, fitted, tmp_path):
    assert _run("fit", "--out", tmp_path, "--data", sim / "y.csv", "--seed", 1, "--iters", 40,
                "--em-iters", 5, "--jobs", 2) == 0
    assert (tmp_path / "summary.json").read_bytes() == (fitted / "summary.json").read_bytes()


def test_config_file_from_environment(sim, tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"fit": {"n_iter": 30, "n_burnin": 10, "em_max_iter": 3,
                                       "hyperparams": {"l0": 0.8}}}))
    monkeypatch.setenv("SSMAR_CONFIG", str(cfg))
    out = tmp_path / "o"
    assert _run("fit", "--out", out, "--data", sim / "y.csv", "--seed", 2, "--jobs", 1) == 0
    assert json.loads((out / "summary.json").read_text())["num_samples"] == 20
    record = json.loads((out / "manifest.json").read_text())["config"]
    assert record["hyperparams"]["l0"] == 0.8
    # explicit flags win over the file
    out2 = tmp_path / "o2"
    assert _run("fit", "--out", out2, "--data", sim / "y.csv", "--seed", 2, "--iters", 12, "--jobs", 1) == 0
    assert json.loads((out2 / "summary.json").read_text())["num_samples"] == 6


def test_null_calibrate_network_chain(sim, tmp_path):
    nulls = tmp_path / "null"
    assert _run("null", "--out", nulls, "--data", sim / "null_source.csv", "--T", 100, "--seed", 4,
                "--replicates", 2, "--iters", 20, "--em-iters", 3, "--jobs", 1) == 0
    assert sorted(p.name for p in nulls.glob("null_summary_*.json")) == ["null_summary_1.json",
                                                                         "null_summary_2.json"]
    cal = tmp_path / "cal"
    assert _run("calibrate", "--out", cal, "--null", nulls, "--pvalue", 0.05) == 0
    thr = json.loads((cal / "thresholds.json").read_text())
    assert thr["n_null"] == 2 and 0 <= thr["threshold_gamma"] <= 1
    net = tmp_path / "net"
    assert _run("network", "--out", net, "--summary", sim.parent / "missing.json", "--thresholds",
                cal / "thresholds.json") == 1
    summary = tmp_path / "s.json"
    io.write_json(summary, {"clust_prob": np.eye(6).tolist(), "edge_prob": np.full((6, 6), 0.9).tolist(),
                            "num_samples": 5})
    assert _run("network", "--out", net, "--summary", summary, "--thresholds", cal / "thresholds.json") == 0
    data = json.loads((net / "network.json").read_text())
    assert data["thresholds"] == {"threshold_m": thr["threshold_m"], "threshold_gamma": thr["threshold_gamma"]}


def test_network_echoes_explicit_thresholds(tmp_path):
    summary = tmp_path / "s.json"
    P = np.zeros((3, 3))
    P[2, 0] = 0.95
    io.write_json(summary, {"clust_prob": np.ones((3, 3)).tolist(), "edge_prob": P.tolist(), "num_samples": 3})
    assert _run("network", "--out", tmp_path / "n", "--summary", summary, "--pm", 0.5, "--pg", 0.9) == 0
    data = json.loads((tmp_path / "n" / "network.json").read_text())
    assert data == {"clusters": [[1, 2, 3]], "edges": [[1, 3]],
                    "thresholds": {"threshold_m": 0.5, "threshold_gamma": 0.9}}


def test_roc_from_summary_and_baseline(sim, fitted, tmp_path):
    assert _run("roc", "--out", tmp_path / "a", "--truth", sim / "truth.json", "--summary",
                fitted / "summary.json") == 0
    assert _run("roc", "--out", tmp_path / "b", "--truth", sim / "truth.json", "--baseline-data",
                sim / "y.csv", "--restrict", "within") == 0
    for sub in ("a", "b"):
        auc = json.loads((tmp_path / sub / "auc.json").read_text())["auc"]
        assert 0.0 <= auc <= 1.0
        rows = (tmp_path / sub / "roc.csv").read_text().splitlines()
        assert rows[0] == "threshold,fpr,tpr" and rows[1] == "inf,0.0,0.0"


def test_diag_on_fit_traces(fitted, tmp_path):
    traces = fitted / "traces_chain1.csv"
    assert _run("diag", "--out", tmp_path, "--traces", traces, traces, "--sample", 3, "--seed", 0) == 0
    rows = (tmp_path / "rhat.csv").read_text().splitlines()
    assert rows[0] == "parameter,rhat" and len(rows) == 4
    assert _run("diag", "--out", tmp_path, "--traces", traces, "--sample", 3) == 1


def test_missing_input_exits_one(tmp_path, capsys):
    assert _run("fit", "--out", tmp_path, "--data", tmp_path / "nope.csv", "--seed", 0) == 1
    assert "ssmarnet fit: error: no such file" in capsys.readouterr().err


def test_bad_schema_names_the_field(tmp_path, capsys):
    bad = tmp_path / "s.json"
    io.write_json(bad, {"clust_prob": [[1.0]], "num_samples": 1})
    assert _run("network", "--out", tmp_path, "--summary", bad, "--pm", 0.5, "--pg", 0.5) == 1
    assert "edge_prob" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["fit", "--out", "x", "--data", "y", "--seed", "0", "--bogus"],
                                  ["simulate", "--out", "x"],
                                  ["fit", "--out", "x", "--data", "y", "--seed", "0", "--jobs", "0"]])
def test_usage_errors_exit_two(argv):
    with pytest.raises(SystemExit) as exc:
        dispatch(argv)
    assert exc.value.code == 2


def test_console_script_runs(tmp_path):
    res = subprocess.run([sys.executable, "-m", "ssmarnet.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()
