import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from pulsecw.cli import compare_metrics, main
from pulsecw.config import bundled


def run(*args):
    """main() exit code, with argparse usage errors folded in."""
    try:
        return main([str(a) for a in args])
    except SystemExit as exc:
        return exc.code


def config_file(tmp_path, **changes):
    cfg = json.loads(bundled("paper_matched.json").read_text())
    for dotted, value in changes.items():
        node = cfg
        *head, last = dotted.split("__")
        for key in head:
            node = node[key]
        node[last] = value
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("small")
    frames = d / "frames.bin"
    assert run("simulate", "--config", "bundled:paper_matched", "--n-frames", 3000, "--seed", 5, "--out", frames) == 0
    assert run("analyze", frames, "--out", d / "analysis") == 0
    return d


# --- simulate ---------------------------------------------------------------------


def test_simulate_writes_frames_and_truth(small_run):
    assert (small_run / "frames.bin").exists()
    assert (small_run / "frames.bin.truth.csv").exists()
    header = json.loads((small_run / "frames.bin").read_bytes().split(b"\n", 1)[0])
    assert header["n_frames"] == 3000
    assert header["config"]["seed"] == 5


def test_simulate_is_deterministic(tmp_path):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    assert run("simulate", "--n-frames", 200, "--seed", 7, "--out", a) == 0
    assert run("simulate", "--n-frames", 200, "--seed", 7, "--out", b, "--threads", 2) == 0
    assert sha(a) == sha(b)


def test_simulate_jsonl(tmp_path):
    out = tmp_path / "f.jsonl"
    assert run("simulate", "--n-frames", 3, "--seed", 1, "--format", "jsonl", "--out", out) == 0
    assert len(out.read_text().splitlines()) == 4


def test_simulate_rejects_zero_frames(tmp_path):
    assert run("simulate", "--n-frames", 0, "--seed", 1, "--out", tmp_path / "x.bin") == 2
    assert not (tmp_path / "x.bin").exists()


def test_simulate_malformed_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"version": 1, "seed": 1,\n "source": {"lam": }}')
    assert run("simulate", "--config", bad, "--out", tmp_path / "x.bin") == 2


def test_simulate_unknown_config_field(tmp_path, capsys):
    cfg = config_file(tmp_path, source__pump=0.1)
    assert run("simulate", "--config", cfg, "--n-frames", 2, "--out", tmp_path / "x.bin") == 2
    assert "config.source.pump" in capsys.readouterr().err


def test_simulate_missing_config(tmp_path):
    assert run("simulate", "--config", tmp_path / "none.json", "--out", tmp_path / "x.bin") == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "pulsecw", "simulate", "--n-frames", "0"], capture_output=True)
    assert proc.returncode == 2


# --- analyze ----------------------------------------------------------------------


def test_analyze_outputs(small_run):
    a = small_run / "analysis"
    rows = (a / "quadratures.csv").read_text().splitlines()
    assert rows[0] == "frame_id,theta,value"
    side = json.loads((a / "analysis.json").read_text())
    assert side["retained"] == len(rows) - 1
    assert side["retained"] + side["rejected"] == 3000
    for key in ("scale", "mode_fwhm_s", "window_s", "check_variance_ratio", "check_variance_ratio_stderr"):
        assert key in side
    mode = np.loadtxt(a / "mode.csv", delimiter=",", skiprows=1)
    assert mode.shape == (512, 4)
    assert (a / "mode.csv").read_text().startswith("t,f,f_shift_200ps,f_shift_1ns\n")
    heat = np.loadtxt(a / "heatmap.csv", delimiter=",", skiprows=1)
    assert heat[:, 2].sum() == 3000 * 512


def test_analyze_thetas_come_from_truth(small_run):
    truth = np.genfromtxt(small_run / "frames.bin.truth.csv", delimiter=",", names=True)
    q = np.genfromtxt(small_run / "analysis" / "quadratures.csv", delimiter=",", names=True)
    lookup = dict(zip(truth["frame_id"].astype(int), truth["theta"]))
    assert all(lookup[int(k)] == th for k, th in zip(q["frame_id"], q["theta"]))


def test_analyze_with_mode_file(small_run, tmp_path):
    out = tmp_path / "a2"
    assert run("analyze", small_run / "frames.bin", "--mode-file", small_run / "analysis" / "mode.csv", "--out", out) == 0
    a = np.loadtxt(small_run / "analysis" / "quadratures.csv", delimiter=",", skiprows=1)
    b = np.loadtxt(out / "quadratures.csv", delimiter=",", skiprows=1)
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


def test_analyze_bad_mode_file(small_run, tmp_path):
    bad = tmp_path / "m.csv"
    bad.write_text("t,g\n0,1\n")
    assert run("analyze", small_run / "frames.bin", "--mode-file", bad, "--out", tmp_path / "o") == 2


def test_analyze_vacuum_is_degenerate(tmp_path):
    cfg = config_file(tmp_path, source__eta_signal=1e-12)
    frames = tmp_path / "vac.bin"
    assert run("simulate", "--config", cfg, "--n-frames", 2000, "--out", frames) == 0
    assert run("analyze", frames, "--out", tmp_path / "a") == 3


def test_analyze_missing_file(tmp_path):
    assert run("analyze", tmp_path / "none.bin", "--out", tmp_path / "a") == 2


def test_analyze_truncated_file(small_run, tmp_path):
    bad = tmp_path / "t.bin"
    bad.write_bytes((small_run / "frames.bin").read_bytes()[:20000])
    assert run("analyze", bad, "--out", tmp_path / "a") == 2


def test_analyze_window_too_small(small_run, tmp_path):
    assert run("analyze", small_run / "frames.bin", "--window", 1e-13, "--out", tmp_path / "a") == 2


# --- tomo -------------------------------------------------------------------------


def test_tomo_outputs(matched_run):
    r = matched_run["result"]
    assert r["version"] == 1
    assert r["options"]["cutoff"] == 10
    assert r["convergence"]["converged"]
    assert len(r["density_matrix"]["re"]) == 11
    w = np.loadtxt(matched_run["dir"] / "tomo" / "wigner.csv", delimiter=",", skiprows=1)
    assert len(w) == 161 * 161
    assert w[:, 2].sum() * 0.05**2 == pytest.approx(1.0, abs=1e-3)


def test_tomo_too_few_rows(tmp_path):
    q = tmp_path / "q.csv"
    q.write_text("frame_id,theta,value\n" + "".join(f"{k},0.1,0.2\n" for k in range(10)))
    assert run("tomo", q, "--out", tmp_path / "t") == 2


def test_tomo_cutoff_robustness(matched_run, tmp_path):
    q = matched_run["dir"] / "analysis" / "quadratures.csv"
    assert run("tomo", q, "--cutoff", 3, "--out", tmp_path / "c3") == 0
    small = json.loads((tmp_path / "c3" / "result.json").read_text())["metrics"]
    big = matched_run["result"]["metrics"]
    assert small["fidelity_1"] == pytest.approx(big["fidelity_1"], abs=0.02)
    assert small["wigner_origin"] == pytest.approx(big["wigner_origin"], abs=0.02)


def test_tomo_nonconvergence(matched_run, tmp_path):
    cfg = config_file(tmp_path, tomography__max_iterations=3)
    q = matched_run["dir"] / "analysis" / "quadratures.csv"
    assert run("tomo", q, "--config", cfg, "--out", tmp_path / "t") == 4
    r = json.loads((tmp_path / "t" / "result.json").read_text())
    assert r["convergence"]["converged"] is False


def test_tomo_bootstrap_block(small_run, tmp_path):
    q = small_run / "analysis" / "quadratures.csv"
    assert run("tomo", q, "--bootstrap", 3, "--seed", 2, "--out", tmp_path / "t") == 0
    r = json.loads((tmp_path / "t" / "result.json").read_text())
    assert r["bootstrap"]["resamples"] == 3
    assert r["metrics"]["wigner_origin_stderr"] > 0


# --- report -----------------------------------------------------------------------


def test_report_passes_on_matched_run(matched_run):
    assert run("report", matched_run["dir"] / "tomo" / "result.json") == 0


def test_report_fails_outside_tolerance(tmp_path):
    res = tmp_path / "r.json"
    res.write_text(json.dumps({"metrics": {"fidelity_1": 0.5, "wigner_origin": -0.153, "p0": 0.255, "p2": 0.0}}))
    assert run("report", res) == 1


def test_report_schema_mismatch(tmp_path):
    res = tmp_path / "r.json"
    res.write_text(json.dumps({"metrics": {"fidelity_1": 0.74}}))
    assert run("report", res) == 2
    res.write_text("{not json")
    assert run("report", res) == 2


def test_compare_metrics_rules():
    rows = compare_metrics(
        {"metrics": {"a": 1.0, "b": 0.5, "c": 2.0}},
        {"metrics": {"a": {"value": 1.1, "tolerance": 0.2}, "b": {"max": 0.4}, "c": {"min": 1.0}}},
    )
    assert [r[3] for r in rows] == [True, False, True]
