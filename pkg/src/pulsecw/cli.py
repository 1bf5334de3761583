"""Command-line front end: simulate, analyze, tomo, report.

Exit codes: 0 success, 1 acceptance failure, 2 usage or config error,
3 degenerate PCA spectrum, 4 tomography did not converge.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import framesio
from .config import ConfigError, RunConfig, bundled, load_config, parse_json
from .fockcore import wigner
from .mle import TomographyError, TomographyOptions, bootstrap_metric, derived_metrics, reconstruct
from .physim import AcquisitionConfig, SimulationTruth, TemporalMode, heralded_state, simulate_run, truth_path
from .pipeline import AnalysisError, DegenerateModeError, QuadratureSet, analyze

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DEGENERATE, EXIT_NONCONVERGED = 0, 1, 2, 3, 4

WIGNER_AXIS = np.round(np.arange(-4.0, 4.0 + 1e-9, 0.05), 10)


class UsageError(Exception):
    pass


def _dump(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    if path.startswith("bundled:"):
        path = bundled(path.split(":", 1)[1])
    return load_config(path)


# --- simulate ---------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.n_frames is not None:
        cfg = cfg.replace(n_frames=args.n_frames)
    out = args.out or cfg.paths.get("frames") or "frames.bin"
    simulate_run(cfg.source, cfg.acquisition, cfg.n_frames, cfg.seed, out,
                 fmt=args.format, threads=args.threads, config=cfg.to_dict())
    rho = heralded_state(cfg.source)
    print(f"simulated {cfg.n_frames} frames -> {out} "
          f"(single-photon fraction {rho.diagonal[1]:.4f}, dark fraction {cfg.acquisition.dark_fraction}, "
          f"seed {cfg.seed})")
    return EXIT_OK


# --- analyze ----------------------------------------------------------------


def _read_mode_file(path, sample_period: float, length: int) -> TemporalMode:
    with open(path) as fh:
        cols = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if "f" not in cols:
        raise UsageError(f"{path}: mode file needs an 'f' column")
    f = data[:, cols.index("f")]
    if len(f) != length:
        raise UsageError(f"{path}: mode has {len(f)} samples, traces have {length}")
    return TemporalMode.from_samples(f, sample_period)


def _heatmap(frames, scale: float, n_bins: int = 100, chunk: int = 4096):
    dt = frames.sample_period
    L = frames.trace_length
    lim = 4.0 * math.sqrt(np.var(frames.traces[: min(len(frames), chunk)]))
    edges = np.linspace(-lim, lim, n_bins + 1)
    counts = np.zeros((L, n_bins), dtype=np.int64)
    t_idx = np.arange(L)
    for a in range(0, len(frames), chunk):
        block = np.asarray(frames.traces[a:a + chunk])
        vb = np.clip(np.searchsorted(edges, block, side="right") - 1, 0, n_bins - 1)
        flat = (t_idx[None, :] * n_bins + vb).ravel()
        counts += np.bincount(flat, minlength=L * n_bins).reshape(L, n_bins)
    centers = 0.5 * (edges[1:] + edges[:-1]) * scale
    return t_idx * dt, centers, counts


def cmd_analyze(args) -> int:
    batch = framesio.read_frames(args.frames)
    header_cfg = (batch.header or {}).get("config") or {}
    acq = AcquisitionConfig(**header_cfg["acquisition"]) if "acquisition" in header_cfg else AcquisitionConfig()
    seed = args.seed if args.seed is not None else int(header_cfg.get("seed", 0))
    mode = None
    if args.mode_file:
        mode = _read_mode_file(args.mode_file, batch.sample_period, batch.trace_length)
    thetas = None
    tpath = Path(truth_path(args.frames))
    if tpath.exists() and not args.ignore_truth:
        truth = SimulationTruth.read_csv(tpath)
        thetas = (truth.frame_id, truth.theta)
    window = args.window if args.window is not None else None
    res = analyze(batch, pulse_fwhm=acq.pulse_fwhm, jitter_sigma=acq.jitter_sigma, window=window,
                  mode=mode, thetas=thetas, seed=seed, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res.quadratures.write_csv(out / "quadratures.csv")
    _dump(res.sidecar(), out / "analysis.json")
    t = res.mode.times()
    with open(out / "mode.csv", "w") as fh:
        fh.write("t,f,f_shift_200ps,f_shift_1ns\n")
        f200 = res.mode.shifted(200e-12).samples
        f1n = res.mode.shifted(1e-9).samples
        for row in zip(t, res.mode.samples, f200, f1n):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    times, volts, counts = _heatmap(batch, res.calibration.scale)
    with open(out / "heatmap.csv", "w") as fh:
        fh.write("t,value,count\n")
        for i, ti in enumerate(times):
            for j, v in enumerate(volts):
                fh.write(f"{float(ti)!r},{float(v)!r},{int(counts[i, j])}\n")
    print(f"analyzed {res.aligned_count} frames: rejected {res.rejected}, "
          f"mode FWHM {res.fwhm * 1e12:.1f} ps, scale {res.calibration.scale:.6g}, "
          f"200ps/1ns variance ratio {res.calibration.ratio:.4f} +/- {res.calibration.ratio_stderr:.4f}")
    return EXIT_OK


# --- tomo -------------------------------------------------------------------


def cmd_tomo(args) -> int:
    cfg = _config(args.config)
    opts = cfg.tomography
    if args.cutoff is not None:
        opts = TomographyOptions(**{**opts.to_dict(), "x_range": tuple(opts.x_range), "cutoff": args.cutoff})
    quads = QuadratureSet.read_csv(args.quadratures)
    if len(quads) < 100:
        raise UsageError(f"{args.quadratures}: need at least 100 rows, got {len(quads)}")
    res = reconstruct(quads, opts)
    result = {
        "version": 1,
        "options": opts.to_dict(),
        "density_matrix": res.rho.to_json_dict(),
        "metrics": derived_metrics(res.rho),
        "convergence": res.convergence_dict(),
    }
    if args.bootstrap:
        seed = args.seed if args.seed is not None else cfg.seed
        bs = bootstrap_metric(quads, "diag", opts, resamples=args.bootstrap, seed=seed, threads=args.threads)
        signs = (-1.0) ** np.arange(bs.values.shape[1])
        w0 = bs.values @ signs / np.pi
        f1 = bs.values[:, 1]
        result["bootstrap"] = {
            "resamples": args.bootstrap,
            "seed": seed,
            "failed": bs.failed,
            "wigner_origin": {"mean": float(w0.mean()), "stderr": float(w0.std(ddof=1))},
            "fidelity_1": {"mean": float(f1.mean()), "stderr": float(f1.std(ddof=1))},
        }
        result["metrics"]["wigner_origin_stderr"] = float(w0.std(ddof=1))
        result["metrics"]["fidelity_1_stderr"] = float(f1.std(ddof=1))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump(result, out / "result.json")
    wigner(res.rho, WIGNER_AXIS, WIGNER_AXIS).write_csv(out / "wigner.csv")
    m = result["metrics"]
    print(f"reconstructed from {res.n_samples} samples in {res.iterations} iterations: "
          f"P(1) = {m['fidelity_1']:.4f}, W(0,0) = {m['wigner_origin']:.4f}, <n> = {m['mean_photon_number']:.4f}")
    if not res.converged:
        print(f"error: no convergence within {opts.max_iterations} iterations", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


# --- report -----------------------------------------------------------------


def _load_json(path):
    try:
        return parse_json(Path(path).read_text(), str(path))
    except OSError as exc:
        raise UsageError(f"{path}: cannot read ({exc.strerror})") from exc


def compare_metrics(result: dict, expected: dict) -> list[tuple[str, float, str, bool]]:
    """Rows of (metric, observed, requirement, passed); raises UsageError on schema mismatch."""
    if not isinstance(result.get("metrics"), dict):
        raise UsageError("result file has no 'metrics' object")
    if not isinstance(expected.get("metrics"), dict):
        raise UsageError("expected file has no 'metrics' object")
    rows = []
    for name, req in expected["metrics"].items():
        if name not in result["metrics"]:
            raise UsageError(f"result is missing metric {name!r}")
        obs = result["metrics"][name]
        if not isinstance(obs, (int, float)) or not isinstance(req, dict):
            raise UsageError(f"metric {name!r} is not a scalar comparison")
        ok = True
        parts = []
        if "value" in req:
            tol = float(req.get("tolerance", 0.0))
            ok &= abs(obs - req["value"]) <= tol
            parts.append(f"{req['value']} +/- {tol}")
        if "max" in req:
            ok &= obs <= req["max"]
            parts.append(f"<= {req['max']}")
        if "min" in req:
            ok &= obs >= req["min"]
            parts.append(f">= {req['min']}")
        if not parts:
            raise UsageError(f"metric {name!r} has no value/min/max requirement")
        rows.append((name, float(obs), ", ".join(parts), bool(ok)))
    return rows


def cmd_report(args) -> int:
    rows = compare_metrics(_load_json(args.result), _load_json(args.expected))
    width = max(len(r[0]) for r in rows)
    print(f"{'metric':<{width}}  {'observed':>12}  requirement           status")
    for name, obs, req, ok in rows:
        print(f"{name:<{width}}  {obs:>12.6f}  {req:<20}  {'PASS' if ok else 'FAIL'}")
    passed = all(r[3] for r in rows)
    print("overall:", "PASS" if passed else "FAIL")
    return EXIT_OK if passed else EXIT_FAIL


# --- entry ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pulsecw", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="synthesize heralded homodyne frames")
    s.add_argument("--config", help="run config JSON (or bundled:NAME)")
    s.add_argument("--out", help="frames file to write")
    s.add_argument("--seed", type=int)
    s.add_argument("--n-frames", type=_positive_int)
    s.add_argument("--threads", type=_positive_int, default=1)
    s.add_argument("--format", choices=framesio.FORMATS, default="bin")
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("analyze", help="align, reject, extract mode, project, calibrate")
    a.add_argument("frames")
    a.add_argument("--out", default="analysis")
    a.add_argument("--mode-file", help="CSV with an 'f' column; skips PCA")
    a.add_argument("--window", type=float, help="dark-count rejection window in seconds")
    a.add_argument("--seed", type=int)
    a.add_argument("--threads", type=_positive_int, default=1)
    a.add_argument("--ignore-truth", action="store_true", help="do not read LO phases from the simulator sidecar")
    a.set_defaults(func=cmd_analyze)

    t = sub.add_parser("tomo", help="maximum-likelihood reconstruction")
    t.add_argument("quadratures")
    t.add_argument("--out", default="tomo")
    t.add_argument("--config", help="run config JSON supplying tomography options")
    t.add_argument("--cutoff", type=_positive_int)
    t.add_argument("--bootstrap", type=_nonneg_int, default=0, metavar="B")
    t.add_argument("--seed", type=int)
    t.add_argument("--threads", type=_positive_int, default=1)
    t.set_defaults(func=cmd_tomo)

    r = sub.add_parser("report", help="compare result metrics with expectations")
    r.add_argument("result")
    r.add_argument("expected", nargs="?", default=None, help="defaults to the bundled paper_expected.json")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "command", None) == "report" and args.expected is None:
        args.expected = bundled("paper_expected.json")
    try:
        return args.func(args)
    except (ConfigError, UsageError, framesio.FramesFileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DegenerateModeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (AnalysisError, TomographyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
