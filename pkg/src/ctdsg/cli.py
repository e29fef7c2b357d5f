"""Command-line experiment runner.

Examples
--------
    ctdsg --config reference --out results/ref
    ctdsg --config reference --experiment sweep --horizon 100 --a-values 0.6,0.75,0.95
    ctdsg --config reference --experiment certify-bounds
    ctdsg --config results/ref/manifest.json --out results/ref-replay --workers 8

Exit status: 0 success, 1 configuration error, 2 failed bound or acceptance
check, 3 too many diverged paths.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__, plotting
from .analysis import (
    BoundReport,
    consensus_bound,
    consensus_bound_check,
    fit_rate,
    lemma2_bound_check,
    lemma3_bound_check,
    lemma3_grid,
    write_reports_csv,
)
from .config import ExperimentConfig, config_hash, load
from .dynamics import _fmt, average_state, simulate_path
from .ensemble import EnsembleStats, ito_isometry_check, run_ensemble, single_path_stats
from .errors import ConfigError, DivergenceCeilingExceeded, NonFiniteState
from .graph import fit_decay_constants
from .objective import certify_constants

log = logging.getLogger("ctdsg")

EXIT_OK, EXIT_CONFIG, EXIT_FAILED, EXIT_DIVERGED = 0, 1, 2, 3
CONSENSUS_TOL = 1e-6
ISOMETRY_TOL = 0.05
INTEGRAL_GRID = [(a, lam) for a in (0.6, 1.0, 2.0) for lam in (0.3, 0.5, 0.9)]


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctdsg", description=__doc__.split("\n\n")[0])
    p.add_argument("--config", required=True, help="YAML/JSON config, run manifest, or preset name (reference)")
    p.add_argument("--seed", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--h", type=float)
    p.add_argument("--horizon", type=float)
    p.add_argument("--a", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--out", help="output directory")
    p.add_argument("--experiment", help="simulate | sweep | certify-bounds | consensus-only | isometry")
    p.add_argument("--noise-scale", type=float, help="multiply the noise intensity (0 disables noise)")
    p.add_argument("--a-values", type=_floats, help="step exponents for a sweep, e.g. 0.6,0.75,0.95")
    p.add_argument("--no-plots", action="store_true", help="write CSVs and reports only")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


class _Outputs:
    def __init__(self, out: Path):
        self.out = out
        self.files: list[Path] = []
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.out / name
        self.files.append(p)
        return p

    def figure(self, func, *args, name: str):
        made = func(*args, self.out / name)
        if made is not None:
            log.info("wrote %s", made)


def _simulate(exp: ExperimentConfig, cfg=None) -> EnsembleStats:
    cfg = cfg or exp.sim
    if exp.runs == 1:
        return single_path_stats(cfg)
    return run_ensemble(cfg, exp.runs, exp.workers)


def _write_rate_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["a", "agent", "model", "fitted_exponent", "predicted_exponent", "window_start",
                    "window_end", "residual", "curvature", "at_least_predicted"])
        w.writerows(rows)


def _rate_rows(stats, a, window):
    rows, fits = [], []
    for i in range(stats.mean_gap.shape[1]):
        f = fit_rate(stats, a, window, agent=i)
        fits.append(f)
        rows.append([_fmt(a), i + 1, f.model, _fmt(f.exponent), _fmt(f.predicted.exponent),
                     _fmt(f.window[0]), _fmt(f.window[1]), _fmt(f.residual), _fmt(f.curvature),
                     int(f.at_least_predicted)])
    return rows, fits


def run_simulate(exp: ExperimentConfig, outs: _Outputs, lines: list[str]) -> int:
    stats = _simulate(exp)
    stats.to_csv(outs.path("stats.csv"))
    final = stats.mean_state[-1]
    lines.append(f"runs used: {stats.runs}, diverged: {len(stats.diverged)}")
    lines.append(f"x* = {np.array2string(stats.x_star, precision=6)}")
    for i in range(final.shape[0]):
        lines.append(
            f"agent {i + 1}: E[x(T)] = {np.array2string(final[i], precision=5)}, "
            f"|E[x(T)] - x*| = {np.linalg.norm(final[i] - stats.x_star):.5f}, "
            f"E[gap(T)] = {stats.mean_gap[-1, i]:.5f}, E||x - xbar||(T) = {stats.mean_consensus[-1, i]:.5f}"
        )
    if exp.plots:
        outs.figure(plotting.plot_states, stats, name="states.png")
        outs.figure(plotting.plot_gaps, stats, name="gaps.png")
    return EXIT_OK


def run_sweep(exp: ExperimentConfig, outs: _Outputs, lines: list[str]) -> int:
    table, rate_rows, curves = [], [], {}
    for a in exp.a_values:
        cfg = exp.sim.replace(step=type(exp.sim.step)(exp.sim.step.beta, a))
        stats = _simulate(exp, cfg)
        stats.to_csv(outs.path(f"stats_a{a:g}.csv"))
        fit = fit_rate(stats, a, exp.rate_window)
        rows, _ = _rate_rows(stats, a, exp.rate_window)
        rate_rows.extend(rows)
        curves[a] = stats
        final_gap = float(stats.mean_gap[-1].mean())
        table.append([_fmt(a), _fmt(final_gap), _fmt(fit.exponent), _fmt(fit.predicted.exponent), fit.model])
        lines.append(f"a = {a:g}: final gap {final_gap:.5g}, fitted {fit.model} exponent {fit.exponent:.4f}, "
                     f"predicted {fit.predicted.formula}")
    with open(outs.path("comparison.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["a", "final_gap", "fitted_exponent", "predicted_exponent", "model"])
        w.writerows(table)
    _write_rate_csv(outs.path("rates.csv"), rate_rows)
    if exp.plots:
        outs.figure(plotting.plot_sweep, curves, name="sweep.png")
    return EXIT_OK


def run_certify(exp: ExperimentConfig, outs: _Outputs, lines: list[str]) -> int:
    cfg = exp.sim
    reports: list[BoundReport] = []

    decay = fit_decay_constants(cfg.schedule, exp.decay_horizon, exp.decay_grid)
    lines.append(f"decay fit: C = {decay.C:.6g}, lambda = {decay.lam:.6g}")
    reports.append(lemma2_bound_check(decay))

    for a, lam in INTEGRAL_GRID:
        reports.append(lemma3_bound_check(a, lam, lemma3_grid(lam)))

    stats = _simulate(exp)
    stats.to_csv(outs.path("stats.csv"))
    region = stats.box.padded(1e-9)
    cert = None if cfg.zero_gradient else certify_constants(cfg.objectives, region)
    if cert is not None:
        lines.append(f"certificate over {region.lower} .. {region.upper}: M = {cert.M:.6g}, L = {cert.L_smooth:.6g}")
    consensus = consensus_bound_check(stats, decay.C, decay.lam, cfg, cert)
    reports.append(consensus)

    rates_ok = True
    if not cfg.zero_gradient:
        rows, fits = _rate_rows(stats, cfg.step.a, exp.rate_window)
        _write_rate_csv(outs.path("rates.csv"), rows)
        for i, f in enumerate(fits):
            ok = f.meets(exp.rate_tolerance)
            rates_ok &= ok
            lines.append(f"{'PASS' if ok else 'FAIL'}  rate agent {i + 1}: fitted {f.exponent:.4f} vs predicted "
                         f"{f.predicted.exponent:g} - {exp.rate_tolerance:g} ({f.model})")

    write_reports_csv(outs.path("bounds.csv"), reports)
    lines.extend(r.summary() for r in reports)
    for r in reports:
        lines.extend(f"  skipped {s}" for s in r.skipped)
    if exp.plots:
        outs.figure(plotting.plot_decay, decay, name="decay.png")
        M = 0.0 if cert is None else cert.M
        bound = consensus_bound(stats.times, decay.C, decay.lam, cfg, M, cfg.noise.K(cfg.n, cfg.m, cfg.horizon))
        outs.figure(plotting.plot_consensus, stats, bound, name="consensus.png")
    ok = all(r.passed for r in reports) and rates_ok
    return EXIT_OK if ok else EXIT_FAILED


def run_consensus_only(exp: ExperimentConfig, outs: _Outputs, lines: list[str]) -> int:
    cfg = exp.sim.replace(zero_gradient=True, noise=type(exp.sim.noise)("zero"))
    traj = simulate_path(cfg)
    traj.to_csv(outs.path("trajectory.csv"))
    target = average_state(cfg.x0)
    err = float(np.abs(traj.states[-1] - target).max())
    drift = float(np.abs(average_state(traj.states) - target).max())
    ok = err <= CONSENSUS_TOL
    lines.append(f"initial average {np.array2string(target, precision=6)}")
    lines.append(f"{'PASS' if ok else 'FAIL'}  max |x_i(T) - xbar(0)| = {err:.3g} (tolerance {CONSENSUS_TOL:g})")
    lines.append(f"max drift of the agent average: {drift:.3g}")
    return EXIT_OK if ok else EXIT_FAILED


def run_isometry(exp: ExperimentConfig, outs: _Outputs, lines: list[str]) -> int:
    cfg = exp.sim
    g = lambda t: cfg.noise.intensity(t, cfg.n, cfg.m)[0]
    runs = max(exp.runs, 2)
    res = ito_isometry_check(g, cfg.horizon, cfg.h, runs, cfg.seed)
    with open(outs.path("isometry.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["horizon", "h", "runs", "lhs", "se_lhs", "rhs", "rel_err"])
        w.writerow([_fmt(cfg.horizon), _fmt(cfg.h), runs, _fmt(res.lhs), _fmt(res.se), _fmt(res.rhs), _fmt(res.rel_err)])
    ok = res.rel_err <= ISOMETRY_TOL
    lines.append(f"{'PASS' if ok else 'FAIL'}  E||int g dB||^2 = {res.lhs:.6g} (se {res.se:.2g}) vs "
                 f"int ||g||^2 = {res.rhs:.6g}, relative error {res.rel_err:.4f}")
    return EXIT_OK if ok else EXIT_FAILED


RUNNERS = {
    "simulate": run_simulate,
    "sweep": run_sweep,
    "certify-bounds": run_certify,
    "consensus-only": run_consensus_only,
    "isometry": run_isometry,
}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(exp: ExperimentConfig, outs: _Outputs, status: int) -> Path:
    manifest = {
        "manifest_version": 1,
        "experiment": exp.kind,
        "seed": exp.sim.seed,
        "config_sha256": config_hash(exp.raw),
        "exit_status": status,
        "versions": {
            "ctdsg": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "outputs": {p.name: _sha256(p) for p in outs.files if p.exists()},
        "config": exp.raw,
    }
    path = outs.out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        exp = load(
            args.config, seed=args.seed, runs=args.runs, workers=args.workers, h=args.h,
            horizon=args.horizon, a=args.a, beta=args.beta, out=args.out, experiment=args.experiment,
            noise_scale=args.noise_scale, a_values=args.a_values,
        )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.no_plots:
        object.__setattr__(exp, "plots", False)

    outs = _Outputs(exp.out)
    lines = [f"experiment: {exp.kind}", f"config sha256: {exp.sha256}", f"seed: {exp.sim.seed}"]
    try:
        status = RUNNERS[exp.kind](exp, outs, lines)
    except DivergenceCeilingExceeded as exc:
        lines.append(f"FAIL  {exc}")
        status = EXIT_DIVERGED
    except NonFiniteState as exc:
        lines.append(f"FAIL  {exc}")
        status = EXIT_DIVERGED
    report = outs.path("report.txt")
    report.write_text("\n".join(lines) + "\n")
    outs.files.remove(report)
    write_manifest(exp, outs, status)
    print("\n".join(lines))
    return status


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
