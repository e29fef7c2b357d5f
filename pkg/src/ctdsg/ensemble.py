"""Monte Carlo ensembles of simulated paths and their summary statistics."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import quad

from .dynamics import SimConfig, _fmt, consensus_error, simulate_batch
from .errors import DivergenceCeilingExceeded
from .objective import Box, optimality_gap

log = logging.getLogger(__name__)

BATCH_SIZE = 50
"""Paths per work unit.  Fixed, so results do not depend on the worker count."""
DIVERGENCE_CEILING = 0.01


@dataclass
class _Moments:
    """Count, mean and sum of squared deviations, combinable (Chan et al.)."""

    count: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def of(cls, x: np.ndarray) -> "_Moments":
        if len(x) == 0:
            return cls(0, np.zeros(x.shape[1:]), np.zeros(x.shape[1:]))
        # identical samples (e.g. noise-free runs) must give the sample itself
        # and zero spread, not a mean perturbed by summation round-off
        same = np.all(x == x[0], axis=0)
        mean = np.where(same, x[0], x.mean(axis=0))
        return cls(len(x), mean, np.where(same, 0.0, ((x - mean) ** 2).sum(axis=0)))

    def merge(self, other: "_Moments") -> "_Moments":
        if other.count == 0:
            return self
        if self.count == 0:
            return other
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + delta**2 * (self.count * other.count / n)
        return _Moments(n, mean, m2)

    def se(self) -> np.ndarray:
        if self.count < 2:
            return np.zeros_like(self.mean)
        return np.sqrt(self.m2 / (self.count - 1) / self.count)


def _tree_reduce(items: list, combine: Callable):
    """Pairwise reduction in fixed left-to-right order."""
    if not items:
        raise ValueError("nothing to reduce")
    while len(items) > 1:
        nxt = [combine(items[i], items[i + 1]) for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


@dataclass
class _Partial:
    state: _Moments
    gap: _Moments
    cons: _Moments
    lower: np.ndarray
    upper: np.ndarray
    diverged: dict
    paths: np.ndarray | None = None

    def merge(self, other: "_Partial") -> "_Partial":
        paths = None
        if self.paths is not None and other.paths is not None:
            paths = np.concatenate([self.paths, other.paths])
        return _Partial(
            self.state.merge(other.state),
            self.gap.merge(other.gap),
            self.cons.merge(other.cons),
            np.minimum(self.lower, other.lower),
            np.maximum(self.upper, other.upper),
            {**self.diverged, **other.diverged},
            paths,
        )


def _run_batch(cfg: SimConfig, paths: list[int], keep_paths: bool) -> _Partial:
    res = simulate_batch(cfg, paths)
    X = res.states[res.alive]
    gaps = optimality_gap(cfg.objectives, X) if len(X) else np.zeros((0,) + X.shape[1:3])
    lower, upper = res.lower, res.upper
    if not res.alive.any():
        lower = np.full(cfg.m, np.inf)
        upper = np.full(cfg.m, -np.inf)
    return _Partial(
        _Moments.of(X),
        _Moments.of(np.asarray(gaps)),
        _Moments.of(consensus_error(X)),
        lower,
        upper,
        {p: str(e) for p, e in res.failures.items()},
        res.states if keep_paths else None,
    )


@dataclass
class EnsembleStats:
    times: np.ndarray
    mean_state: np.ndarray
    """``E[x_i(t)]``, shape ``(samples, n, m)``."""
    se_state: np.ndarray
    mean_gap: np.ndarray
    """``E[f(x_i(t)) - f(x*)]``, shape ``(samples, n)``."""
    se_gap: np.ndarray
    mean_consensus: np.ndarray
    """``E||x_i(t) - xbar(t)||``, shape ``(samples, n)``."""
    se_consensus: np.ndarray
    runs: int
    """Paths that entered the statistics (diverged ones excluded)."""
    diverged: dict
    box: Box
    """Coordinate-wise range of every state visited by a surviving path."""
    x_star: np.ndarray
    paths: np.ndarray | None = None

    @property
    def requested(self) -> int:
        return self.runs + len(self.diverged)

    def to_csv(self, path) -> None:
        m = self.mean_state.shape[-1]
        header = ["t", "agent", *[f"mean_coord_{c + 1}" for c in range(m)],
                  *[f"se_coord_{c + 1}" for c in range(m)], "mean_gap", "se_gap", "mean_consensus_err"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for s, t in enumerate(self.times):
                for i in range(self.mean_state.shape[1]):
                    w.writerow([
                        _fmt(t), i + 1,
                        *map(_fmt, self.mean_state[s, i]), *map(_fmt, self.se_state[s, i]),
                        _fmt(self.mean_gap[s, i]), _fmt(self.se_gap[s, i]),
                        _fmt(self.mean_consensus[s, i]),
                    ])


def run_ensemble(cfg: SimConfig, runs: int, workers: int = 1, keep_paths: bool = False) -> EnsembleStats:
    """Simulate ``runs`` paths (path indices ``0..runs-1``) and aggregate.

    Paths are grouped into fixed batches of ``BATCH_SIZE`` and the batch
    summaries are combined by a pairwise tree in path order, so the result is
    bitwise identical for any ``workers``.  Diverged paths are dropped and
    counted; more than 1% of them raises ``DivergenceCeilingExceeded``.
    """
    if runs < 2:
        raise ValueError("an ensemble needs at least 2 runs")
    batches = [list(range(s, min(s + BATCH_SIZE, runs))) for s in range(0, runs, BATCH_SIZE)]
    if workers > 1 and len(batches) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(batches))) as pool:
            parts = list(pool.map(_run_batch, [cfg] * len(batches), batches, [keep_paths] * len(batches)))
    else:
        parts = [_run_batch(cfg, b, keep_paths) for b in batches]

    total = _tree_reduce(parts, _Partial.merge)
    diverged = dict(sorted(total.diverged.items()))
    if diverged:
        log.warning("%d of %d paths diverged and were excluded", len(diverged), runs)
    if len(diverged) > DIVERGENCE_CEILING * runs:
        raise DivergenceCeilingExceeded(sorted(diverged), runs)

    times = cfg.sample_steps() * cfg.h
    return EnsembleStats(
        times=times,
        mean_state=total.state.mean,
        se_state=total.state.se(),
        mean_gap=total.gap.mean,
        se_gap=total.gap.se(),
        mean_consensus=total.cons.mean,
        se_consensus=total.cons.se(),
        runs=total.state.count,
        diverged=diverged,
        box=Box(total.lower, total.upper),
        x_star=cfg.objectives.minimizer(),
        paths=total.paths,
    )


@dataclass(frozen=True)
class IsometryResult:
    lhs: float
    """Monte Carlo ``E||int g dB||^2``."""
    rhs: float
    """Quadrature of ``int ||g||^2 ds``."""
    rel_err: float
    se: float
    """Standard error of ``lhs``."""


def ito_isometry_check(g: Callable[[float], np.ndarray], horizon: float, h: float, runs: int,
                       seed: int = 0) -> IsometryResult:
    """Compare ``E||int_0^T g(s) dB(s)||^2`` against ``int_0^T ||g(s)||^2 ds``.

    ``B`` is scalar and ``g`` vector valued.  The stochastic integral is the
    left-point (Ito) sum over a grid of spacing ``h``.
    """
    steps = round(horizon / h)
    G = np.array([np.atleast_1d(np.asarray(g(k * h), dtype=float)) for k in range(steps)])
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 1])))
    integral = np.zeros((runs, G.shape[1]))
    chunk = 256
    for s in range(0, steps, chunk):
        e = min(s + chunk, steps)
        dB = rng.standard_normal((runs, e - s)) * math.sqrt(h)
        integral += dB @ G[s:e]
    sq = (integral**2).sum(axis=1)
    lhs = float(sq.mean())
    se = float(sq.std(ddof=1) / math.sqrt(runs))
    rhs = quad(lambda s: float(np.sum(np.asarray(g(s), dtype=float) ** 2)), 0.0, horizon,
               epsabs=1e-13, epsrel=1e-10, limit=500)[0]
    if rhs == 0:
        rel = 0.0 if lhs == 0 else math.inf
    else:
        rel = abs(lhs / rhs - 1.0)
    return IsometryResult(lhs, rhs, rel, se)


def single_path_stats(cfg: SimConfig, path: int = 0) -> EnsembleStats:
    """Statistics of one path, with all standard errors zero."""
    res = simulate_batch(cfg, [path])
    if res.failures:
        raise res.failures[path]
    X = res.states[0]
    gap = np.asarray(optimality_gap(cfg.objectives, X))
    cons = consensus_error(X)
    return EnsembleStats(
        times=res.sample_steps * cfg.h,
        mean_state=X,
        se_state=np.zeros_like(X),
        mean_gap=gap,
        se_gap=np.zeros_like(gap),
        mean_consensus=cons,
        se_consensus=np.zeros_like(cons),
        runs=1,
        diverged={},
        box=Box(res.lower, res.upper),
        x_star=cfg.objectives.minimizer(),
    )
