"""Numerical certification of the consensus and convergence-rate claims.

Bound checks return a ``BoundReport``; rate estimates return a ``RateFit``.
Both serialise to CSV rows ``(claim, point, measured, bound, violation)``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.integrate import quad

from .dynamics import SimConfig, StepSchedule, _fmt
from .ensemble import EnsembleStats
from .errors import MissingCertificate, NonPositiveGap, OutOfRange, QuadratureFailure
from .graph import DecayFit
from .objective import SmoothnessCertificate

QUAD_RTOL = 1e-8
_LOG_MAX = math.log(np.finfo(float).max) - 2.0


@dataclass
class BoundReport:
    """Pointwise comparison of a measured quantity against an upper bound.

    ``violation = measured - bound``; a point passes when its violation does
    not exceed its ``slack`` (zero for analytic bounds, two standard errors
    for Monte Carlo estimates).
    """

    claim: str
    points: list[str]
    measured: np.ndarray
    bound: np.ndarray
    slack: np.ndarray
    skipped: list[str] = field(default_factory=list)

    @property
    def violation(self) -> np.ndarray:
        return self.measured - self.bound

    @property
    def max_violation(self) -> float:
        if len(self.points) == 0:
            return -math.inf
        return float(np.max(self.violation - self.slack))

    @property
    def passed(self) -> bool:
        return len(self.points) > 0 and self.max_violation <= 0

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        line = f"{verdict}  {self.claim}: {len(self.points)} points, max violation {self.max_violation:.4g}"
        if self.skipped:
            line += f", {len(self.skipped)} skipped"
        return line

    def rows(self):
        for p, m, b, v in zip(self.points, self.measured, self.bound, self.violation):
            yield [self.claim, p, _fmt(m), _fmt(b), _fmt(v)]


def write_reports_csv(path, reports: Sequence[BoundReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["claim", "point", "measured", "bound", "violation"])
        for r in reports:
            w.writerows(r.rows())


# --- step-size integrals and regimes -------------------------------------

def phi_integral(step: StepSchedule, t: float) -> float:
    """``int_0^t eta_s ds`` in closed form."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    return step.phi(t)


@dataclass(frozen=True)
class Regime:
    model: str
    """``"power"`` (t^-p), ``"log-power"`` (sqrt(ln t) t^-p) or ``"inverse-log"`` ((ln t)^-p)."""
    exponent: float
    formula: str


def regime_table(a: float) -> Regime:
    """Upper-bound rate of the expected optimality gap for ``eta = beta/(t+1)^a``."""
    if not 0.5 < a <= 1:
        raise OutOfRange(f"step exponent a = {a} outside (1/2, 1]")
    if math.isclose(a, 1.0, abs_tol=1e-12):
        return Regime("inverse-log", 1.0, "O(1/ln t)")
    if math.isclose(a, 0.75, abs_tol=1e-12):
        return Regime("log-power", 0.25, "O(sqrt(ln t) / t^(1/4))")
    if a < 0.75:
        return Regime("power", a - 0.5, f"O(t^-{a - 0.5:g})")
    return Regime("power", 1.0 - a, f"O(t^-{1.0 - a:g})")


# --- rate fits ------------------------------------------------------------

@dataclass(frozen=True)
class RateFit:
    model: str
    exponent: float
    """Fitted decay exponent ``p`` for ``model``."""
    window: tuple[float, float]
    residual: float
    """RMS residual of the log-space regression."""
    predicted: Regime | None
    power_exponent: float
    """Plain power-law slope over the same window, whatever ``model`` is."""
    curvature: float
    """Quadratic coefficient of ``ln gap`` against ``ln t``; zero for exact power laws."""
    curved: bool

    @property
    def at_least_predicted(self) -> bool | None:
        if self.predicted is None:
            return None
        return self.exponent >= self.predicted.exponent

    def meets(self, tolerance: float) -> bool:
        return self.predicted is not None and self.exponent >= self.predicted.exponent - tolerance


CURVATURE_FLAG = 1e-3


def fit_series(times, values, a: float | None = None, window: tuple[float, float] | None = None,
               model: str | None = None) -> RateFit:
    """Fit a decay law to ``values(times)`` over ``window``.

    The model defaults to the regime predicted for ``a`` (plain power law when
    ``a`` is None).  Non-positive values inside the window shrink it to the
    trailing stretch where every value is positive, with a warning.
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    if window is None:
        window = (0.2 * t[-1], t[-1])
    lo, hi = window
    sel = (t >= lo) & (t <= hi) & (t > 0)
    t, y = t[sel], y[sel]
    bad = np.nonzero(y <= 0)[0]
    if bad.size:
        warnings.warn(f"{bad.size} non-positive values in window; shrinking it", RuntimeWarning)
        t, y = t[bad[-1] + 1:], y[bad[-1] + 1:]
    if t.size < 3:
        raise NonPositiveGap("fewer than 3 positive samples left in the fit window")

    predicted = regime_table(a) if a is not None else None
    model = model or (predicted.model if predicted else "power")
    if model != "power" and t[0] <= 1:
        warnings.warn(f"{model} fit uses ln ln t; dropping samples with t <= 1", RuntimeWarning)
        t, y = t[t > 1], y[t > 1]
        if t.size < 3:
            raise NonPositiveGap("fewer than 3 samples with t > 1 in the fit window")
    lt, ly = np.log(t), np.log(y)
    if model == "power":
        x, target = lt, ly
    elif model == "log-power":
        x, target = lt, ly - 0.5 * np.log(lt)
    elif model == "inverse-log":
        x, target = np.log(lt), ly
    else:
        raise ValueError(f"unknown model {model!r}")

    slope, icpt = np.polyfit(x, target, 1)
    resid = float(np.sqrt(np.mean((target - (slope * x + icpt)) ** 2)))
    power_slope = np.polyfit(lt, ly, 1)[0]
    curv = float(np.polyfit(lt, ly, 2)[0]) if t.size >= 4 else 0.0
    return RateFit(
        model=model,
        exponent=float(-slope),
        window=(float(t[0]), float(t[-1])),
        residual=resid,
        predicted=predicted,
        power_exponent=float(-power_slope),
        curvature=curv,
        curved=abs(curv) > CURVATURE_FLAG,
    )


def fit_rate(stats: EnsembleStats, a: float, window: tuple[float, float] | None = None,
             agent: int | None = None) -> RateFit:
    """Fit the decay of ``E[f(x_i(t)) - f(x*)]``.

    ``agent=None`` fits the gap averaged over agents.  The verdict is "at least
    as fast as predicted"; the regime is an upper bound, not an asymptotic
    equivalence.
    """
    gaps = stats.mean_gap.mean(axis=1) if agent is None else stats.mean_gap[:, agent]
    return fit_series(stats.times, gaps, a, window)


# --- bound checks -----------------------------------------------------------

def lemma3_constants(a: float, lam: float) -> tuple[float, float, float, float]:
    """``(t0, delta1, delta2, delta3)`` with ``t0 = max(a/ln(1/lam) - 1, 0) + 1``."""
    if not a > 0 or not 0 < lam < 1:
        raise ValueError("need a > 0 and 0 < lam < 1")
    r = -math.log(lam)
    t0 = max(a / r - 1.0, 0.0) + 1.0
    denom = r * (t0 + 1.0) - a
    grow = math.exp(r * t0)
    d1 = (t0 + 1.0) / denom
    d2 = grow * t0 * (t0 + 1.0) ** a
    d3 = a * grow * t0 * (t0 + 1.0) / denom
    return t0, d1, d2, d3


def _decayed_integral(func, t: float, rate: float) -> float:
    """``int_0^t exp(-rate (t - s)) func(s) ds``, split where the kernel has died off."""
    if t <= 0:
        return 0.0
    knee = min(t, 60.0 / rate) if rate > 0 else t
    integrand = lambda u: math.exp(-rate * u) * func(t - u)
    val, _ = quad(integrand, 0.0, knee, epsabs=0.0, epsrel=QUAD_RTOL, limit=200)
    if knee < t:
        val += quad(integrand, knee, t, epsabs=0.0, epsrel=QUAD_RTOL, limit=200)[0]
    return val


def lemma3_bound_check(a: float, lam: float, t_grid) -> BoundReport:
    """Check ``int_0^t lam^-s (s+1)^-a ds <= d1 lam^-t (t+1)^-a + d2 (t+1)^-a + d3``.

    Evaluated as ``lam^-t`` times a kernel-weighted integral that never
    overflows; grid points where ``lam^-t`` itself exceeds the float range are
    skipped and listed in ``skipped``.
    """
    _, d1, d2, d3 = lemma3_constants(a, lam)
    r = -math.log(lam)
    pts, lhs, rhs, skipped = [], [], [], []
    for t in np.asarray(t_grid, dtype=float):
        if not t > 0 or not math.isfinite(t):
            raise ValueError("grid points must be positive and finite")
        if r * t > _LOG_MAX:
            skipped.append(f"t={t:.6g}: {QuadratureFailure.__name__} (lam^-t overflows)")
            continue
        grow = math.exp(r * t)
        inner = _decayed_integral(lambda s: (s + 1.0) ** -a, t, r)
        lhs.append(grow * inner)
        rhs.append((d1 * grow + d2) / (t + 1.0) ** a + d3)
        pts.append(f"a={a:g};lam={lam:g};t={t:.6g}")
    return BoundReport(f"integral-bound[a={a:g},lam={lam:g}]", pts, np.array(lhs), np.array(rhs),
                       np.zeros(len(pts)), skipped)


def lemma3_grid(lam: float, count: int = 50, t_min: float = 1e-3) -> np.ndarray:
    """Log-spaced times from ``t_min`` up to where ``lam^-t`` nears overflow."""
    t_max = _LOG_MAX / -math.log(lam)
    return np.geomspace(t_min, t_max, count)


def lemma2_bound_check(fit: DecayFit, c_factor: float = 1.05, lam_factor: float = 1.01) -> BoundReport:
    """``max_ij |Phi(t,0)_ij - 1/n| <= c_factor C (lam_factor lam)^t`` on the fit grid."""
    bound = fit.bound(fit.times, c_factor, lam_factor)
    pts = [f"t={t:.6g}" for t in fit.times]
    return BoundReport("geometric-decay", pts, fit.deviation.copy(), bound, np.zeros(len(pts)))


@dataclass(frozen=True)
class ConsensusConstants:
    theta1: float
    theta2: float
    theta3: float
    M: float
    K: float


def consensus_constants(C: float, cfg: SimConfig, M: float, K: float) -> ConsensusConstants:
    n, m = cfg.n, cfg.m
    return ConsensusConstants(
        theta1=math.sqrt(n * m) * C * float(np.linalg.norm(cfg.x0)),
        theta2=math.sqrt(m) * n**1.5 * C * M,
        theta3=math.sqrt(m) * n**1.5 * C * K,
        M=M,
        K=K,
    )


def consensus_bound(times, C: float, lam: float, cfg: SimConfig, M: float, K: float) -> np.ndarray:
    """``theta1 lam^t + theta2 int lam^(t-s) eta_s ds + theta3 sqrt(int lam^(2(t-s)) eta_s^2 ds)``."""
    k = consensus_constants(C, cfg, M, K)
    r = -math.log(lam)
    eta = lambda s: float(cfg.step.eta(s))
    out = []
    for t in np.asarray(times, dtype=float):
        val = k.theta1 * math.exp(-r * t)
        if k.theta2:
            val += k.theta2 * _decayed_integral(eta, t, r)
        if k.theta3:
            val += k.theta3 * math.sqrt(_decayed_integral(lambda s: eta(s) ** 2, t, 2 * r))
        out.append(val)
    return np.array(out)


def consensus_bound_check(stats: EnsembleStats, C: float, lam: float, cfg: SimConfig,
                          certificate: SmoothnessCertificate | None = None,
                          K: float | None = None) -> BoundReport:
    """Check ``E||x_i(t) - xbar(t)|| <= bound(t) + 2 SE`` at every sample and agent.

    The gradient bound comes from ``certificate``, whose region must contain
    every state the ensemble visited.  It may be omitted only for runs without
    the gradient term.  ``K`` defaults to the noise model's bound.
    """
    if cfg.zero_gradient:
        M = 0.0
    elif certificate is None:
        raise MissingCertificate("gradient bound M needs a smoothness certificate")
    else:
        if not certificate.region.contains(stats.box):
            raise MissingCertificate("trajectories left the certified region")
        M = certificate.M
    if K is None:
        K = cfg.noise.K(cfg.n, cfg.m, cfg.horizon)
    bound = consensus_bound(stats.times, C, lam, cfg, M, K)
    n = stats.mean_consensus.shape[1]
    pts = [f"t={t:.6g};agent={i + 1}" for t in stats.times for i in range(n)]
    return BoundReport(
        "consensus-bound",
        pts,
        stats.mean_consensus.reshape(-1),
        np.repeat(bound, n),
        2.0 * stats.se_consensus.reshape(-1),
    )
