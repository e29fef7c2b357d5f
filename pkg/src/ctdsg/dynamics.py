"""Euler--Maruyama simulation of distributed stochastic gradient flow.

Every agent ``i`` follows

    dx_i = sum_j a_ij(t) (x_j - x_i) dt - eta_t (grad f_i(x_i) dt + g_i(t) dB_i)

with one scalar Brownian motion ``B_i`` per agent driving the vector intensity
``g_i(t)``.  A step of length ``h`` evaluates the graph, step size and noise
intensity at the left endpoint ``t_k = k h`` and uses the exact Brownian
increment ``N(0, h)``.

Paths are vectorised over a leading batch axis.  All arithmetic on the batch
is elementwise, so a path's result does not depend on which other paths
share its batch.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NonFiniteState
from .graph import GraphSchedule
from .objective import Box, ObjectiveSet

DIVERGENCE_THRESHOLD = 1e12
_CHUNK = 1024  # increments drawn per path per refill


@dataclass(frozen=True)
class StepSchedule:
    """Step size ``eta(t) = beta / (t + 1)**a``.

    ``a = 0`` gives a constant step, useful for tests; the convergence theory
    needs ``0.5 < a <= 1``.
    """

    beta: float
    a: float

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not 0 <= self.a <= 1:
            raise ValueError("a must lie in [0, 1]")

    def eta(self, t):
        return self.beta / (np.asarray(t, dtype=float) + 1.0) ** self.a

    def phi(self, t):
        """Closed-form ``int_0^t eta(s) ds``."""
        t = np.asarray(t, dtype=float)
        if self.a == 1:
            out = self.beta * np.log1p(t)
        else:
            out = self.beta * np.expm1((1.0 - self.a) * np.log1p(t)) / (1.0 - self.a)
        return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class NoiseModel:
    """Per-agent gradient-noise intensity ``g_i(t)``.

    kind
        ``"zero"``; ``"sincos"`` for ``g_i(t) = [sin t, cos t]`` on every agent
        (two-dimensional problems only); ``"constant"`` for a fixed ``vector`` of
        shape ``(m,)`` or ``(n, m)``; ``"callable"`` for ``func(t) -> (n, m)``,
        which must be picklable to run with several workers.
    scale
        Multiplies the intensity; ``scale = 0`` switches noise off.
    """

    kind: str = "zero"
    scale: float = 1.0
    vector: tuple | None = None
    func: Callable[[float], np.ndarray] | None = None
    bound: float | None = None

    def __post_init__(self):
        if self.kind not in ("zero", "sincos", "constant", "callable"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.kind == "constant" and self.vector is None:
            raise ValueError("constant noise needs a vector")
        if self.kind == "callable" and self.func is None:
            raise ValueError("callable noise needs func")
        if self.scale < 0:
            raise ValueError("noise scale must be nonnegative")

    @property
    def silent(self) -> bool:
        return self.kind == "zero" or self.scale == 0

    def intensity(self, t: float, n: int, m: int) -> np.ndarray:
        if self.silent:
            return np.zeros((n, m))
        if self.kind == "sincos":
            if m != 2:
                raise ValueError("sincos noise is defined for two-dimensional states")
            g = np.array([math.sin(t), math.cos(t)])
        elif self.kind == "constant":
            g = np.asarray(self.vector, dtype=float)
        else:
            g = np.asarray(self.func(t), dtype=float)
        return self.scale * np.broadcast_to(g, (n, m))

    def K(self, n: int, m: int, horizon: float = 100.0, samples: int = 10001) -> float:
        """Bound on ``max_i ||g_i(t)||``.

        Closed form for the built-in kinds; for ``callable`` the declared
        ``bound`` is checked against a dense time sample (or, when no bound is
        declared, the sampled maximum is returned).
        """
        if self.silent:
            return 0.0
        if self.kind == "sincos":
            return float(self.scale)
        if self.kind == "constant":
            return float(self.scale * np.linalg.norm(np.broadcast_to(self.vector, (n, m)), axis=-1).max())
        ts = np.linspace(0.0, horizon, samples)
        sampled = max(np.linalg.norm(self.intensity(t, n, m), axis=-1).max() for t in ts)
        if self.bound is None:
            return float(sampled)
        if sampled > self.bound * (1 + 1e-12):
            raise ValueError(f"noise intensity reaches {sampled:.6g}, above declared bound {self.bound}")
        return float(self.bound)


def _steps_of(duration: float, h: float) -> int | None:
    ratio = duration / h
    k = round(ratio)
    if k >= 1 and abs(ratio - k) <= 1e-9 * max(1.0, ratio):
        return int(k)
    return None


@dataclass(frozen=True, eq=False)
class SimConfig:
    schedule: GraphSchedule
    objectives: ObjectiveSet
    step: StepSchedule
    noise: NoiseModel
    h: float
    horizon: float
    x0: np.ndarray
    seed: int = 0
    sample_stride: int = 1
    """Record every ``sample_stride``-th step (the final step is always kept)."""
    zero_gradient: bool = False
    """Drop the gradient term, leaving pure consensus plus noise."""
    _seg_steps: tuple = field(init=False, repr=False)

    def __post_init__(self):
        x0 = np.array(self.x0, dtype=float)
        n, m = self.schedule.n, self.objectives.dim
        if x0.shape != (n, m):
            raise ConfigError("dynamics.x0", f"expected shape {(n, m)}, got {x0.shape}")
        if self.objectives.n != n:
            raise ConfigError("objectives", f"{self.objectives.n} objectives for {n} agents")
        if not self.h > 0:
            raise ConfigError("dynamics.h", "must be positive")
        seg_steps = []
        for k, d in enumerate(self.schedule.durations):
            s = _steps_of(d, self.h)
            if s is None:
                raise ConfigError("dynamics.h", f"h = {self.h} does not divide segment {k} duration {d}")
            seg_steps.append(s)
        if _steps_of(self.horizon, self.h) is None:
            raise ConfigError("dynamics.horizon", f"horizon {self.horizon} is not a multiple of h = {self.h}")
        if self.sample_stride < 1:
            raise ConfigError("ensemble.sample_stride", "must be at least 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("ensemble.seed", "must be an unsigned 64-bit integer")
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "_seg_steps", tuple(seg_steps))

    @property
    def n(self) -> int:
        return self.schedule.n

    @property
    def m(self) -> int:
        return self.objectives.dim

    @property
    def steps(self) -> int:
        return _steps_of(self.horizon, self.h)

    def replace(self, **changes) -> "SimConfig":
        fields = dict(
            schedule=self.schedule, objectives=self.objectives, step=self.step, noise=self.noise,
            h=self.h, horizon=self.horizon, x0=self.x0, seed=self.seed,
            sample_stride=self.sample_stride, zero_gradient=self.zero_gradient,
        )
        fields.update(changes)
        return SimConfig(**fields)

    def time(self, k: int) -> float:
        return k * self.h

    def sample_steps(self) -> np.ndarray:
        ks = np.arange(0, self.steps + 1, self.sample_stride)
        if ks[-1] != self.steps:
            ks = np.append(ks, self.steps)
        return ks


class _Kernel:
    """Per-config constants for the step loop."""

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.graphs = []
        for g in cfg.schedule.graphs:
            w = g.weights
            cols = [(j, w[:, j, None].copy()) for j in range(g.n) if np.any(w[:, j])]
            self.graphs.append((cols, w.sum(axis=1)[:, None]))
        counts = np.array(cfg._seg_steps)
        self._bounds = np.cumsum(counts)
        self._total = int(self._bounds[-1])

    def segment(self, k: int) -> int:
        if self.cfg.schedule.periodic:
            k %= self._total
        elif k >= self._total:
            return len(self.graphs) - 1
        return int(np.searchsorted(self._bounds, k, side="right"))

    def consensus(self, k: int, X: np.ndarray) -> np.ndarray:
        cols, deg = self.graphs[self.segment(k)]
        out = -deg * X
        for j, col in cols:
            out += col * X[..., j, None, :]
        return out

    def step(self, X: np.ndarray, k: int, dB: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        t = k * cfg.h
        eta = float(cfg.step.eta(t))
        drift = cfg.h * self.consensus(k, X)
        if not cfg.zero_gradient:
            drift -= eta * (cfg.h * cfg.objectives.grads(X))
        if not cfg.noise.silent:
            g = cfg.noise.intensity(t, cfg.n, cfg.m)
            drift -= eta * (g * dB[..., None])
        return X + drift


def path_rng(seed: int, path: int) -> np.random.Generator:
    """Independent stream for one path, keyed by ``(seed, path)``.

    Within a path the draws are consumed step-major then agent, so the
    increment for ``(step k, agent i)`` is a fixed function of
    ``(seed, path, k, i)``.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(path)])))


def brownian_increments(rng: np.random.Generator, n: int, h: float) -> np.ndarray:
    """``n`` independent ``N(0, h)`` draws."""
    if not h > 0:
        raise ValueError("h must be positive")
    return rng.standard_normal(n) * math.sqrt(h)


def coarsen_increments(dB: np.ndarray, factor: int) -> np.ndarray:
    """Sum consecutive groups of ``factor`` fine increments along axis ``-2``."""
    steps, n = dB.shape[-2:]
    if steps % factor:
        raise ValueError("step count not divisible by factor")
    return dB.reshape(*dB.shape[:-2], steps // factor, factor, n).sum(axis=-2)


def euler_step(states: np.ndarray, k: int, cfg: SimConfig, rng: np.random.Generator | None = None,
               increments: np.ndarray | None = None) -> np.ndarray:
    """Advance ``states`` (shape ``(n, m)``) from step ``k`` to ``k + 1``.

    Brownian increments are taken from ``increments`` (shape ``(n,)``) when
    given, otherwise drawn from ``rng``.

    Raises
    ------
    NonFiniteState
        If any coordinate of the result is non-finite or exceeds 1e12.
    """
    states = np.asarray(states, dtype=float)
    if increments is None:
        if rng is not None:
            increments = brownian_increments(rng, cfg.n, cfg.h)
        elif cfg.noise.silent:
            increments = np.zeros(cfg.n)
        else:
            raise ValueError("a noisy step needs rng or increments")
    out = _Kernel(cfg).step(states, k, np.asarray(increments, dtype=float))
    _check_finite(out, k + 1)
    return out


def _check_finite(X: np.ndarray, k: int, path: int | None = None):
    peak = np.max(np.abs(X))
    if not peak <= DIVERGENCE_THRESHOLD:
        mag = np.abs(X).reshape(-1, X.shape[-2], X.shape[-1]).max(axis=(0, 2))
        bad = ~(mag <= DIVERGENCE_THRESHOLD)
        agent = int(np.argmax(bad))
        raise NonFiniteState(k, agent, float(mag[agent]), path)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    """Shape ``(samples, n, m)``."""
    seed: int
    path: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.states)):
            raise ValueError("trajectory contains non-finite states")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("sample times must be strictly increasing")

    def to_csv(self, path) -> None:
        m = self.states.shape[-1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "agent", *[f"coord_{c + 1}" for c in range(m)]])
            for t, X in zip(self.times, self.states):
                for i, row in enumerate(X):
                    w.writerow([_fmt(t), i + 1, *map(_fmt, row)])


def _fmt(v) -> str:
    return repr(float(v))


@dataclass
class BatchResult:
    paths: np.ndarray
    sample_steps: np.ndarray
    states: np.ndarray
    """Sampled states, shape ``(batch, samples, n, m)``."""
    alive: np.ndarray
    failures: dict
    """Path index -> NonFiniteState for every diverged path."""
    lower: np.ndarray
    upper: np.ndarray
    """Per-coordinate extremes over all steps and surviving paths."""


def simulate_batch(cfg: SimConfig, paths: Sequence[int], increments: np.ndarray | None = None) -> BatchResult:
    """Simulate several paths side by side.

    Diverged paths are frozen at their last finite state, flagged in
    ``alive`` and reported in ``failures``; the rest carry on.
    """
    paths = np.asarray(paths, dtype=np.int64)
    B, n, m, steps = len(paths), cfg.n, cfg.m, cfg.steps
    kernel = _Kernel(cfg)
    noisy = not cfg.noise.silent
    if increments is not None:
        increments = np.asarray(increments, dtype=float).reshape(B, -1, n)
        if increments.shape[1] < steps:
            raise ValueError(f"need {steps} increments per path, got {increments.shape[1]}")
    rngs = [path_rng(cfg.seed, p) for p in paths] if noisy and increments is None else None
    sqrt_h = math.sqrt(cfg.h)

    ks = cfg.sample_steps()
    out = np.empty((B, len(ks), n, m))
    X = np.broadcast_to(cfg.x0, (B, n, m)).copy()
    alive = np.ones(B, dtype=bool)
    failures = {}
    lower = X.min(axis=(0, 1))
    upper = X.max(axis=(0, 1))
    out[:, 0] = X
    next_sample = 1
    dB_all = np.zeros((B, n))
    buf, buf_start = None, 0

    for k in range(steps):
        if noisy:
            if increments is not None:
                dB_all = increments[:, k]
            else:
                if buf is None or k - buf_start >= buf.shape[1]:
                    buf_start = k
                    size = min(_CHUNK, steps - k)
                    buf = np.stack([r.standard_normal((size, n)) for r in rngs]) * sqrt_h
                dB_all = buf[:, k - buf_start]
        Xn = kernel.step(X, k, dB_all)

        peak = np.max(np.abs(Xn))
        if not peak <= DIVERGENCE_THRESHOLD:
            mag = np.abs(Xn).max(axis=2)
            bad_paths = np.nonzero(~(mag <= DIVERGENCE_THRESHOLD).all(axis=1) & alive)[0]
            for b in bad_paths:
                agent = int(np.argmax(~(mag[b] <= DIVERGENCE_THRESHOLD)))
                failures[int(paths[b])] = NonFiniteState(k + 1, agent, float(mag[b, agent]), int(paths[b]))
                alive[b] = False
            Xn[~alive] = X[~alive]
        X = Xn

        if alive.all():
            np.minimum(lower, X.min(axis=(0, 1)), out=lower)
            np.maximum(upper, X.max(axis=(0, 1)), out=upper)
        elif alive.any():
            np.minimum(lower, X[alive].min(axis=(0, 1)), out=lower)
            np.maximum(upper, X[alive].max(axis=(0, 1)), out=upper)

        if next_sample < len(ks) and k + 1 == ks[next_sample]:
            out[:, next_sample] = X
            next_sample += 1

    return BatchResult(paths, ks, out, alive, failures, lower, upper)


def simulate_path(cfg: SimConfig, path: int = 0, increments: np.ndarray | None = None) -> Trajectory:
    """One path of the SDE; bit-reproducible for fixed ``(cfg.seed, path, cfg.h)``.

    ``increments`` (shape ``(steps, n)``) replaces the random Brownian
    increments, e.g. to drive coarse and fine grids with the same path.

    Raises
    ------
    NonFiniteState
        With the step, agent and magnitude at which the path blew up.
    """
    res = simulate_batch(cfg, [path], None if increments is None else np.asarray(increments)[None])
    if res.failures:
        raise res.failures[path]
    return Trajectory(res.sample_steps * cfg.h, res.states[0], cfg.seed, path)


def average_state(states: np.ndarray) -> np.ndarray:
    """Mean over agents (axis ``-2``)."""
    return np.asarray(states, dtype=float).mean(axis=-2)


def consensus_error(states: np.ndarray) -> np.ndarray:
    """``||x_i - xbar||`` for every agent; shape drops the last axis."""
    X = np.asarray(states, dtype=float)
    return np.linalg.norm(X - X.mean(axis=-2, keepdims=True), axis=-1)


def observed_box(res: BatchResult) -> Box:
    return Box(res.lower, res.upper)
