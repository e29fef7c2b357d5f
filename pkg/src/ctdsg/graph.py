"""Time-varying weighted digraphs, Laplacians and consensus transition matrices.

Conventions
-----------
Agents are indexed ``0..n-1`` in code.  ``weights[i, j] = a_ij`` is the weight
agent ``i`` puts on information received from agent ``j``; an edge written
``j -> i`` therefore sets ``weights[i, j]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import expm
from scipy.sparse.csgraph import connected_components

from .errors import DecayNotObserved, InvalidInterval, NonPeriodicHorizonTooShort

BALANCE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class WeightedDigraph:
    """Nonnegative adjacency matrix with a zero diagonal."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"adjacency must be square, got shape {w.shape}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("adjacency weights must be finite and nonnegative")
        if np.any(np.diag(w) != 0):
            raise ValueError("adjacency diagonal must be exactly zero")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int, float]]) -> "WeightedDigraph":
        """Build from ``(source, target, weight)`` triples (0-based)."""
        w = np.zeros((n, n))
        for src, dst, weight in edges:
            if src == dst:
                raise ValueError(f"self-loop on agent {src}")
            w[dst, src] += weight
        return cls(w)

    def edges(self) -> list[tuple[int, int, float]]:
        dst, src = np.nonzero(self.weights)
        return [(int(j), int(i), float(self.weights[i, j])) for i, j in zip(dst, src)]

    def laplacian(self) -> np.ndarray:
        return laplacian(self)

    def is_balanced(self, tol: float = BALANCE_TOL) -> bool:
        return is_balanced(self, tol)


def laplacian(g: WeightedDigraph) -> np.ndarray:
    """``L = diag(row sums of A) - A``; every row of the result sums to zero."""
    a = g.weights
    lap = -a.copy()
    lap[np.diag_indices_from(lap)] = a.sum(axis=1)
    return lap


def is_balanced(g: WeightedDigraph, tol: float = BALANCE_TOL) -> bool:
    if tol <= 0:
        raise ValueError("tol must be positive")
    a = g.weights
    return bool(np.all(np.abs(a.sum(axis=1) - a.sum(axis=0)) <= tol))


def is_strongly_connected(weights: np.ndarray) -> bool:
    n_comp, _ = connected_components(np.asarray(weights) > 0, directed=True, connection="strong")
    return n_comp == 1


@dataclass(frozen=True, eq=False)
class GraphSchedule:
    """Piecewise-constant graph signal ``t -> G(t)``.

    Segment ``k`` holds ``graphs[k]`` for ``durations[k]`` seconds.  A periodic
    schedule repeats forever; a non-periodic one holds its last graph after the
    final switch.
    """

    segments: tuple[tuple[float, WeightedDigraph], ...]
    periodic: bool = True
    _starts: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        segs = tuple((float(d), g) for d, g in self.segments)
        if not segs:
            raise ValueError("schedule needs at least one segment")
        n = segs[0][1].n
        for d, g in segs:
            if not d > 0 or not math.isfinite(d):
                raise ValueError(f"segment durations must be positive, got {d}")
            if g.n != n:
                raise ValueError("all graphs in a schedule must have the same agent count")
        object.__setattr__(self, "segments", segs)
        starts = np.concatenate([[0.0], np.cumsum([d for d, _ in segs])])
        starts.setflags(write=False)
        object.__setattr__(self, "_starts", starts)

    @classmethod
    def constant(cls, g: WeightedDigraph, duration: float = 1.0) -> "GraphSchedule":
        return cls(((duration, g),), periodic=True)

    @property
    def n(self) -> int:
        return self.segments[0][1].n

    @property
    def period(self) -> float:
        return float(self._starts[-1])

    @property
    def durations(self) -> tuple[float, ...]:
        return tuple(d for d, _ in self.segments)

    @property
    def graphs(self) -> tuple[WeightedDigraph, ...]:
        return tuple(g for _, g in self.segments)

    def is_balanced(self, tol: float = BALANCE_TOL) -> bool:
        return all(g.is_balanced(tol) for g in self.graphs)

    def union_weights(self) -> np.ndarray:
        return sum(g.weights for g in self.graphs)

    def segment_index(self, t: float) -> int:
        if t < 0:
            raise ValueError("schedule is defined for t >= 0 only")
        if self.periodic:
            t = math.fmod(t, self.period)
        elif t >= self.period:
            return len(self.segments) - 1
        k = int(np.searchsorted(self._starts, t, side="right")) - 1
        return min(k, len(self.segments) - 1)

    def graph_at(self, t: float) -> WeightedDigraph:
        return self.segments[self.segment_index(t)][1]

    def laplacian_at(self, t: float) -> np.ndarray:
        return laplacian(self.graph_at(t))

    def pieces(self, t0: float, t1: float):
        """Yield ``(segment index, length)`` for the constant pieces covering ``[t0, t1]``."""
        if t1 < t0:
            raise InvalidInterval(f"interval end {t1} precedes start {t0}")
        nseg = len(self.segments)
        if self.periodic:
            cycles, offset = divmod(t0, self.period)
            base = cycles * self.period
        else:
            base, offset = 0.0, t0
        k = int(np.searchsorted(self._starts, offset, side="right")) - 1
        k = min(max(k, 0), nseg - 1)
        t = t0
        while t < t1:
            if not self.periodic and k == nseg - 1:
                end = math.inf
            else:
                end = base + self._starts[k + 1]
            stop = min(end, t1)
            if stop > t:
                yield k, stop - t
            t = stop
            k += 1
            if k == nseg and self.periodic:
                k = 0
                base += self.period

    def integrated_weights(self, t0: float, t1: float) -> np.ndarray:
        """Exact ``int_{t0}^{t1} A(tau) dtau``."""
        out = np.zeros((self.n, self.n))
        for k, length in self.pieces(t0, t1):
            out += length * self.segments[k][1].weights
        return out


@dataclass(frozen=True)
class ConnectivityVerdict:
    strongly_connected: bool
    edges: tuple[tuple[int, int], ...]
    delta: float
    tc: float
    horizon_only: bool = False
    """True for non-periodic schedules: the verdict covers only the given horizon."""


def check_delta_tc_connectivity(s: GraphSchedule, delta: float, tc: float) -> ConnectivityVerdict:
    """Decide whether ``s`` is (delta, tc)-strongly connected.

    An edge ``j -> i`` qualifies when its weight integrated over every window of
    length ``tc`` is at least ``delta``.  The window integral is piecewise linear
    in the window start with kinks at the switching times and at switching
    times minus ``tc``, so checking those starts plus the midpoints between
    them gives the exact minimum.
    """
    if delta <= 0 or tc <= 0:
        raise ValueError("delta and tc must be positive")
    switches = s._starts[:-1]
    if s.periodic:
        span = s.period
        cand = np.concatenate([switches, np.mod(switches - tc, span)])
    else:
        span = s.period - tc
        if span < 0:
            raise NonPeriodicHorizonTooShort(
                f"schedule covers {s.period} s, shorter than one window of {tc} s"
            )
        cand = np.concatenate([switches, switches - tc, [span]])
        cand = cand[(cand >= 0) & (cand <= span)]
    cand = np.unique(np.concatenate([cand, [0.0]]))
    mids = 0.5 * (cand[:-1] + cand[1:])
    starts = np.concatenate([cand, mids])

    min_int = np.full((s.n, s.n), np.inf)
    for t in starts:
        np.minimum(min_int, s.integrated_weights(float(t), float(t) + tc), out=min_int)
    np.fill_diagonal(min_int, 0.0)
    # window integrals are sums of float products; exact ties must count
    mask = min_int >= delta - 1e-12 * max(1.0, delta, tc)
    np.fill_diagonal(mask, False)
    dst, src = np.nonzero(mask)
    edges = tuple(sorted((int(j), int(i)) for i, j in zip(dst, src)))
    return ConnectivityVerdict(
        strongly_connected=is_strongly_connected(mask),
        edges=edges,
        delta=delta,
        tc=tc,
        horizon_only=not s.periodic,
    )


class _ExpCache:
    """Memoises ``expm(-L_k * length)`` for the full-length pieces of a schedule."""

    def __init__(self, s: GraphSchedule):
        self.s = s
        self.full = [expm(-laplacian(g) * d) for d, g in s.segments]

    def get(self, k: int, length: float) -> np.ndarray:
        d, g = self.s.segments[k]
        if math.isclose(length, d, rel_tol=1e-13, abs_tol=0.0):
            return self.full[k]
        return expm(-laplacian(g) * length)


def transition_matrix(s: GraphSchedule, t_from: float, t_to: float) -> np.ndarray:
    """State transition matrix ``Phi(t_to, t_from)`` of ``chi' = -L(t) chi``.

    Exact for piecewise-constant ``L``: the time-ordered product of the
    segment exponentials, later segments multiplying from the left.
    """
    if t_to < t_from:
        raise InvalidInterval(f"interval end {t_to} precedes start {t_from}")
    cache = _ExpCache(s)
    phi = np.eye(s.n)
    for k, length in s.pieces(t_from, t_to):
        phi = cache.get(k, length) @ phi
    return phi


def transition_path(s: GraphSchedule, times: Sequence[float]) -> np.ndarray:
    """``Phi(t, times[0])`` for each ``t`` in the nondecreasing sequence ``times``."""
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0):
        raise ValueError("times must be nondecreasing")
    cache = _ExpCache(s)
    out = np.empty((len(times), s.n, s.n))
    phi = np.eye(s.n)
    for idx, t in enumerate(times):
        if idx:
            for k, length in s.pieces(float(times[idx - 1]), float(t)):
                phi = cache.get(k, length) @ phi
        out[idx] = phi
    return out


def consensus_deviation(phis: np.ndarray) -> np.ndarray:
    """``max_ij |Phi_ij - 1/n|`` for a stack of transition matrices."""
    n = phis.shape[-1]
    return np.abs(phis - 1.0 / n).max(axis=(-2, -1))


@dataclass(frozen=True)
class DecayFit:
    C: float
    lam: float
    times: np.ndarray
    deviation: np.ndarray

    def bound(self, t, c_factor: float = 1.0, lam_factor: float = 1.0):
        return c_factor * self.C * (lam_factor * self.lam) ** np.asarray(t)

    def __iter__(self):
        return iter((self.C, self.lam))


def fit_decay_constants(s: GraphSchedule, horizon: float, grid: int = 400) -> DecayFit:
    """Fit ``max_ij |Phi(t,0)_ij - 1/n| ~ C * lam**t`` by least squares in log space.

    Raises
    ------
    DecayNotObserved
        If the deviation does not shrink over ``horizon`` or the fitted
        ``lam`` is not inside ``(0, 1)``.
    """
    if grid < 3:
        raise ValueError("grid needs at least 3 samples")
    times = np.linspace(0.0, horizon, grid)
    dev = consensus_deviation(transition_path(s, times))
    keep = dev > 1e-14
    kept = dev[keep]
    # a disconnected graph also shrinks d(t) at first, then stalls on a plateau;
    # demand that the second half keeps a tenth of the first half's log-decay
    mid = len(kept) // 2
    stalled = len(kept) >= 3 and np.log(kept[mid] / kept[-1]) < 0.1 * np.log(kept[0] / kept[mid])
    if keep.sum() < 3 or not kept[-1] < dev[0] or stalled:
        raise DecayNotObserved(
            f"deviation went from {dev[0]:.3g} to {dev[-1]:.3g} over {horizon} s without sustained decay"
        )
    slope, intercept = np.polyfit(times[keep], np.log(dev[keep]), 1)
    lam = math.exp(slope)
    if not 0 < lam < 1:
        raise DecayNotObserved(f"fitted rate {lam} is not in (0, 1)")
    return DecayFit(C=math.exp(intercept), lam=lam, times=times, deviation=dev)


def directed_cycle(n: int, nodes: Sequence[int], weight: float = 1.0) -> WeightedDigraph:
    """Directed cycle through ``nodes`` in order, closing back to the first."""
    edges = [(nodes[k], nodes[(k + 1) % len(nodes)], weight) for k in range(len(nodes))]
    return WeightedDigraph.from_edges(n, edges)


# Stand-in for the six-agent switching topology: a directed Hamiltonian
# cycle on the hexagon, visiting 0, 1, 3, 2, 4, 5, rotated by one position
# (labels shifted by +1 mod 6) for each of the four subgraphs.  Each subgraph
# is balanced with unit weights and the four are pairwise distinct.
DEFAULT_CYCLE = (0, 1, 3, 2, 4, 5)


def default_schedule(hold: float = 0.01) -> GraphSchedule:
    """Four rotations of ``DEFAULT_CYCLE``, each held ``hold`` seconds, repeating."""
    subgraphs = [directed_cycle(6, [(v + r) % 6 for v in DEFAULT_CYCLE]) for r in range(4)]
    return GraphSchedule(tuple((hold, g) for g in subgraphs), periodic=True)
