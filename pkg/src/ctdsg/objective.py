"""Local convex objectives, their sum, and region-scoped smoothness constants."""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .errors import DimensionMismatch, SingularSystem, UnboundedRegion

SAFETY = 1.01


@runtime_checkable
class Objective(Protocol):
    """Evaluator interface for a twice-differentiable local cost.

    ``value`` and ``grad`` must accept arrays of shape ``(..., m)``.
    """

    dim: int

    def value(self, x: np.ndarray) -> np.ndarray: ...

    def grad(self, x: np.ndarray) -> np.ndarray: ...

    def hessian(self, x: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class QuadraticObjective:
    """``f(x) = 0.5 x^T P x + q^T x + c`` with ``P`` symmetric PSD."""

    P: np.ndarray
    q: np.ndarray
    c: float = 0.0

    def __post_init__(self):
        P = np.atleast_2d(np.array(self.P, dtype=float))
        q = np.atleast_1d(np.array(self.q, dtype=float))
        if P.shape != (q.size, q.size):
            raise DimensionMismatch(f"P has shape {P.shape} but q has length {q.size}")
        if np.max(np.abs(P - P.T), initial=0.0) > 1e-12:
            raise ValueError("P must be symmetric")
        if np.linalg.eigvalsh(P).min() < -1e-10:
            raise ValueError("P must be positive semidefinite")
        P.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "c", float(self.c))

    @property
    def dim(self) -> int:
        return self.q.size

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.dim,):
            raise DimensionMismatch(f"expected trailing dimension {self.dim}, got {x.shape}")
        return x

    def value(self, x):
        x = self._check(x)
        return 0.5 * np.einsum("...i,ij,...j->...", x, self.P, x) + x @ self.q + self.c

    def grad(self, x):
        x = self._check(x)
        # column-by-column accumulation keeps results bitwise independent of batch shape
        out = np.broadcast_to(self.q, x.shape).copy()
        for b in range(self.dim):
            out += x[..., b, None] * self.P[:, b]
        return out

    def hessian(self, x=None):
        return self.P

    @property
    def minimizer(self) -> np.ndarray:
        return np.linalg.solve(self.P, -self.q)


def reference_objectives() -> list[QuadraticObjective]:
    """The six two-dimensional quadratics of the reference experiment.

    ``f_i(x) = a_i x1^2 - b_i x1 + (i/6) x2^2 - ((i+1)/2) x2`` for ``i = 1..6``.
    """
    return pattern_objectives(
        a=[0.3, 0.15, 0.15, 0.1, 0.2, 0.1],
        b=[0.5, 0.8, 0.5, 0.8, 0.2, 0.2],
    )


def pattern_objectives(a: Sequence[float], b: Sequence[float]) -> list[QuadraticObjective]:
    objs = []
    for i, (ai, bi) in enumerate(zip(a, b), start=1):
        P = np.diag([2.0 * ai, i / 3.0])
        q = np.array([-bi, -(i + 1) / 2.0])
        objs.append(QuadraticObjective(P, q))
    return objs


@dataclass(frozen=True)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise DimensionMismatch("box bounds must be 1-d arrays of equal length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise UnboundedRegion("box bounds must be finite")
        if np.any(hi < lo):
            raise ValueError("box upper bound below lower bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def cube(cls, half_width: float, dim: int) -> "Box":
        return cls(np.full(dim, -half_width), np.full(dim, half_width))

    def corners(self) -> np.ndarray:
        return np.array(list(itertools.product(*zip(self.lower, self.upper))))

    def contains(self, other: "Box") -> bool:
        return bool(np.all(other.lower >= self.lower) and np.all(other.upper <= self.upper))

    def padded(self, margin: float) -> "Box":
        return Box(self.lower - margin, self.upper + margin)

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(count, self.lower.size))


@dataclass(frozen=True)
class SmoothnessCertificate:
    M: float
    """Bound on every local gradient norm over ``region``."""
    L_smooth: float
    """Lipschitz constant shared by all local gradients over ``region``."""
    region: Box
    exact: bool


class ObjectiveSet:
    """``f = sum_i f_i`` over a common dimension.

    When every local objective is quadratic the gradients of all agents are
    evaluated in one vectorised pass (``grads``), which is the hot path of the
    simulator.
    """

    def __init__(self, objectives: Sequence[Objective]):
        objectives = tuple(objectives)
        if not objectives:
            raise ValueError("need at least one objective")
        dims = {o.dim for o in objectives}
        if len(dims) != 1:
            raise DimensionMismatch(f"objectives disagree on dimension: {sorted(dims)}")
        self.objectives = objectives
        self.dim = dims.pop()
        self.quadratic = all(isinstance(o, QuadraticObjective) for o in objectives)
        if self.quadratic:
            self._P = np.stack([o.P for o in objectives])
            self._q = np.stack([o.q for o in objectives])
            self._c = np.array([o.c for o in objectives])
        self._xstar = None

    def __len__(self):
        return len(self.objectives)

    def __getstate__(self):
        return {"objectives": self.objectives}

    def __setstate__(self, state):
        self.__init__(state["objectives"])

    @property
    def n(self) -> int:
        return len(self.objectives)

    def value(self, x) -> np.ndarray:
        """Global objective ``f(x)`` for ``x`` of shape ``(..., m)``."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.dim,):
            raise DimensionMismatch(f"expected trailing dimension {self.dim}, got {x.shape}")
        if self.quadratic:
            P, q, c = self._P.sum(axis=0), self._q.sum(axis=0), self._c.sum()
            return 0.5 * np.einsum("...i,ij,...j->...", x, P, x) + x @ q + c
        return sum(o.value(x) for o in self.objectives)

    def grad(self, x) -> np.ndarray:
        return sum(o.grad(x) for o in self.objectives)

    def grads(self, X: np.ndarray) -> np.ndarray:
        """Per-agent gradients: ``out[..., i, :] = grad f_i(X[..., i, :])``."""
        if X.shape[-2:] != (self.n, self.dim):
            raise DimensionMismatch(f"expected trailing shape {(self.n, self.dim)}, got {X.shape}")
        if self.quadratic:
            out = np.broadcast_to(self._q, X.shape).copy()
            for b in range(self.dim):
                out += X[..., b, None] * self._P[:, :, b]
            return out
        out = np.empty_like(X)
        for i, o in enumerate(self.objectives):
            out[..., i, :] = o.grad(X[..., i, :])
        return out

    def minimizer(self) -> np.ndarray:
        if self._xstar is None:
            self._xstar = global_minimizer(self)
        return self._xstar

    def minimum(self) -> float:
        return float(self.value(self.minimizer()))


def grad(obj: Objective, x) -> np.ndarray:
    return obj.grad(x)


def global_minimizer(objs: ObjectiveSet, tol: float = 1e-12) -> np.ndarray:
    """Solve ``sum_i grad f_i(x) = 0``.

    Quadratic sets are solved directly.  A singular summed Hessian raises
    ``SingularSystem`` carrying the least-norm solution, after a warning.
    Other objectives use Newton's method on the summed gradient.
    """
    if objs.quadratic:
        P = objs._P.sum(axis=0)
        q = objs._q.sum(axis=0)
        s = np.linalg.svd(P, compute_uv=False)
        if s.min() <= tol * max(s.max(), 1.0):
            sol = np.linalg.lstsq(P, -q, rcond=None)[0]
            warnings.warn("summed Hessian is singular; minimizer is not unique", RuntimeWarning)
            raise SingularSystem("summed Hessian is singular", solution=sol)
        return np.linalg.solve(P, -q)

    x = np.zeros(objs.dim)
    for _ in range(100):
        g = objs.grad(x)
        H = sum(o.hessian(x) for o in objs.objectives)
        step = np.linalg.solve(H, g)
        x = x - step
        if np.linalg.norm(step) <= 1e-14 * max(1.0, np.linalg.norm(x)):
            break
    return x


def certify_constants(objs: ObjectiveSet, region: Box, samples: int = 1000, seed: int = 0) -> SmoothnessCertificate:
    """Gradient bound and smoothness constant over ``region``, inflated by 1%.

    For quadratics both suprema are exact: the gradient norm is convex so its
    maximum over a box sits at a corner, and the Hessian is constant.
    Other objectives are sampled (uniformly plus the corners).
    """
    if samples < 100:
        raise ValueError("samples must be at least 100")
    if region.lower.size != objs.dim:
        raise DimensionMismatch("region dimension does not match objectives")
    corners = region.corners()
    if objs.quadratic:
        M = max(np.linalg.norm(o.grad(corners), axis=-1).max() for o in objs.objectives)
        L = max(np.linalg.norm(o.P, 2) for o in objs.objectives)
        exact = True
    else:
        rng = np.random.default_rng(seed)
        pts = np.vstack([corners, region.sample(samples, rng)])
        M = max(np.linalg.norm(o.grad(pts), axis=-1).max() for o in objs.objectives)
        L = max(np.linalg.norm(o.hessian(p), 2) for o in objs.objectives for p in pts)
        exact = False
    return SmoothnessCertificate(M=SAFETY * float(M), L_smooth=SAFETY * float(L), region=region, exact=exact)


def optimality_gap(objs: ObjectiveSet, x) -> np.ndarray | float:
    """``f(x) - f(x*)`` with round-off-sized values snapped to zero."""
    gap = objs.value(x) - objs.minimum()
    gap = np.where(np.abs(gap) <= 1e-14, 0.0, gap)
    return float(gap) if gap.ndim == 0 else gap
