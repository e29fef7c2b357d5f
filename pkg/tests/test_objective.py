from __future__ import annotations

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctdsg.errors import DimensionMismatch, SingularSystem, UnboundedRegion
from ctdsg.objective import (
    Box,
    ObjectiveSet,
    QuadraticObjective,
    certify_constants,
    global_minimizer,
    grad,
    optimality_gap,
    reference_objectives,
)

finite = st.floats(-10, 10, allow_nan=False)


def random_quadratic(rng: np.random.Generator, m: int, ridge: float = 0.0) -> QuadraticObjective:
    A = rng.normal(size=(m, m))
    return QuadraticObjective(A @ A.T + ridge * np.eye(m), rng.normal(size=m), float(rng.normal()))


class Quartic:
    """Non-quadratic convex test objective ``sum (x_k - c_k)^4 / 4 + |x|^2 / 2``."""

    def __init__(self, c):
        self.c = np.asarray(c, dtype=float)
        self.dim = self.c.size

    def value(self, x):
        d = np.asarray(x) - self.c
        return 0.25 * np.sum(d**4, axis=-1) + 0.5 * np.sum(np.asarray(x) ** 2, axis=-1)

    def grad(self, x):
        return (np.asarray(x) - self.c) ** 3 + np.asarray(x)

    def hessian(self, x):
        return np.diag(3 * (np.asarray(x) - self.c) ** 2 + 1)


# --- quadratic objective -----------------------------------------------------------

def test_rejects_asymmetric_or_indefinite():
    with pytest.raises(ValueError):
        QuadraticObjective([[1.0, 1.0], [0.0, 1.0]], [0.0, 0.0])
    with pytest.raises(ValueError):
        QuadraticObjective([[1.0, 0.0], [0.0, -1.0]], [0.0, 0.0])


def test_reference_agent1_gradient_at_origin():
    f1 = reference_objectives()[0]
    np.testing.assert_allclose(grad(f1, [0.0, 0.0]), [-0.5, -1.0], rtol=0, atol=1e-15)


def test_reference_hessians():
    for i, f in enumerate(reference_objectives(), start=1):
        a_i = [0.3, 0.15, 0.15, 0.1, 0.2, 0.1][i - 1]
        np.testing.assert_allclose(f.P, np.diag([2 * a_i, i / 3]))


def test_gradient_zero_at_own_minimizer():
    rng = np.random.default_rng(3)
    f = random_quadratic(rng, 3, ridge=0.5)
    assert np.abs(grad(f, f.minimizer)).max() <= 1e-12


def test_dimension_mismatch():
    f = reference_objectives()[0]
    with pytest.raises(DimensionMismatch):
        grad(f, [1.0, 2.0, 3.0])
    with pytest.raises(DimensionMismatch):
        optimality_gap(ObjectiveSet(reference_objectives()), [1.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_gradient_matches_central_differences(seed, m):
    rng = np.random.default_rng(seed)
    f = random_quadratic(rng, m)
    x = rng.normal(size=m) * 3
    eps = 1e-5
    fd = np.array([(f.value(x + eps * e) - f.value(x - eps * e)) / (2 * eps) for e in np.eye(m)])
    g = grad(f, x)
    assert np.allclose(g, fd, rtol=1e-6, atol=1e-6 * max(1.0, np.abs(g).max()))


def test_non_quadratic_gradient_matches_central_differences():
    f = Quartic([0.5, -1.0])
    x = np.array([0.3, 0.7])
    eps = 1e-5
    fd = np.array([(f.value(x + eps * e) - f.value(x - eps * e)) / (2 * eps) for e in np.eye(2)])
    np.testing.assert_allclose(f.grad(x), fd, rtol=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(float, 2, elements=finite), arrays(float, 2, elements=finite), st.floats(0, 1))
def test_global_objective_is_convex(x, y, w):
    objs = ObjectiveSet(reference_objectives())
    lhs = objs.value(w * x + (1 - w) * y)
    rhs = w * objs.value(x) + (1 - w) * objs.value(y)
    assert lhs <= rhs + 1e-10 * max(1.0, abs(rhs))


@settings(max_examples=50, deadline=None)
@given(arrays(float, 2, elements=st.floats(-5, 5)))
def test_gap_nonnegative(x):
    assert optimality_gap(ObjectiveSet(reference_objectives()), x) >= 0


# --- global minimizer ------------------------------------------------------------

def test_reference_minimizer():
    xs = global_minimizer(ObjectiveSet(reference_objectives()))
    np.testing.assert_allclose(xs, [1.5, 27 / 14], rtol=0, atol=1e-14)


def test_minimizer_of_translated_norm():
    v = np.array([0.7, -2.0, 3.5])
    f = QuadraticObjective(np.eye(3), -v, 0.5 * v @ v)  # 1/2 |x - v|^2
    np.testing.assert_allclose(global_minimizer(ObjectiveSet([f])), v, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_minimizer_first_order_condition(seed):
    rng = np.random.default_rng(seed)
    objs = ObjectiveSet([random_quadratic(rng, 3, ridge=0.2) for _ in range(5)])
    assert np.linalg.norm(objs.grad(global_minimizer(objs))) <= 1e-10


def test_singular_system_reports_least_norm_solution():
    # both objectives ignore coordinate 2, so the minimizer is a line
    f1 = QuadraticObjective(np.diag([1.0, 0.0]), [-1.0, 0.0])
    f2 = QuadraticObjective(np.diag([3.0, 0.0]), [-1.0, 0.0])
    with pytest.warns(RuntimeWarning), pytest.raises(SingularSystem) as info:
        global_minimizer(ObjectiveSet([f1, f2]))
    np.testing.assert_allclose(info.value.solution, [0.5, 0.0], atol=1e-14)


def test_non_quadratic_minimizer():
    objs = ObjectiveSet([Quartic([1.0, 0.0]), Quartic([-1.0, 2.0])])
    xs = global_minimizer(objs)
    assert np.linalg.norm(objs.grad(xs)) <= 1e-12


# --- certificates -----------------------------------------------------------------

def test_certificate_scalar_quadratic():
    cert = certify_constants(ObjectiveSet([QuadraticObjective([[1.0]], [0.0])]), Box([-2.0], [2.0]))
    assert cert.exact
    assert cert.L_smooth == pytest.approx(1.01, abs=1e-14)
    assert cert.M == pytest.approx(2.02, abs=1e-14)


def test_certificate_reference_box():
    objs = ObjectiveSet(reference_objectives())
    cert = certify_constants(objs, Box.cube(5.0, 2))
    # spectral norms of diag(2 a_i, i/3) peak at agent 6: diag(0.2, 2)
    assert cert.L_smooth == pytest.approx(1.01 * 2.0, abs=1e-14)
    # the gradient norm is convex, so a dense grid never beats the corners
    g = np.linspace(-5, 5, 41)
    pts = np.array([[u, v] for u in g for v in g])
    dense = max(np.linalg.norm(o.grad(pts), axis=-1).max() for o in objs.objectives)
    assert cert.M == pytest.approx(1.01 * dense, rel=1e-12)


def test_certificate_linear_objective():
    cert = certify_constants(ObjectiveSet([QuadraticObjective(np.zeros((2, 2)), [1.0, -2.0])]), Box.cube(1.0, 2))
    assert cert.L_smooth <= 0.01


def test_certificate_sampled_path_bounds_samples():
    objs = ObjectiveSet([Quartic([0.5, 0.5]), Quartic([-0.5, 1.0])])
    region = Box.cube(2.0, 2)
    cert = certify_constants(objs, region, samples=500)
    assert not cert.exact
    rng = np.random.default_rng(11)
    xs, ys = region.sample(300, rng), region.sample(300, rng)
    for o in objs.objectives:
        assert np.linalg.norm(o.grad(xs), axis=-1).max() <= cert.M
        lhs = np.linalg.norm(o.grad(xs) - o.grad(ys), axis=-1)
        assert np.all(lhs <= cert.L_smooth * np.linalg.norm(xs - ys, axis=-1) + 1e-12)


def test_certificate_needs_enough_samples_and_bounded_region():
    with pytest.raises(ValueError):
        certify_constants(ObjectiveSet(reference_objectives()), Box.cube(1.0, 2), samples=50)
    with pytest.raises(UnboundedRegion):
        Box([-np.inf, 0.0], [1.0, 1.0])


@settings(max_examples=50, deadline=None)
@given(arrays(float, 2, elements=st.floats(-5, 5)), arrays(float, 2, elements=st.floats(-5, 5)))
def test_l_smoothness_sampled(x, y):
    objs = ObjectiveSet(reference_objectives())
    L = certify_constants(objs, Box.cube(5.0, 2)).L_smooth
    for o in objs.objectives:
        assert np.linalg.norm(o.grad(x) - o.grad(y)) <= L * np.linalg.norm(x - y) + 1e-12


# --- optimality gap ------------------------------------------------------------------

def test_gap_at_minimizer_is_zero():
    objs = ObjectiveSet(reference_objectives())
    assert optimality_gap(objs, objs.minimizer()) == 0.0


def test_gap_at_origin_exact():
    x1, x2 = Fraction(3, 2), Fraction(27, 14)
    f_star = x1**2 - 3 * x1 + Fraction(7, 2) * x2**2 - Fraction(27, 2) * x2
    objs = ObjectiveSet(reference_objectives())
    assert optimality_gap(objs, [0.0, 0.0]) == pytest.approx(float(-f_star), rel=1e-14)
    assert float(f_star) == pytest.approx(-15.2678571, abs=1e-6)


def test_gap_vectorised_over_agents():
    objs = ObjectiveSet(reference_objectives())
    X = np.array([[0.0, 0.0], objs.minimizer(), [1.0, 1.0]])
    gaps = optimality_gap(objs, X)
    assert gaps.shape == (3,)
    assert gaps[1] == 0.0
    assert gaps[0] == pytest.approx(optimality_gap(objs, X[0]))


def test_vectorised_grads_match_per_agent():
    rng = np.random.default_rng(5)
    objs = ObjectiveSet(reference_objectives())
    X = rng.normal(size=(7, 6, 2))
    G = objs.grads(X)
    for i, o in enumerate(objs.objectives):
        np.testing.assert_allclose(G[:, i], o.grad(X[:, i]), atol=1e-14)
