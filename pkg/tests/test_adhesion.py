import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate as quad

from myopic_adhesion.adhesion import (AdhesionForce, AdhesionKernel, PotentialGradient, adhesion_via_potential,
                                      apply_adhesion, build_kernel, unit_ball_volume)
from myopic_adhesion.fields import BoxDomain, ScalarField

B3 = 4 * math.pi / 3


def test_force_families():
    s = np.array([0.0, 0.25, 1.0])
    np.testing.assert_allclose(AdhesionForce("constant", 2.0)(s), 2.0)
    np.testing.assert_allclose(AdhesionForce("linear", 2.0)(s), [0, 0.5, 2.0])
    np.testing.assert_allclose(AdhesionForce("hat", 4.0)(s), [0, 0.75, 0])
    assert AdhesionForce("hat", 4.0).max_value == 1.0
    with pytest.raises(ValueError):
        AdhesionForce("cubic", 1.0)
    with pytest.raises(ValueError):
        AdhesionForce("hat", -1.0)


def test_potential_gradient_is_odd_and_bounded():
    G = PotentialGradient(AdhesionForce("linear", 3.0), 3)
    rng = np.random.default_rng(0)
    x = rng.uniform(-1.2, 1.2, (500, 3))
    np.testing.assert_array_equal(G(-x), -G(x))
    assert np.linalg.norm(G(x), axis=1).max() <= 3.0 / B3 + 1e-15
    outside = np.linalg.norm(x, axis=1) > 1
    assert np.all(G(x)[outside] == 0)


@pytest.mark.parametrize("name", AdhesionForce.KINDS)
def test_kernel_weights_antisymmetric(name):
    dom = BoxDomain.cube(3, 2.0, 16)
    K = build_kernel(AdhesionForce(name, 1.5), dom)
    assert np.all(K.offsets[0] == 0) and np.all(K.weights[0] == 0)
    lookup = {tuple(o): w for o, w in zip(K.offsets, K.weights)}
    for o, w in zip(K.offsets, K.weights):
        assert np.array_equal(lookup[tuple(-o)], -w)
    assert np.all(np.linalg.norm(K.offsets * dom.spacing, axis=1) <= 1 + 1e-12)


def test_kernel_zero_force():
    K = build_kernel(AdhesionForce("constant", 0.0), BoxDomain.cube(3, 2.0, 8))
    assert np.all(K.weights == 0)


def test_kernel_weight_mass_against_quadrature():
    # F = 1: sum |w_k| approximates (1/|B1|) int_{B1} |xi/|xi|| dxi = 1
    dom = BoxDomain.cube(3, 4.0, 32)
    K = build_kernel(AdhesionForce("constant", 1.0), dom)
    assert K.weight_sum_norm() == pytest.approx(1.0, rel=0.05)


def test_kernel_needs_resolved_ball():
    with pytest.raises(ValueError):
        build_kernel(AdhesionForce("hat", 1.0), BoxDomain.cube(3, 3.0, 4))


def test_zero_density():
    dom = BoxDomain.cube(3, 2.0, 8)
    K = build_kernel(AdhesionForce("hat", 4.0), dom)
    c = ScalarField.constant(dom, 0.0)
    assert np.all(apply_adhesion(K, c).values == 0)
    assert np.all(adhesion_via_potential(PotentialGradient(K.force, 3), c).values == 0)


def test_radial_density_has_no_pull_at_its_center():
    dom = BoxDomain.cube(3, 3.0, 24)
    x = dom.centers()
    ctr = x[:, 12, 12, 12]
    r = np.sqrt(((x - ctr.reshape(3, 1, 1, 1)) ** 2).sum(0))
    c = ScalarField(dom, np.where(r < 0.9, np.cos(np.pi * r / 1.8) ** 2, 0.0))
    A = apply_adhesion(build_kernel(AdhesionForce("hat", 4.0), dom), c, "direct").values
    assert np.abs(A[:, 12, 12, 12]).max() <= 1e-12


def test_point_mass_reproduces_kernel():
    dom = BoxDomain.cube(3, 4.0, 16)
    F = AdhesionForce("constant", 1.0)
    src = (8, 8, 8)
    v = np.zeros(dom.cells)
    v[src] = 1 / dom.cell_volume
    c = ScalarField(dom, v)
    A = apply_adhesion(build_kernel(F, dom), c, "direct").values
    P = adhesion_via_potential(PotentialGradient(F, 3), c).values
    for target in [(8, 8, 6), (7, 9, 8), (10, 9, 7)]:
        rvec = (np.array(src) - np.array(target)) * dom.spacing  # displacement from x to the mass
        expect = rvec / np.linalg.norm(rvec) / B3
        np.testing.assert_allclose(A[(slice(None),) + target], expect, atol=1e-12)
        np.testing.assert_allclose(P[(slice(None),) + target], expect, atol=1e-12)


def _slab_pull(z, inside):
    """e3 component of A c at height z for a density depending on x3 only, F = 1.

    The slab xi3 = t of the unit ball contributes 2 pi t (1 - |t|).
    """
    breaks = [t for t in np.linspace(-1, 1, 401)[1:-1]]
    val = quad.quad(lambda t: inside(z + t) * 2 * math.pi * t * (1 - abs(t)), -1, 1, points=breaks, limit=1000)[0]
    return val / B3


def test_interface_pull_matches_quadrature():
    """Periodic half-space indicator, F = 1: pull along +e3 just below the interface."""
    dom = BoxDomain.cube(3, 4.0, 64, "periodic")
    x3 = dom.centers()[2]
    c = ScalarField(dom, (x3 > 2.0).astype(float))
    A = apply_adhesion(build_kernel(AdhesionForce("constant", 1.0), dom), c, "fft").values
    k = 31  # last cell below the interface
    z = (k + 0.5) * dom.spacing[2]
    exact = _slab_pull(z, lambda s: 1.0 if (s % 4.0) > 2.0 else 0.0)
    a = A[:, 5, 7, k]
    assert a[2] > 0
    assert abs(a[0]) < 1e-12 and abs(a[1]) < 1e-12
    assert a[2] == pytest.approx(exact, rel=0.02)
    assert exact == pytest.approx(0.25, abs=0.02)


def test_unit_period_interface_pull_cancels():
    # with period 1 the unit ball spans two periods and the pull cancels exactly
    dom = BoxDomain.cube(3, 1.0, 64, "periodic")
    c = ScalarField(dom, (dom.centers()[2] > 0.5).astype(float))
    A = apply_adhesion(build_kernel(AdhesionForce("constant", 1.0), dom), c, "fft").values
    z = 31.5 / 64
    assert _slab_pull(z, lambda s: 1.0 if (s % 1.0) > 0.5 else 0.0) == pytest.approx(0.0, abs=1e-12)
    assert np.abs(A[2]).max() < 1e-4


@pytest.mark.parametrize("mode", ["no-flux", "periodic"])
def test_fft_matches_direct(mode):
    dom = BoxDomain.cube(3, 2.0, 16, mode)
    K = build_kernel(AdhesionForce("hat", 4.0), dom)
    c = ScalarField(dom, np.random.default_rng(3).uniform(0, 1, dom.cells))
    a = apply_adhesion(K, c, "direct").values
    b = apply_adhesion(K, c, "fft").values
    assert np.abs(a - b).max() <= 1e-10 * np.abs(a).max()


def test_no_flux_constant_is_pulled_inward_near_walls():
    # zero extension outside the box: A of a constant is nonzero near the boundary
    dom = BoxDomain.cube(3, 4.0, 16)
    A = apply_adhesion(build_kernel(AdhesionForce("hat", 4.0), dom), ScalarField.constant(dom, 1.0)).values
    assert A[0, 0, 8, 8] > 0 and A[0, -1, 8, 8] < 0
    assert np.abs(A[:, 8, 8, 8]).max() < 1e-14


@pytest.mark.parametrize("mode", ["no-flux", "periodic"])
@pytest.mark.parametrize("name", AdhesionForce.KINDS)
def test_two_routes_agree(mode, name):
    dom = BoxDomain([2.0, 1.5, 2.0], [16, 12, 8], mode)
    F = AdhesionForce(name, 2.0)
    c = ScalarField(dom, np.random.default_rng(4).uniform(0, 1, dom.cells))
    a = apply_adhesion(build_kernel(F, dom), c, "direct").values
    b = adhesion_via_potential(PotentialGradient(F, 3), c).values
    assert np.abs(a - b).max() <= 1e-12 * np.abs(b).max()


def test_sign_fault_is_detected():
    dom = BoxDomain.cube(3, 2.0, 8)
    F = AdhesionForce("hat", 4.0)
    K = build_kernel(F, dom)
    bad = AdhesionKernel(dom, F, K.offsets, -K.weights)
    c = ScalarField(dom, np.random.default_rng(5).uniform(0, 1, dom.cells))
    b = adhesion_via_potential(PotentialGradient(F, 3), c).values
    assert np.abs(apply_adhesion(bad, c, "direct").values - b).max() > 0.5 * np.abs(b).max()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from(["no-flux", "periodic"]), st.sampled_from(AdhesionForce.KINDS))
def test_adhesion_bounded_by_mass(seed, mode, name):
    dom = BoxDomain.cube(2, 2.0, 8, mode)
    F = AdhesionForce(name, 3.0)
    rng = np.random.default_rng(seed)
    c = ScalarField(dom, rng.normal(size=dom.cells))
    A = apply_adhesion(build_kernel(F, dom), c).values
    bound = F.max_value / unit_ball_volume(2) * np.abs(c.values).sum() * dom.cell_volume
    assert np.sqrt((A ** 2).sum(0)).max() <= bound * (1 + 1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(-2, 2), st.floats(-2, 2))
def test_adhesion_is_linear(seed, a, b):
    dom = BoxDomain.cube(2, 2.0, 8)
    K = build_kernel(AdhesionForce("hat", 4.0), dom)
    rng = np.random.default_rng(seed)
    u, v = rng.normal(size=(2,) + dom.cells)
    lhs = apply_adhesion(K, ScalarField(dom, a * u + b * v)).values
    rhs = a * apply_adhesion(K, ScalarField(dom, u)).values + b * apply_adhesion(K, ScalarField(dom, v)).values
    assert np.abs(lhs - rhs).max() <= 1e-12 * (abs(a) + abs(b) + 1)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_reflection_symmetry_periodic(seed):
    dom = BoxDomain.cube(3, 2.0, 8, "periodic")
    rng = np.random.default_rng(seed)
    u = rng.uniform(0, 1, dom.cells)
    u = u + u[::-1]  # even under x1 -> L - x1
    A = apply_adhesion(build_kernel(AdhesionForce("hat", 4.0), dom), ScalarField(dom, u), "direct").values
    tol = 1e-13 * np.abs(A).max()
    assert np.abs(A[0] + A[0][::-1]).max() <= tol
    assert np.abs(A[1] - A[1][::-1]).max() <= tol
    assert np.abs(A[2] - A[2][::-1]).max() <= tol


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(0, 7), st.integers(0, 7))
def test_periodic_translation_equivariance(seed, s0, s1):
    dom = BoxDomain.cube(2, 2.0, 8, "periodic")
    K = build_kernel(AdhesionForce("linear", 1.0), dom)
    u = np.random.default_rng(seed).normal(size=dom.cells)
    A = apply_adhesion(K, ScalarField(dom, u)).values
    B = apply_adhesion(K, ScalarField(dom, np.roll(u, (s0, s1), axis=(0, 1)))).values
    np.testing.assert_allclose(B, np.roll(A, (s0, s1), axis=(1, 2)), atol=1e-13)
