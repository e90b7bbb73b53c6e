import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from myopic_adhesion.fields import (BoxDomain, DomainMismatch, ScalarField, SymTensorField, VectorField,
                                    integrate, load_snapshot, lp_norm, min_eigenvalue_field, require_same,
                                    save_snapshot, spectral_norm_field, sym_index)


def test_domain_geometry():
    dom = BoxDomain([1.0, 2.0, 3.0], [4, 8, 6])
    assert dom.dim == 3
    np.testing.assert_allclose(dom.spacing, [0.25, 0.25, 0.5])
    assert dom.cell_volume == pytest.approx(0.03125)
    assert dom.size == 192
    x = dom.centers()
    assert x.shape == (3, 4, 8, 6)
    assert x[0, 0, 0, 0] == pytest.approx(0.125)
    assert x[2, 0, 0, -1] == pytest.approx(2.75)
    assert dom.boundary_distance().min() == pytest.approx(0.125)


@pytest.mark.parametrize("extent, cells, mode", [
    ([1.0], [2], "no-flux"),
    ([1.0, -1.0], [4, 4], "no-flux"),
    ([1.0, 1.0], [4], "no-flux"),
    ([1.0], [4], "reflecting"),
])
def test_domain_rejects_bad_input(extent, cells, mode):
    with pytest.raises(ValueError):
        BoxDomain(extent, cells, mode)


def test_refine_and_mismatch():
    dom = BoxDomain.cube(2, 1.0, 4)
    assert dom.refined().cells == (8, 8)
    assert dom.refined().coarsened() == dom
    with pytest.raises(DomainMismatch):
        require_same(dom, dom.refined())


def test_fields_reject_wrong_shape_and_nonfinite():
    dom = BoxDomain.cube(2, 1.0, 4)
    with pytest.raises(ValueError):
        ScalarField(dom, np.zeros((4, 5)))
    with pytest.raises(ValueError):
        ScalarField(dom, np.full((4, 4), np.nan))
    with pytest.raises(ValueError):
        VectorField(dom, np.zeros((3, 4, 4)))
    with pytest.raises(ValueError):
        SymTensorField(dom, np.zeros((4, 4, 4)))


def test_fields_are_read_only_copies():
    dom = BoxDomain.cube(1, 1.0, 4)
    raw = np.arange(4.0)
    f = ScalarField(dom, raw)
    raw[0] = 99
    assert f.values[0] == 0
    with pytest.raises(ValueError):
        f.values[0] = 1


def test_integrate_examples():
    dom = BoxDomain.cube(3, 1.0, 16)
    assert integrate(ScalarField.constant(dom, 0.0)) == 0
    assert integrate(ScalarField.constant(dom, 1.0)) == pytest.approx(1.0, abs=1e-12)
    assert integrate(ScalarField.from_function(dom, lambda x: x[0])) == pytest.approx(0.5, abs=1e-12)


def test_lp_norm_examples():
    dom = BoxDomain.cube(3, 1.0, 8)
    assert lp_norm(ScalarField.constant(dom, 1.0), 7) == pytest.approx(1.0)
    assert lp_norm(ScalarField.constant(dom, -2.0), 1) == pytest.approx(2.0)
    assert lp_norm(ScalarField.constant(dom, -2.0), np.inf) == 2.0
    per = BoxDomain.cube(3, 1.0, 64, "periodic")
    s = ScalarField.from_function(per, lambda x: np.sin(2 * np.pi * x[0]))
    assert lp_norm(s, 2) == pytest.approx(1 / np.sqrt(2), abs=1e-3)
    with pytest.raises(ValueError):
        lp_norm(s, 0.5)


def test_min_eigenvalue_examples():
    dom = BoxDomain.cube(3, 1.0, 8)
    np.testing.assert_allclose(min_eigenvalue_field(SymTensorField.identity(dom)).values, 1.0)
    diag = SymTensorField.from_matrices(dom, np.diag([2.0, 0.0, 1.0]).reshape(3, 3, 1, 1, 1) * np.ones(dom.cells))
    np.testing.assert_allclose(min_eigenvalue_field(diag).values, 0.0, atol=1e-15)
    # |x - x0|^2 I: smallest at the cell holding x0, at most the quantization of the offset
    x0 = np.array([0.4, 0.55, 0.7])
    x = np.moveaxis(dom.centers(), 0, -1)
    w = ((x - x0) ** 2).sum(-1)
    T = SymTensorField.from_matrices(dom, np.eye(3).reshape(3, 3, 1, 1, 1) * w)
    m = min_eigenvalue_field(T).values
    idx = tuple(np.minimum((x0 / dom.spacing).astype(int), 7))
    assert m[idx] == m.min()
    assert m[idx] <= 3 * (dom.spacing[0] / 2) ** 2


def test_sym_storage_roundtrip():
    assert sym_index(3) == [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]
    dom = BoxDomain.cube(3, 1.0, 4)
    rng = np.random.default_rng(1)
    B = rng.normal(size=(3, 3) + dom.cells)
    M = B + np.swapaxes(B, 0, 1)
    T = SymTensorField.from_matrices(dom, M)
    np.testing.assert_array_equal(T.matrices(), np.moveaxis(M, (0, 1), (-2, -1)))
    assert np.array_equal(T.component(0, 2), T.component(2, 0))
    with pytest.raises(ValueError):
        SymTensorField.from_matrices(dom, B)
    assert spectral_norm_field(T).values.max() == pytest.approx(np.abs(np.linalg.eigvalsh(T.matrices())).max())


def test_snapshot_roundtrip(tmp_path):
    dom = BoxDomain([1.0, 2.0, 0.5], [4, 5, 3], "periodic")
    rng = np.random.default_rng(2)
    f = ScalarField(dom, rng.normal(size=dom.cells))
    save_snapshot(tmp_path / "c_00003", f, name="c", time=0.125)
    raw = np.fromfile(tmp_path / "c_00003.bin", dtype="<f8")
    assert raw.size == dom.size
    meta = json.loads((tmp_path / "c_00003.json").read_text())
    assert meta["cells"] == [4, 5, 3] and meta["boundary_mode"] == "periodic"
    assert meta["time"] == 0.125 and meta["kind"] == "ScalarField"
    g, meta2 = load_snapshot(tmp_path / "c_00003")
    assert g.domain == dom
    np.testing.assert_array_equal(g.values, f.values)
    assert meta2["name"] == "c"


def test_snapshot_vector_and_tensor(tmp_path):
    dom = BoxDomain.cube(2, 1.0, 3)
    v = VectorField(dom, np.arange(18.0).reshape(2, 3, 3))
    save_snapshot(tmp_path / "v", v, name="Ac")
    w, meta = load_snapshot(tmp_path / "v")
    assert isinstance(w, VectorField) and meta["kind"] == "VectorField"
    np.testing.assert_array_equal(w.values, v.values)
    T = SymTensorField.identity(dom, 2.0)
    save_snapshot(tmp_path / "D", T, name="D")
    U, _ = load_snapshot(tmp_path / "D")
    np.testing.assert_array_equal(U.matrices(), T.matrices())


def test_snapshot_rejects_truncated_payload(tmp_path):
    dom = BoxDomain.cube(2, 1.0, 4)
    save_snapshot(tmp_path / "c", ScalarField.constant(dom, 1.0))
    data = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "c.bin").write_bytes(data[:-8])
    with pytest.raises(ValueError):
        load_snapshot(tmp_path / "c")


_cells = st.tuples(st.integers(3, 6), st.integers(3, 6))


@settings(max_examples=40, deadline=None)
@given(_cells, st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 31))
def test_integrate_is_linear(cells, a, b, seed):
    dom = BoxDomain([1.0, 1.5], list(cells))
    rng = np.random.default_rng(seed)
    f = ScalarField(dom, rng.normal(size=cells))
    g = ScalarField(dom, rng.normal(size=cells))
    lhs = integrate(ScalarField(dom, a * f.values + b * g.values))
    rhs = a * integrate(f) + b * integrate(g)
    scale = abs(a) * integrate(ScalarField(dom, abs(f.values))) + abs(b) * integrate(ScalarField(dom, abs(g.values)))
    assert abs(lhs - rhs) <= 1e-12 * max(scale, 1e-300)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-10, 10)),
       arrays(np.float64, (4, 5), elements=st.floats(-10, 10)),
       st.sampled_from([1.0, 1.5, 2.0, 4.0, np.inf]))
def test_lp_triangle_inequality(u, v, p):
    dom = BoxDomain([1.0, 2.0], [4, 5])
    f, g = ScalarField(dom, u), ScalarField(dom, v)
    assert lp_norm(ScalarField(dom, u + v), p) <= lp_norm(f, p) + lp_norm(g, p) + 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 3))
def test_min_eig_below_diagonal(seed, d):
    dom = BoxDomain.cube(d, 1.0, 3)
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(d, d) + dom.cells)
    T = SymTensorField.from_matrices(dom, B + np.swapaxes(B, 0, 1))
    m = min_eigenvalue_field(T).values
    for i in range(d):
        assert np.all(m <= T.component(i, i) + 1e-12)
