import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rae.geometry import (
    AffineTransform,
    PolynomialTransform,
    RstParams,
    affine_from_corners,
    basis,
    basis_jacobian,
    initial_search_radius,
    linearity_errors,
    local_affine,
    monomial_exponents,
    n_coeffs,
    poly_eval,
    rebase_matrix,
    rst_from_affine,
)
from rae.raster import GeoMeta

GEO = ((0.0, 0.0), (1.0, 0.0), (0.0, -1.0), (1.0, -1.0))


def _jacobi_svd_rotation(a, sweeps=50):
    """Polar rotation U V^T by one-sided Jacobi on the columns of ``a``."""
    u = np.array(a, dtype=float)
    v = np.eye(2)
    for _ in range(sweeps):
        alpha = u[:, 0] @ u[:, 0]
        beta = u[:, 1] @ u[:, 1]
        gamma = u[:, 0] @ u[:, 1]
        if abs(gamma) < 1e-15:
            break
        zeta = (beta - alpha) / (2 * gamma)
        t = np.sign(zeta) / (abs(zeta) + np.sqrt(1 + zeta * zeta)) if zeta != 0 else 1.0
        c = 1 / np.sqrt(1 + t * t)
        s = c * t
        rot = np.array([[c, s], [-s, c]])
        u = u @ rot
        v = v @ rot
    sig = np.linalg.norm(u, axis=0)
    return (u / sig) @ v.T


def test_n_coeffs():
    assert [n_coeffs(d) for d in (1, 2, 3)] == [3, 6, 10]


def test_monomial_order():
    assert monomial_exponents(2) == ((0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2))


def test_identity_corners():
    a = affine_from_corners(GeoMeta(GEO), GeoMeta(GEO), (100, 120), (100, 120))
    np.testing.assert_allclose(a.A, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(a.d, 0, atol=1e-9)


def test_translation_only_corners():
    shifted = tuple((lon + 0.01, lat) for lon, lat in GEO)
    a = affine_from_corners(GeoMeta(GEO), GeoMeta(shifted), (101, 101), (101, 101))
    np.testing.assert_allclose(a.A, np.eye(2), atol=1e-12)
    # 0.01 deg of a 1-deg, 100-px span = 1 px in columns
    np.testing.assert_allclose(a.d, [0.0, 1.0], atol=1e-9)


def test_generic_corners_vs_normal_equations(rng):
    ref = GeoMeta(((10.0, 50.0), (10.9, 50.1), (10.1, 49.2), (11.0, 49.3)))
    tm = GeoMeta(((10.2, 49.9), (10.8, 49.95), (10.25, 49.4), (10.85, 49.5)))
    got = affine_from_corners(ref, tm, (200, 180), (120, 150))
    # oracle: explicit normal equations on the 8 scalar constraints per step
    def ls(src, dst):
        rows, rhs = [], []
        for (a, b), (p, q) in zip(src, dst):
            rows += [[a, b, 1, 0, 0, 0], [0, 0, 0, a, b, 1]]
            rhs += [p, q]
        m, y = np.array(rows), np.array(rhs)
        sol = np.linalg.solve(m.T @ m, m.T @ y)
        return sol.reshape(2, 3)
    px = lambda r, c: np.array([[0, 0], [0, c - 1], [r - 1, 0], [r - 1, c - 1]], float)
    g = ls(np.array(ref.corners), px(200, 180))
    target = np.array(tm.corners) @ g[:, :2].T + g[:, 2]
    h = ls(px(120, 150), target)
    np.testing.assert_allclose(got.A, h[:, :2], rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(got.d, h[:, 2], rtol=1e-9, atol=1e-7)


def test_rst_identity_and_pure():
    r = rst_from_affine(np.eye(2))
    assert (r.scale, r.alpha) == pytest.approx((1.0, 0.0))
    a = np.radians(30)
    r = rst_from_affine(2 * np.array([[np.cos(a), np.sin(a)], [-np.sin(a), np.cos(a)]]))
    assert r.scale == pytest.approx(2.0)
    assert r.alpha == pytest.approx(a)


def test_rst_shear_vs_jacobi():
    A = np.array([[1.0, 0.3], [0.0, 1.0]])
    r = rst_from_affine(A)
    rot = _jacobi_svd_rotation(A)
    assert r.scale == pytest.approx(1.0)
    assert r.alpha == pytest.approx(np.arctan2(rot[0, 1], rot[0, 0]), abs=1e-12)


def test_rst_rejects_reflection():
    with pytest.raises(ValueError):
        rst_from_affine(np.diag([1.0, -1.0]))


@given(st.floats(0.1, 10), st.floats(-np.pi + 1e-6, np.pi))
def test_rst_left_inverse(scale, alpha):
    r = rst_from_affine(RstParams(scale, alpha).matrix())
    assert r.scale == pytest.approx(scale, rel=1e-9)
    assert np.angle(np.exp(1j * (r.alpha - alpha))) == pytest.approx(0.0, abs=1e-9)


def test_rst_alpha_range():
    assert RstParams(1.0, -np.pi).alpha == pytest.approx(np.pi)
    assert RstParams(1.0, 3 * np.pi / 2).alpha == pytest.approx(-np.pi / 2)
    with pytest.raises(ValueError):
        RstParams(0.0, 0.0)


def test_affine_rejects_reflection():
    with pytest.raises(ValueError):
        AffineTransform(np.diag([1.0, -1.0]), [0, 0])


def test_poly_eval_examples(rng):
    aff = AffineTransform([[1.1, 0.2], [-0.1, 0.9]], [3.0, -2.0])
    t = PolynomialTransform.from_affine(aff)
    x = rng.normal(size=(10, 2))
    np.testing.assert_allclose(poly_eval(t, x), aff(x))
    z = PolynomialTransform(2, np.zeros(6), np.zeros(6))
    assert np.all(z(x) == 0)
    sq = PolynomialTransform(2, [0, 0, 0, 1, 0, 0], np.zeros(6))
    assert sq(np.array([3.0, 5.0]))[0] == 9.0


def test_poly_affine_restriction_property(rng):
    aff = AffineTransform([[0.98, 0.02], [-0.03, 1.01]], [5.0, -4.0])
    t = PolynomialTransform.from_affine(aff, 3)
    x = rng.uniform(-500, 500, (1000, 2))
    np.testing.assert_allclose(t(x), aff(x), rtol=1e-12, atol=1e-9)


def test_local_affine_examples():
    aff = AffineTransform([[1.1, 0.2], [-0.1, 0.9]], [3.0, -2.0])
    t = PolynomialTransform.from_affine(aff)
    for x0 in [(0, 0), (10, -4)]:
        la = local_affine(t, x0)
        np.testing.assert_allclose(la.A, aff.A)
        np.testing.assert_allclose(la.d, aff.d, atol=1e-12)
    sq = PolynomialTransform(2, [0, 0, 0, 1, 0, 0], np.zeros(6))
    assert local_affine(sq, (3, 5)).A[0, 0] == pytest.approx(6.0)


@pytest.mark.parametrize("seed", range(5))
def test_jacobian_vs_finite_differences(seed):
    rng = np.random.default_rng(seed)
    t = PolynomialTransform(3, rng.normal(size=10), rng.normal(size=10))
    x0 = rng.uniform(-2, 2, 2)
    jac = local_affine(t, x0).A
    h = 1e-4
    fd = np.column_stack([(t(x0 + e) - t(x0 - e)) / (2 * h) for e in (np.array([h, 0]), np.array([0, h]))])
    np.testing.assert_allclose(jac, fd, rtol=1e-6, atol=1e-6 * np.abs(fd).max())


def test_basis_jacobian_vs_finite_differences(rng):
    x = rng.uniform(-3, 3, (5, 2))
    jac = basis_jacobian(x, 3)
    h = 1e-5
    for c, e in enumerate((np.array([h, 0]), np.array([0, h]))):
        fd = (basis(x + e, 3) - basis(x - e, 3)) / (2 * h)
        np.testing.assert_allclose(jac[..., c], fd, rtol=1e-6, atol=1e-8)


@given(st.integers(1, 3), st.floats(-100, 100), st.floats(-100, 100), st.floats(0.5, 500))
def test_rebase_matrix_property(degree, i0, j0, scale):
    x = np.array([[1.5, -2.0], [40.0, 7.0], [i0, j0]])
    m = rebase_matrix(degree, (i0, j0), scale)
    lhs = basis((x - [i0, j0]) / scale, degree)
    np.testing.assert_allclose(lhs, basis(x, degree) @ m.T, rtol=1e-7, atol=1e-7)


def test_linearity_errors():
    rst = RstParams(1.0, 0.1)
    assert linearity_errors(rst.matrix(), rst) == pytest.approx((0.0, 0.0), abs=1e-15)
    d1, d10 = linearity_errors(np.eye(2) + np.diag([0.01, 0.005]), RstParams(1.0, 0.0))
    assert d1 == pytest.approx(0.01)
    assert d10 == pytest.approx(0.1)


def test_linearity_vs_power_iteration(rng):
    m = rng.normal(size=(2, 2)) * 0.01
    rst = RstParams(1.2, 0.3)
    d1, _ = linearity_errors(rst.matrix() + m, rst)
    v = np.array([1.0, 0.3])
    for _ in range(500):
        v = m @ m.T @ v
        v /= np.linalg.norm(v)
    lam = v @ m @ m.T @ v
    assert d1 == pytest.approx(np.sqrt(lam), rel=1e-9)


def test_initial_search_radius():
    assert initial_search_radius(0, 0, 1) == 0.0
    assert initial_search_radius(2, 1.5, 2) == pytest.approx(3 * np.sqrt(13))
    assert initial_search_radius(4.0, 0, 3.3) == pytest.approx(12.0)


def test_transform_json_roundtrip(rng):
    cov = np.eye(6) * 0.01
    t = PolynomialTransform(2, rng.normal(size=6), rng.normal(size=6), cov)
    back = PolynomialTransform.from_json(json.loads(t.dumps()))
    np.testing.assert_array_equal(back.coeffs, t.coeffs)
    np.testing.assert_array_equal(back.cov, cov)


def test_transform_validation():
    with pytest.raises(ValueError):
        PolynomialTransform(1, [0, 1], [0, 0, 1])
    with pytest.raises(ValueError):
        PolynomialTransform(1, [0, np.nan, 0], [0, 0, 1])
