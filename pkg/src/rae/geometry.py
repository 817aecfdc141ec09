"""Coordinate transforms: coarse affine from corners, RST decomposition, polynomial model."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from math import comb

import numpy as np

from .raster import GeoMeta

__all__ = [
    "AffineTransform",
    "RstParams",
    "PolynomialTransform",
    "SearchConfig",
    "n_coeffs",
    "monomial_exponents",
    "basis",
    "basis_jacobian",
    "rebase_matrix",
    "affine_from_corners",
    "rst_from_affine",
    "poly_eval",
    "local_affine",
    "linearity_errors",
    "initial_search_radius",
]


def n_coeffs(degree: int) -> int:
    return (degree + 2) * (degree + 1) // 2


@lru_cache(maxsize=None)
def monomial_exponents(degree: int) -> tuple[tuple[int, int], ...]:
    """(k1, k2) powers of (i, j): total degree ascending, higher power of i first."""
    if degree < 0:
        raise ValueError("degree must be >= 0")
    return tuple((d - k2, k2) for d in range(degree + 1) for k2 in range(d + 1))


def basis(points, degree: int) -> np.ndarray:
    """Monomial vectors e(x) for points (..., 2) -> (..., n_c)."""
    pts = np.asarray(points, dtype=np.float64)
    i, j = pts[..., 0:1], pts[..., 1:2]
    ex = np.array(monomial_exponents(degree))
    return i ** ex[:, 0] * j ** ex[:, 1]


def basis_jacobian(points, degree: int) -> np.ndarray:
    """d e(x)/d(i, j) for points (..., 2) -> (..., n_c, 2)."""
    pts = np.asarray(points, dtype=np.float64)
    i, j = pts[..., 0:1], pts[..., 1:2]
    ex = np.array(monomial_exponents(degree))
    k1, k2 = ex[:, 0], ex[:, 1]
    di = np.where(k1 > 0, k1 * i ** np.maximum(k1 - 1, 0) * j**k2, 0.0)
    dj = np.where(k2 > 0, k2 * i**k1 * j ** np.maximum(k2 - 1, 0), 0.0)
    return np.stack([di, dj], axis=-1)


def rebase_matrix(degree: int, origin, scale: float) -> np.ndarray:
    """M with e((x - origin) / scale) = M @ e(x).

    Coefficients fitted in the normalized basis map back as ``c = M.T @ c_norm``.
    """
    i0, j0 = (float(v) for v in origin)
    ex = monomial_exponents(degree)
    index = {e: n for n, e in enumerate(ex)}
    m = np.zeros((len(ex), len(ex)))
    for row, (a, b) in enumerate(ex):
        for r in range(a + 1):
            for t in range(b + 1):
                m[row, index[(r, t)]] += comb(a, r) * (-i0) ** (a - r) * comb(b, t) * (-j0) ** (b - t)
        m[row] /= scale ** (a + b)
    return m


@dataclass(frozen=True)
class AffineTransform:
    """y = A x + d, with det(A) > 0."""

    A: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        a = np.array(self.A, dtype=np.float64).reshape(2, 2)
        d = np.array(self.d, dtype=np.float64).reshape(2)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(d))):
            raise ValueError("affine parameters must be finite")
        if np.linalg.det(a) <= 0:
            raise ValueError("affine matrix must have positive determinant (no reflection)")
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "d", d)

    def __call__(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.A.T + self.d

    @classmethod
    def identity(cls) -> AffineTransform:
        return cls(np.eye(2), np.zeros(2))

    @classmethod
    def unchecked(cls, A, d) -> AffineTransform:
        """Build without the no-reflection check (local Jacobians may be singular)."""
        obj = object.__new__(cls)
        object.__setattr__(obj, "A", np.array(A, dtype=np.float64).reshape(2, 2))
        object.__setattr__(obj, "d", np.array(d, dtype=np.float64).reshape(2))
        return obj


@dataclass(frozen=True)
class RstParams:
    scale: float
    alpha: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("RST scale must be > 0")
        a = float(np.arctan2(np.sin(self.alpha), np.cos(self.alpha)))
        if a <= -np.pi:
            a = np.pi
        object.__setattr__(self, "alpha", a)

    def matrix(self) -> np.ndarray:
        c, s = np.cos(self.alpha), np.sin(self.alpha)
        return self.scale * np.array([[c, s], [-s, c]])


@dataclass(frozen=True)
class PolynomialTransform:
    """Pair of degree-n bivariate polynomials mapping template (i, j) to reference (i, j)."""

    degree: int
    c1: np.ndarray
    c2: np.ndarray
    cov: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        nc = n_coeffs(self.degree)
        c1 = np.array(self.c1, dtype=np.float64).reshape(-1)
        c2 = np.array(self.c2, dtype=np.float64).reshape(-1)
        if c1.size != nc or c2.size != nc:
            raise ValueError(f"degree {self.degree} needs {nc} coefficients per axis")
        if not (np.all(np.isfinite(c1)) and np.all(np.isfinite(c2))):
            raise ValueError("coefficients must be finite")
        object.__setattr__(self, "c1", c1)
        object.__setattr__(self, "c2", c2)
        if self.cov is not None:
            cov = np.array(self.cov, dtype=np.float64).reshape(nc, nc)
            object.__setattr__(self, "cov", cov)

    @property
    def n_c(self) -> int:
        return n_coeffs(self.degree)

    @property
    def coeffs(self) -> np.ndarray:
        """(n_c, 2) stacked (c1, c2)."""
        return np.stack([self.c1, self.c2], axis=1)

    def __call__(self, x) -> np.ndarray:
        return basis(x, self.degree) @ self.coeffs

    @classmethod
    def from_coeffs(cls, degree: int, coeffs: np.ndarray, cov=None) -> PolynomialTransform:
        coeffs = np.asarray(coeffs)
        return cls(degree, coeffs[:, 0], coeffs[:, 1], cov)

    @classmethod
    def from_affine(cls, affine: AffineTransform, degree: int = 1) -> PolynomialTransform:
        nc = n_coeffs(degree)
        c1, c2 = np.zeros(nc), np.zeros(nc)
        c1[:3] = affine.d[0], affine.A[0, 0], affine.A[0, 1]
        c2[:3] = affine.d[1], affine.A[1, 0], affine.A[1, 1]
        return cls(degree, c1, c2)

    def with_degree(self, degree: int) -> PolynomialTransform:
        if degree < self.degree:
            raise ValueError("cannot lower the degree")
        nc = n_coeffs(degree)
        c = np.zeros((nc, 2))
        c[: self.n_c] = self.coeffs
        return PolynomialTransform.from_coeffs(degree, c)

    def affine_part(self) -> AffineTransform:
        return AffineTransform([[self.c1[1], self.c1[2]], [self.c2[1], self.c2[2]]], [self.c1[0], self.c2[0]])

    def to_json(self) -> dict:
        out = {"degree": self.degree, "c1": self.c1.tolist(), "c2": self.c2.tolist()}
        if self.cov is not None:
            out["cov"] = self.cov.tolist()
        return out

    def dumps(self) -> str:
        # repr-precision floats: json uses the shortest round-trip form
        return json.dumps(self.to_json(), indent=2)

    @classmethod
    def from_json(cls, obj: dict) -> PolynomialTransform:
        return cls(int(obj["degree"]), obj["c1"], obj["c2"], obj.get("cov"))


@dataclass(frozen=True)
class SearchConfig:
    d_max0: float
    sigma_g_ri: float = 0.0
    sigma_g_ti: float = 0.0

    def __post_init__(self):
        if not self.d_max0 > 0:
            raise ValueError("d_max0 must be > 0")


def _corner_pixels(dims) -> np.ndarray:
    rows, cols = dims
    return np.array([[0, 0], [0, cols - 1], [rows - 1, 0], [rows - 1, cols - 1]], dtype=np.float64)


def _lstsq_affine(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    design = np.column_stack([src, np.ones(len(src))])
    sol, _, rank, _ = np.linalg.lstsq(design, dst, rcond=None)
    if rank < 3:
        raise ValueError("rank-deficient corner configuration")
    return sol[:2].T, sol[2]


def affine_from_corners(ref_meta: GeoMeta, tmpl_meta: GeoMeta, ref_dims, tmpl_dims) -> AffineTransform:
    """Coarse template->reference affine through the shared (planar) lon/lat frame.

    The reference's lon/lat->pixel map is fitted on its four corners, the template corners
    are carried into reference pixels with it, and a least-squares affine is fitted from the
    template corner pixels to those positions.
    """
    ref_geo = np.array(ref_meta.corners)
    tmpl_geo = np.array(tmpl_meta.corners)
    a_geo, d_geo = _lstsq_affine(ref_geo, _corner_pixels(ref_dims))
    target = tmpl_geo @ a_geo.T + d_geo
    a, d = _lstsq_affine(_corner_pixels(tmpl_dims), target)
    return AffineTransform(a, d)


def rst_from_affine(A) -> RstParams:
    """Nearest RST: scale sqrt(det A), rotation U V^T from A = U S V^T."""
    A = np.asarray(A, dtype=np.float64).reshape(2, 2)
    det = np.linalg.det(A)
    if not det > 0:
        raise ValueError("rst_from_affine needs det(A) > 0")
    u, _, vt = np.linalg.svd(A)
    r = u @ vt
    # R = [[cos a, sin a], [-sin a, cos a]]
    return RstParams(float(np.sqrt(det)), float(np.arctan2(r[0, 1], r[0, 0])))


def poly_eval(t: PolynomialTransform, x) -> np.ndarray:
    return t(x)


def local_affine(t: PolynomialTransform, x0) -> AffineTransform:
    """First-order Taylor expansion of ``t`` around ``x0``."""
    x0 = np.asarray(x0, dtype=np.float64)
    jac = t.coeffs.T @ basis_jacobian(x0, t.degree)  # (2, 2): rows = output axis
    return AffineTransform.unchecked(jac, t(x0) - jac @ x0)


def linearity_errors(A_linear, rst: RstParams) -> tuple[float, float]:
    """(d1, d10): largest uncompensated displacement at 1 and 10 pixels from the center."""
    m = np.asarray(A_linear, dtype=np.float64) - rst.matrix()
    d1 = float(np.sqrt(max(np.linalg.eigvalsh(m @ m.T).max(), 0.0)))
    return d1, 10.0 * d1


def initial_search_radius(sigma_g_ri: float, sigma_g_ti: float, scale_init: float) -> float:
    if sigma_g_ri < 0 or sigma_g_ti < 0 or not scale_init > 0:
        raise ValueError("geopositioning SDs must be >= 0 and scale > 0")
    return 3.0 * float(np.sqrt(sigma_g_ri**2 + sigma_g_ti**2 * scale_init**2))
