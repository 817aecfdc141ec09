"""Putative-correspondence search: NCC on a half-pixel lattice, extrema, subpixel refinement."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import correlate

from .geometry import RstParams
from .raster import (
    ControlFragment,
    Raster,
    extract_projected_fragment,
    fragment_offsets,
    interpolation_noise_gain,
    sample_grid,
)

__all__ = [
    "UndefinedCorrelation",
    "SearchZone",
    "PutativeCorrespondence",
    "ncc",
    "search_pcs",
    "refine_subpixel",
    "pc_fragments",
    "raw_windows",
    "fragment_noise_gains",
    "template_fragment",
    "reference_fragment",
    "ncc_lattice",
    "write_correspondences",
    "CSV_HEADER",
]

MIN_OVERLAP = 25
NCC_THRESHOLD = 0.25
LATTICE_STEP = 0.5
# sample offset shared by every fragment so all lattice points see equal interpolation
QUARTER = np.array([0.25, 0.25])

CANDIDATE, VALIDATED, REJECTED, INLIER, OUTLIER = "candidate", "crlb_validated", "rejected", "inlier", "outlier"
_ALLOWED = {
    CANDIDATE: {VALIDATED, REJECTED},
    VALIDATED: {INLIER, OUTLIER},
    INLIER: {INLIER, OUTLIER},
    OUTLIER: {INLIER, OUTLIER},
    REJECTED: set(),
}


class UndefinedCorrelation(ValueError):
    """NCC is undefined: constant fragment or too few overlapping pixels."""


@dataclass(frozen=True)
class SearchZone:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(2))
        if not self.radius > 0:
            raise ValueError("search zone radius must be > 0")

    @property
    def area(self) -> float:
        return float(np.pi * self.radius**2)

    def contains(self, y, slack: float = 0.0) -> bool:
        return bool(np.hypot(*(np.asarray(y) - self.center)) <= self.radius + slack)


@dataclass
class PutativeCorrespondence:
    k: int
    p: int
    x: np.ndarray
    y: np.ndarray
    k_rt: float
    state: str = CANDIDATE
    sigma_lb: float | None = None
    sigma_pc: float | None = None
    posterior: float | None = None
    lattice_y: np.ndarray | None = None
    refinement_clipped: bool = False
    texture: object = field(default=None, repr=False)

    @property
    def key(self) -> tuple[int, int]:
        return (self.k, self.p)

    def advance(self, state: str) -> None:
        if state not in _ALLOWED[self.state]:
            raise ValueError(f"illegal PC state transition {self.state} -> {state}")
        self.state = state


def ncc(frag_a, frag_b, mask=None, min_pixels: int = MIN_OVERLAP) -> float:
    """Pearson correlation of two fragments over the unmasked pixels (mask True = use)."""
    a = np.asarray(frag_a, dtype=np.float64)
    b = np.asarray(frag_b, dtype=np.float64)
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        a, b = a[m], b[m]
    a = a.ravel()
    b = b.ravel()
    if a.size < min_pixels:
        raise UndefinedCorrelation(f"only {a.size} overlapping pixels (< {min_pixels})")
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.dot(a, a), np.dot(b, b)
    if na <= 0 or nb <= 0:
        raise UndefinedCorrelation("undefined correlation: constant fragment")
    return float(np.clip(np.dot(a, b) / np.sqrt(na * nb), -1.0, 1.0))


def _window_ncc(region: np.ndarray, region_ok: np.ndarray, frag: np.ndarray, fmask: np.ndarray,
                min_pixels: int) -> np.ndarray:
    """Masked NCC of ``frag`` against every n x n window of ``region`` (FFT window sums).

    Windows touching an invalid region sample give NaN.
    """
    n = frag.shape[0]
    count = int(fmask.sum())
    out_shape = (region.shape[0] - n + 1, region.shape[1] - n + 1)
    if count < min_pixels or out_shape[0] < 1 or out_shape[1] < 1:
        return np.full((max(out_shape[0], 0), max(out_shape[1], 0)), np.nan)
    region = np.where(region_ok, region - region[region_ok].mean() if region_ok.any() else 0.0, 0.0)
    m = fmask.astype(np.float64)
    t = np.where(fmask, frag - frag[fmask].mean(), 0.0)
    tnorm = float(np.dot(t.ravel(), t.ravel()))
    s1 = correlate(region, m, mode="valid", method="fft")
    s2 = correlate(region * region, m, mode="valid", method="fft")
    st = correlate(region, t, mode="valid", method="fft")
    var = s2 - s1 * s1 / count
    with np.errstate(invalid="ignore", divide="ignore"):
        val = st / np.sqrt(var * tnorm)
    val[~(var > 1e-9 * np.maximum(s2, 1.0))] = np.nan
    if tnorm <= 0:
        val[:] = np.nan
    if not region_ok.all():
        bad = correlate((~region_ok).astype(np.float64), m, mode="valid", method="fft")
        val[bad > 0.5] = np.nan
    return np.clip(val, -1.0, 1.0)


def template_fragment(cf_center, tmpl: Raster, rst: RstParams, n_ri: int = 17):
    """Template fragment projected onto the reference grid, sampled at the fixed quarter offset."""
    return extract_projected_fragment(tmpl, cf_center, rst.alpha, rst.scale, n_ri, QUARTER)


def reference_fragment(y, ref: Raster, n_ri: int = 17):
    """Reference samples at ``y - QUARTER + u`` for the window offsets ``u``."""
    h = n_ri // 2
    u = np.arange(-h, h + 1, dtype=np.float64)
    origin = np.asarray(y, dtype=np.float64) - QUARTER
    return sample_grid(ref, origin[0] + u, origin[1] + u)


def ncc_lattice(cf: ControlFragment, zone: SearchZone, ref: Raster, tmpl: Raster, rst: RstParams, n_ri: int = 17,
                min_pixels: int = MIN_OVERLAP, frag=None):
    """NCC on the half-pixel lattice covering the zone plus a one-step margin.

    One template fragment is used for every lattice point; the reference is resampled per
    parity class at the quarter offset, so all classes see the same interpolation smoothing.
    Returns ``(points (A, B, 2), values (A, B))`` with NaN where undefined.
    """
    frag, fmask = template_fragment(cf.center, tmpl, rst, n_ri) if frag is None else frag
    margin = zone.radius + 1.5 * LATTICE_STEP
    lo = np.ceil((zone.center - margin) / LATTICE_STEP).astype(int)
    hi = np.floor((zone.center + margin) / LATTICE_STEP).astype(int)
    values = np.full(hi - lo + 1, np.nan)
    h = n_ri // 2
    for pi in (0, 1):
        for pj in (0, 1):
            # half-index a = 2 * base + parity
            ai0 = lo[0] + ((pi - lo[0]) % 2)
            aj0 = lo[1] + ((pj - lo[1]) % 2)
            if ai0 > hi[0] or aj0 > hi[1]:
                continue
            bi0, bj0 = (ai0 - pi) // 2, (aj0 - pj) // 2
            bi1, bj1 = (hi[0] - pi) // 2, (hi[1] - pj) // 2
            off = np.array([0.5 * pi, 0.5 * pj]) - QUARTER
            gi = np.arange(bi0 - h, bi1 + h + 1) + off[0]
            gj = np.arange(bj0 - h, bj1 + h + 1) + off[1]
            region, ok = sample_grid(ref, gi, gj)
            if not ok.any():
                continue
            vals = _window_ncc(region, ok, frag, fmask, min_pixels)
            values[ai0 - lo[0] :: 2, aj0 - lo[1] :: 2][: vals.shape[0], : vals.shape[1]] = vals
    ai = np.arange(lo[0], hi[0] + 1) * LATTICE_STEP
    aj = np.arange(lo[1], hi[1] + 1) * LATTICE_STEP
    points = np.stack(np.meshgrid(ai, aj, indexing="ij"), axis=-1)
    return points, values


def _local_extrema(points, values, zone: SearchZone, threshold: float) -> list[tuple[int, int]]:
    mag = np.abs(values)
    mag = np.where(np.isfinite(mag), mag, -np.inf)
    padded = np.pad(mag, 1, constant_values=-np.inf)
    a, b = mag.shape
    neigh = np.stack(
        [padded[1 + di : 1 + di + a, 1 + dj : 1 + dj + b] for di in (-1, 0, 1) for dj in (-1, 0, 1) if di or dj]
    )
    nbmax = neigh.max(axis=0)
    dist = np.hypot(*(points - zone.center).transpose(2, 0, 1))
    ok = (mag > threshold) & (dist <= zone.radius) & (mag >= nbmax)
    found = []
    for i, j in zip(*np.nonzero(ok)):
        if mag[i, j] == nbmax[i, j]:
            # plateau: keep the tied point closest to the zone center, then first in row-major order
            key = (dist[i, j], i, j)
            tied = [
                (dist[i + di, j + dj], i + di, j + dj)
                for di in (-1, 0, 1)
                for dj in (-1, 0, 1)
                if (di or dj) and 0 <= i + di < a and 0 <= j + dj < b and mag[i + di, j + dj] == mag[i, j]
            ]
            if any(t < key for t in tied):
                continue
        found.append((int(i), int(j)))
    return found


def pc_fragments(pc: PutativeCorrespondence, ref: Raster, tmpl: Raster, rst: RstParams, n_ri: int = 17):
    """Aligned ``(ref_fragment, ref_valid, tmpl_fragment, tmpl_valid)`` of a correspondence."""
    win, wmask = reference_fragment(pc.y, ref, n_ri)
    frag, fmask = template_fragment(pc.x, tmpl, rst, n_ri)
    return win, wmask, frag, fmask


def fragment_noise_gains(pc: PutativeCorrespondence, rst: RstParams, n_ri: int = 17, sc_ref: float = 0.0,
                         sc_tmpl: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel noise-variance factors of the two aligned fragments of ``pc_fragments``."""
    u = fragment_offsets(n_ri)
    ref_pts = np.asarray(pc.y, dtype=np.float64) - QUARTER + u
    a_inv = np.linalg.inv(rst.matrix())
    tmpl_pts = np.asarray(pc.x, dtype=np.float64) + (u - QUARTER) @ a_inv.T
    return interpolation_noise_gain(ref_pts, sc_ref), interpolation_noise_gain(tmpl_pts, sc_tmpl)


def raw_windows(pc: PutativeCorrespondence, ref: Raster, tmpl: Raster, rst: RstParams, n_ri: int = 17):
    """Un-interpolated reference window at round(y) and the template projected without offset.

    Texture roughness is estimated on these, since resampling smooths the signal. Returns
    ``None`` when the reference window leaves the image.
    """
    h = n_ri // 2
    b = np.rint(pc.y).astype(int)
    rows, cols = ref.shape
    if b[0] - h < 0 or b[1] - h < 0 or b[0] + h >= rows or b[1] + h >= cols:
        return None
    sl = (slice(b[0] - h, b[0] + h + 1), slice(b[1] - h, b[1] + h + 1))
    frag, fmask = extract_projected_fragment(tmpl, pc.x, rst.alpha, rst.scale, n_ri)
    return ref.intensities[sl], ~ref.nodata_mask[sl], frag, fmask


def refine_subpixel(pc: PutativeCorrespondence, ref: Raster, tmpl: Raster, rst: RstParams, n_ri: int = 17,
                    start_step: float = 0.25, min_step: float = 0.01, box: float = 1.0,
                    frag=None) -> PutativeCorrespondence:
    """Pattern search maximizing |NCC| around the lattice position; updates ``pc`` in place."""
    y0 = np.asarray(pc.y if pc.lattice_y is None else pc.lattice_y, dtype=np.float64)
    frag, fmask = template_fragment(pc.x, tmpl, rst, n_ri) if frag is None else frag

    def score(y):
        win, wmask = reference_fragment(y, ref, n_ri)
        return ncc(win, frag, wmask & fmask)

    k0 = score(y0)
    best_y, best_k = y0.copy(), k0
    step = start_step
    moves = np.array([[1, 0], [-1, 0], [0, 1], [0, -1]], dtype=np.float64)
    while step >= min_step:
        improved = False
        for mv in moves:
            cand = best_y + step * mv
            try:
                kc = score(cand)
            except UndefinedCorrelation:
                continue
            if abs(kc) > abs(best_k):
                if np.max(np.abs(cand - y0)) > box + 1e-12:
                    # the optimum lies outside the box: keep the lattice estimate
                    pc.y, pc.k_rt, pc.lattice_y, pc.refinement_clipped = y0.copy(), k0, y0, True
                    return pc
                best_y, best_k, improved = cand, kc, True
        if not improved:
            step /= 2
    pc.lattice_y = y0
    pc.y = best_y
    pc.k_rt = best_k
    return pc


def search_pcs(cf: ControlFragment, zone: SearchZone, ref: Raster, tmpl: Raster, rst: RstParams, n_ri: int = 17,
               threshold: float = NCC_THRESHOLD, refine: bool = True,
               min_pixels: int = MIN_OVERLAP) -> list[PutativeCorrespondence]:
    """Putative correspondences of one control fragment, sorted by |k_RT| descending."""
    frag = template_fragment(cf.center, tmpl, rst, n_ri)
    points, values = ncc_lattice(cf, zone, ref, tmpl, rst, n_ri, min_pixels, frag)
    pcs = []
    for i, j in _local_extrema(points, values, zone, threshold):
        y = points[i, j].copy()
        pc = PutativeCorrespondence(cf.index, 0, np.asarray(cf.center, dtype=np.float64), y, float(values[i, j]),
                                    lattice_y=y.copy())
        if refine:
            try:
                refine_subpixel(pc, ref, tmpl, rst, n_ri, frag=frag)
            except UndefinedCorrelation:
                continue
        pcs.append(pc)
    pcs.sort(key=lambda pc: (-abs(pc.k_rt), np.hypot(*(pc.y - zone.center))))
    for p, pc in enumerate(pcs):
        pc.p = p
    return pcs


CSV_HEADER = ["k", "p", "i_TI", "j_TI", "i_RI", "j_RI", "k_RT", "sigma_lb", "sigma_pc", "posterior", "state"]


def _fmt(v):
    if v is None:
        return ""
    return repr(float(v))


def write_correspondences(path: str | Path, pcs) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for pc in sorted(pcs, key=lambda pc: pc.key):
            w.writerow([pc.k, pc.p, _fmt(pc.x[0]), _fmt(pc.x[1]), _fmt(pc.y[0]), _fmt(pc.y[1]), _fmt(pc.k_rt),
                        _fmt(pc.sigma_lb), _fmt(pc.sigma_pc), _fmt(pc.posterior), pc.state])
