"""Raster containers, file formats, bicubic interpolation and control-fragment tiling."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Raster",
    "GeoMeta",
    "ControlFragment",
    "TilingConfig",
    "RasterFormatError",
    "MissingMetadataError",
    "DomainError",
    "load_raster",
    "read_f32",
    "write_f32",
    "read_pgm",
    "write_pgm",
    "read_meta",
    "write_meta",
    "meta_path",
    "interpolate",
    "sample",
    "sample_grid",
    "interpolation_noise_gain",
    "extract_projected_fragment",
    "tile",
]

CATMULL_ROM_A = -0.5


class RasterFormatError(ValueError):
    """Malformed raster header or payload."""


class MissingMetadataError(FileNotFoundError):
    """The ``.meta.json`` sidecar of a raster is absent."""


class DomainError(ValueError):
    """A sample point lies outside the interpolation domain."""


@dataclass(frozen=True)
class Raster:
    """2-D intensity grid. ``nodata_mask`` is True where samples are missing."""

    intensities: np.ndarray
    nodata_mask: np.ndarray | None = None

    def __post_init__(self):
        data = np.array(self.intensities, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"raster must be a non-empty 2-D array, got shape {data.shape}")
        if self.nodata_mask is None:
            mask = np.zeros(data.shape, dtype=bool)
        else:
            mask = np.array(self.nodata_mask, dtype=bool)
            if mask.shape != data.shape:
                raise ValueError("nodata_mask shape differs from intensities")
        if not np.all(np.isfinite(data[~mask])):
            raise ValueError("non-finite intensities outside the nodata mask")
        data[mask] = 0.0
        data.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "intensities", data)
        object.__setattr__(self, "nodata_mask", mask)

    @property
    def rows(self) -> int:
        return self.intensities.shape[0]

    @property
    def cols(self) -> int:
        return self.intensities.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.intensities.shape


@dataclass(frozen=True)
class GeoMeta:
    """Corner geolocation (UL, UR, LL, LR as ``(lon, lat)`` degrees) and geopositioning SD in pixels."""

    corners: tuple[tuple[float, float], ...]
    geopos_sd: float = 0.0
    nodata: float | None = None

    def __post_init__(self):
        corners = tuple((float(lon), float(lat)) for lon, lat in self.corners)
        if len(corners) != 4:
            raise ValueError("GeoMeta needs exactly four corners (UL, UR, LL, LR)")
        if len(set(corners)) != 4:
            raise ValueError("GeoMeta corners must be distinct")
        ul, ur, ll, lr = (np.array(c) for c in corners)
        # shoelace over the ring UL -> UR -> LR -> LL
        ring = np.array([ul, ur, lr, ll])
        area = 0.5 * abs(np.sum(ring[:, 0] * np.roll(ring[:, 1], -1) - np.roll(ring[:, 0], -1) * ring[:, 1]))
        span = np.ptp(ring, axis=0).max()
        if area <= 1e-12 * span**2:
            raise ValueError("GeoMeta corners form a degenerate quadrilateral")
        if not self.geopos_sd >= 0:
            raise ValueError("geopos_sd must be >= 0")
        object.__setattr__(self, "corners", corners)

    def to_json(self) -> dict:
        out = {"corners": [list(c) for c in self.corners], "geopos_sd_px": self.geopos_sd}
        if self.nodata is not None:
            out["nodata"] = self.nodata
        return out

    @classmethod
    def from_json(cls, obj: dict) -> GeoMeta:
        try:
            return cls(tuple(tuple(c) for c in obj["corners"]), float(obj["geopos_sd_px"]), obj.get("nodata"))
        except (KeyError, TypeError) as exc:
            raise RasterFormatError(f"malformed metadata: {exc}") from exc


@dataclass(frozen=True)
class ControlFragment:
    index: int
    center: tuple[float, float]
    size: int


@dataclass(frozen=True)
class TilingConfig:
    n_ti: int = 17
    n_ri: int = 17

    def __post_init__(self):
        for name in ("n_ti", "n_ri"):
            v = getattr(self, name)
            if v < 9 or v % 2 == 0:
                raise ValueError(f"{name} must be odd and >= 9, got {v}")


# ---------------------------------------------------------------------------
# file formats


def meta_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def read_meta(path: str | Path) -> GeoMeta:
    mpath = meta_path(path)
    if not mpath.exists():
        raise MissingMetadataError(f"missing metadata sidecar {mpath}")
    try:
        obj = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise RasterFormatError(f"malformed metadata {mpath}: {exc}") from exc
    return GeoMeta.from_json(obj)


def write_meta(path: str | Path, meta: GeoMeta) -> Path:
    mpath = meta_path(path)
    mpath.write_text(json.dumps(meta.to_json(), indent=2))
    return mpath


def read_f32(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise RasterFormatError("F32 header line missing")
    parts = raw[:nl].split()
    if len(parts) != 3 or parts[0] != b"F32":
        raise RasterFormatError(f"malformed F32 header {raw[:nl]!r}")
    try:
        rows, cols = int(parts[1]), int(parts[2])
    except ValueError as exc:
        raise RasterFormatError(f"malformed F32 header {raw[:nl]!r}") from exc
    if rows < 1 or cols < 1:
        raise RasterFormatError("F32 dimensions must be positive")
    payload = raw[nl + 1 :]
    need = rows * cols * 4
    if len(payload) < need:
        raise RasterFormatError(f"payload short: {len(payload)} of {need} bytes")
    if len(payload) > need:
        raise RasterFormatError(f"dimension mismatch: {len(payload) - need} trailing bytes")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)


def write_f32(path: str | Path, data: np.ndarray) -> None:
    data = np.asarray(data)
    rows, cols = data.shape
    with open(path, "wb") as fh:
        fh.write(f"F32 {rows} {cols}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def _pgm_tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise RasterFormatError("truncated PGM header")
        tokens.append(raw[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte ends the header


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (magic, w, h, maxval), start = _pgm_tokens(raw, 4)
    if magic != b"P5":
        raise RasterFormatError(f"not a binary PGM (magic {magic!r})")
    try:
        cols, rows, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise RasterFormatError("malformed PGM header") from exc
    if rows < 1 or cols < 1 or not 0 < maxval < 65536:
        raise RasterFormatError("PGM dimensions or maxval out of range")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    payload = raw[start:]
    need = rows * cols * dtype.itemsize
    if len(payload) < need:
        raise RasterFormatError(f"payload short: {len(payload)} of {need} bytes")
    if len(payload) > need:
        raise RasterFormatError(f"dimension mismatch: {len(payload) - need} trailing bytes")
    return np.frombuffer(payload, dtype=dtype).reshape(rows, cols).astype(np.float64)


def write_pgm(path: str | Path, data: np.ndarray, maxval: int | None = None) -> None:
    data = np.asarray(data)
    if maxval is None:
        maxval = 255 if data.max(initial=0) < 256 else 65535
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    rows, cols = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n{maxval}\n".encode("ascii"))
        fh.write(np.clip(np.rint(data), 0, maxval).astype(dtype).tobytes())


def load_raster(path: str | Path, fmt: str | None = None, require_meta: bool = True) -> tuple[Raster, GeoMeta | None]:
    """Read a PGM or F32 raster plus its ``.meta.json`` sidecar.

    ``fmt`` is ``"pgm"`` or ``"f32"``; when omitted it is sniffed from the magic bytes.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"raster {path} not found")
    if fmt is None:
        head = path.read_bytes()[:3]
        fmt = "f32" if head == b"F32" else "pgm" if head[:2] == b"P5" else None
        if fmt is None:
            raise RasterFormatError(f"unrecognized raster format for {path}")
    fmt = fmt.lower()
    if fmt == "f32":
        data = read_f32(path)
    elif fmt == "pgm":
        data = read_pgm(path)
    else:
        raise RasterFormatError(f"unknown raster format {fmt!r}")

    meta = None
    if require_meta or meta_path(path).exists():
        meta = read_meta(path)
    mask = None
    if meta is not None and meta.nodata is not None:
        mask = data == meta.nodata
    mask = np.isnan(data) if mask is None else mask | np.isnan(data)
    return Raster(np.nan_to_num(data), mask), meta


# ---------------------------------------------------------------------------
# interpolation


def _cubic_weights(t: np.ndarray) -> np.ndarray:
    """Catmull-Rom weights for taps at offsets -1, 0, 1, 2 given fractional position ``t``."""
    a = CATMULL_ROM_A
    t = t[..., None]
    d = np.abs(np.array([-1.0, 0.0, 1.0, 2.0]) - t)
    near = ((a + 2) * d - (a + 3)) * d * d + 1
    far = ((a * d - 5 * a) * d + 8 * a) * d - 4 * a
    return np.where(d <= 1, near, np.where(d < 2, far, 0.0))


def sample(raster: Raster, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bicubic values at ``points`` (..., 2) in (row, col) pixel coordinates.

    Returns ``(values, valid)``; invalid points (outside ``[0, rows-1] x [0, cols-1]``
    or touching nodata) get value 0.
    """
    pts = np.asarray(points, dtype=np.float64)
    shape = pts.shape[:-1]
    pts = pts.reshape(-1, 2)
    rows, cols = raster.shape
    inside = (pts[:, 0] >= 0) & (pts[:, 0] <= rows - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= cols - 1)
    inside &= np.isfinite(pts).all(axis=1)
    safe = np.where(inside[:, None], pts, 0.0)

    base = np.floor(safe).astype(np.int64)
    frac = safe - base
    wi = _cubic_weights(frac[:, 0])
    wj = _cubic_weights(frac[:, 1])
    offs = np.arange(-1, 3)
    ii = np.clip(base[:, :1] + offs, 0, rows - 1)
    jj = np.clip(base[:, 1:] + offs, 0, cols - 1)
    data = raster.intensities
    patch = data[ii[:, :, None], jj[:, None, :]]
    values = np.einsum("ni,nij,nj->n", wi, patch, wj)

    valid = inside
    if raster.nodata_mask.any():
        bad = raster.nodata_mask[ii[:, :, None], jj[:, None, :]].any(axis=(1, 2))
        valid = valid & ~bad
    values = np.where(valid, values, 0.0)
    return values.reshape(shape), valid.reshape(shape)


def sample_grid(raster: Raster, rows_at, cols_at) -> tuple[np.ndarray, np.ndarray]:
    """Bicubic values on the product grid ``rows_at x cols_at`` (separable, same kernel as ``sample``)."""
    ri = np.asarray(rows_at, dtype=np.float64)
    ci = np.asarray(cols_at, dtype=np.float64)
    rows, cols = raster.shape

    def axis(c, n):
        inside = (c >= 0) & (c <= n - 1) & np.isfinite(c)
        safe = np.where(inside, c, 0.0)
        base = np.floor(safe).astype(np.int64)
        return inside, _cubic_weights(safe - base), np.clip(base[:, None] + np.arange(-1, 3), 0, n - 1)

    in_r, wr, idx_r = axis(ri, rows)
    in_c, wc, idx_c = axis(ci, cols)
    data = raster.intensities
    by_row = np.einsum("ak,akc->ac", wr, data[idx_r])
    values = np.einsum("bk,abk->ab", wc, by_row[:, idx_c])
    valid = in_r[:, None] & in_c[None, :]
    if raster.nodata_mask.any():
        bad_r = raster.nodata_mask[idx_r].any(axis=1)
        valid &= ~bad_r[:, idx_c].any(axis=2)
    return np.where(valid, values, 0.0), valid


def interpolation_noise_gain(points, sc: float = 0.0) -> np.ndarray:
    """Variance factor that bicubic sampling at ``points`` applies to stationary noise.

    The noise correlation is ``exp(-r^2 / (2 sc^2))`` (white for ``sc == 0``); it is separable,
    so the factor is the product of the per-axis quadratic forms ``w^T P w``.
    """
    pts = np.asarray(points, dtype=np.float64)
    frac = pts - np.floor(pts)
    taps = np.arange(-1, 3)
    lag = taps[:, None] - taps[None, :]
    corr = (lag == 0).astype(np.float64) if sc == 0 else np.exp(-0.5 * (lag / sc) ** 2)
    w = _cubic_weights(frac)  # (..., 2, 4)
    return np.einsum("...a,ab,...b->...", w, corr, w).prod(axis=-1)


def interpolate(raster: Raster, point) -> float | np.ndarray:
    """Catmull-Rom bicubic intensity at a real-valued (row, col) point; exact on the grid."""
    pts = np.asarray(point, dtype=np.float64)
    values, valid = sample(raster, pts)
    if not np.all(valid):
        raise DomainError(f"point(s) outside the interpolation domain {raster.shape}")
    return float(values) if pts.ndim == 1 else values


def rst_matrix(alpha: float, scale: float) -> np.ndarray:
    c, s = np.cos(alpha), np.sin(alpha)
    return scale * np.array([[c, s], [-s, c]])


def fragment_offsets(n: int) -> np.ndarray:
    """(n, n, 2) integer offsets of an odd-sized window around its center pixel."""
    h = n // 2
    u = np.arange(-h, h + 1, dtype=np.float64)
    return np.stack(np.meshgrid(u, u, indexing="ij"), axis=-1)


def extract_projected_fragment(
    template: Raster,
    center,
    alpha: float,
    scale: float,
    n: int,
    shift=(0.0, 0.0),
) -> tuple[np.ndarray, np.ndarray]:
    """Resample a template window onto the reference grid under a fixed RST model.

    Reference-grid offset ``u`` (relative to the fragment center, minus ``shift``) is
    pulled from template point ``center + A^-1 (u - shift)`` with ``A = scale * R(alpha)``.
    Pixels without a template match are zero-filled and masked out.
    Returns ``(fragment, valid_mask)``.
    """
    if not np.isfinite(alpha) or not np.isfinite(scale) or scale <= 0:
        raise ValueError("RST parameters must be finite with scale > 0")
    a_inv = np.linalg.inv(rst_matrix(alpha, scale))
    u = fragment_offsets(n) - np.asarray(shift, dtype=np.float64)
    pts = np.asarray(center, dtype=np.float64) + u @ a_inv.T
    values, valid = sample(template, pts)
    if not valid.any():
        raise DomainError("projected fragment lies fully outside the template")
    return values, valid


def tile(shape_or_raster, config: TilingConfig | None = None) -> list[ControlFragment]:
    """Non-overlapping ``n_ti`` tiles, row-major; edge remainders are dropped."""
    config = config or TilingConfig()
    shape = shape_or_raster.shape if hasattr(shape_or_raster, "shape") else tuple(shape_or_raster)
    rows, cols = shape[:2]
    n = config.n_ti
    if rows < n or cols < n:
        raise ValueError(f"image {rows}x{cols} is smaller than one {n}x{n} fragment")
    half = n // 2
    out = []
    for r in range(rows // n):
        for c in range(cols // n):
            out.append(ControlFragment(len(out), (float(r * n + half), float(c * n + half)), n))
    return out
