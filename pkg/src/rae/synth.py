"""Synthetic ground truth: fBm textures, correlated warped pairs, outlier tiles, metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PolynomialTransform, basis_jacobian
from .noise import NoiseModel, sample_noise_field
from .raster import GeoMeta, Raster, TilingConfig, sample, tile

__all__ = [
    "SynthSpec",
    "Truth",
    "gen_fbm",
    "gen_pair",
    "rst_warp",
    "evaluate",
    "probe_grid",
    "load_spec",
    "structure_slope",
]


def rst_warp(shape, translation=(0.0, 0.0), rotation_deg: float = 0.0, scale: float = 1.0,
             degree: int = 1) -> PolynomialTransform:
    """y = c + scale * R(alpha) (x - c) + t about the image center ``c``."""
    c = np.array([(shape[0] - 1) / 2, (shape[1] - 1) / 2])
    a = math.radians(rotation_deg)
    A = scale * np.array([[math.cos(a), math.sin(a)], [-math.sin(a), math.cos(a)]])
    d = c - A @ c + np.asarray(translation, dtype=np.float64)
    coeffs = np.zeros(((degree + 2) * (degree + 1) // 2, 2))
    coeffs[0], coeffs[1], coeffs[2] = d, A[:, 0], A[:, 1]
    return PolynomialTransform.from_coeffs(degree, coeffs)


@dataclass
class SynthSpec:
    size: tuple[int, int] = (256, 256)
    H: float = 0.5
    sigma_x: float = 10.0
    k_rt_target: float = 0.95
    warp: PolynomialTransform | None = None
    noise_ref: NoiseModel = field(default_factory=NoiseModel)
    noise_tmpl: NoiseModel = field(default_factory=NoiseModel)
    outlier_cf_fraction: float = 0.0
    seed: int = 0
    mean_level: float = 1000.0
    d_max0: float = 45.0
    degree: int = 1
    n_ti: int = 17

    def __post_init__(self):
        self.size = (int(self.size[0]), int(self.size[1]))
        if not 0 < self.H < 1:
            raise ValueError("H must lie in (0, 1)")
        if not self.sigma_x > 0:
            raise ValueError("sigma_x must be > 0")
        if not -1 <= self.k_rt_target <= 1:
            raise ValueError("k_rt_target must lie in [-1, 1]")
        if not 0 <= self.outlier_cf_fraction <= 1:
            raise ValueError("outlier_cf_fraction must lie in [0, 1]")
        if self.warp is None:
            self.warp = rst_warp(self.size)

    def to_json(self) -> dict:
        out = asdict(self)
        out["size"] = list(self.size)
        out["warp"] = self.warp.to_json()
        out["noise_ref"] = self.noise_ref.to_json()
        out["noise_tmpl"] = self.noise_tmpl.to_json()
        return out

    @classmethod
    def from_json(cls, obj: dict) -> SynthSpec:
        obj = dict(obj)
        size = tuple(obj.get("size", (256, 256)))
        warp = obj.get("warp")
        if isinstance(warp, dict) and "c1" in warp:
            warp = PolynomialTransform.from_json(warp)
        elif isinstance(warp, dict):
            warp = rst_warp(size, warp.get("translation", (0, 0)), warp.get("rotation_deg", 0.0),
                            warp.get("scale", 1.0))
        obj["warp"] = warp
        for key in ("noise_ref", "noise_tmpl"):
            if key in obj:
                obj[key] = NoiseModel.from_json(obj[key])
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown spec fields {sorted(unknown)}")
        return cls(**obj)


def load_spec(name_or_path: str | Path) -> SynthSpec:
    """A bundled spec name (e.g. ``mono_easy``) or a JSON file path."""
    path = Path(name_or_path)
    if not path.exists():
        bundled = Path(__file__).with_name("specs") / f"{name_or_path}.json"
        if not bundled.exists():
            raise FileNotFoundError(f"no spec file or bundled spec named {name_or_path!r}")
        path = bundled
    try:
        return SynthSpec.from_json(json.loads(path.read_text()))
    except (json.JSONDecodeError, TypeError, KeyError) as exc:
        raise ValueError(f"malformed spec {path}: {exc}") from exc


ALIAS_WRAPS = 2


def _spectral_field(shape, H: float, rng: np.random.Generator) -> np.ndarray:
    """Spectral synthesis of a sampled fBm on a doubled canvas.

    The power ``f^-(2H+2)`` is folded over ``ALIAS_WRAPS`` spectral replicas, which is the
    spectrum of a continuous field sampled on the pixel grid; truncating at Nyquist instead
    makes the field too smooth at short lags.
    """
    rows, cols = shape
    big = (2 * rows, 2 * cols)
    fi = np.fft.fftfreq(big[0])[:, None]
    fj = np.fft.rfftfreq(big[1])[None, :]
    power = np.zeros((big[0], big[1] // 2 + 1))
    for m in range(-ALIAS_WRAPS, ALIAS_WRAPS + 1):
        for n in range(-ALIAS_WRAPS, ALIAS_WRAPS + 1):
            f = np.hypot(fi + m, fj + n)
            if m == 0 and n == 0:
                f[0, 0] = np.inf
            power += f ** (-(2 * H + 2))
    amp = np.sqrt(power)
    amp[0, 0] = 0.0
    noise = rng.standard_normal(big)
    z = np.fft.irfft2(np.fft.rfft2(noise) * amp, s=big)
    return z[:rows, :cols]


def _unit_increment_sd(z: np.ndarray) -> float:
    di = np.diff(z, axis=0).ravel()
    dj = np.diff(z, axis=1).ravel()
    return float(np.sqrt(np.mean(np.concatenate([di, dj]) ** 2)))


def gen_fbm(size, H: float, sigma_x: float, seed=None) -> Raster:
    """fBm-like field by spectral synthesis with unit-lag increment SD ``sigma_x``."""
    if not 0 < H < 1:
        raise ValueError("H must lie in (0, 1)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z = _spectral_field(size, H, rng)
    return Raster(z * (sigma_x / _unit_increment_sd(z)))


def structure_slope(z: np.ndarray, max_lag: int = 8) -> float:
    """Slope of log mean squared increment vs log lag over axis lags 1..max_lag."""
    lags = np.arange(1, max_lag + 1)
    s = [np.mean(np.concatenate([(z[r:] - z[:-r]).ravel(), (z[:, r:] - z[:, :-r]).ravel()]) ** 2) for r in lags]
    return float(np.polyfit(np.log(lags), np.log(s), 1)[0])


@dataclass
class Truth:
    warp: PolynomialTransform
    labels: list[bool]
    seeds: dict
    spec: SynthSpec

    def to_json(self) -> dict:
        return {"warp": self.warp.to_json(), "labels": self.labels, "seeds": self.seeds, "spec": self.spec.to_json()}


def _check_invertible(warp: PolynomialTransform, shape) -> None:
    pts = probe_grid(shape, 16)
    jac = np.einsum("kc,nkd->ncd", warp.coeffs, basis_jacobian(pts, warp.degree))
    if np.any(np.linalg.det(jac) <= 0):
        raise ValueError("warp is not invertible over the image domain")


def gen_pair(spec: SynthSpec):
    """Reference, template, the two metas and the truth record for ``spec``.

    The reference is ``mean_level + A + noise``. Template pixel x carries
    ``mean_level + (k A + sqrt(1 - k^2) B)(warp(x)) + noise``; outlier tiles are replaced by an
    independent texture. Both metas share the same corners, so the coarse init is identity.
    """
    rows, cols = spec.size
    root = np.random.SeedSequence(spec.seed)
    s_a, s_b, s_c, s_nr, s_nt, s_out = (np.random.default_rng(s) for s in root.spawn(6))
    _check_invertible(spec.warp, spec.size)

    corners = np.array([[0, 0], [0, cols - 1], [rows - 1, 0], [rows - 1, cols - 1]], dtype=np.float64)
    reach = np.abs(spec.warp(probe_grid(spec.size, 16)) - probe_grid(spec.size, 16)).max()
    pad = int(np.ceil(reach)) + 4
    canvas = (rows + 2 * pad, cols + 2 * pad)
    a = gen_fbm(canvas, spec.H, spec.sigma_x, s_a).intensities
    b = gen_fbm(canvas, spec.H, spec.sigma_x, s_b).intensities
    k = spec.k_rt_target
    mix = Raster(k * a + math.sqrt(max(0.0, 1 - k * k)) * b)

    clean_ref = Raster(spec.mean_level + a[pad : pad + rows, pad : pad + cols])
    ii, jj = np.meshgrid(np.arange(rows, dtype=float), np.arange(cols, dtype=float), indexing="ij")
    warped = spec.warp(np.stack([ii, jj], axis=-1)) + pad
    tvals, valid = sample(mix, warped)
    if not valid.all():
        raise ValueError("warp maps template pixels outside the synthetic canvas")
    tmpl = spec.mean_level + tvals

    cfs = tile(spec.size, TilingConfig(spec.n_ti, spec.n_ti))
    n_out = math.ceil(spec.outlier_cf_fraction * len(cfs) - 1e-9)
    outliers = set(s_out.choice(len(cfs), size=n_out, replace=False).tolist()) if n_out else set()
    if outliers:
        other = gen_fbm(spec.size, spec.H, spec.sigma_x, s_c).intensities
        h = spec.n_ti // 2
        for idx in outliers:
            ci, cj = (int(v) for v in cfs[idx].center)
            tmpl[ci - h : ci + h + 1, cj - h : cj + h + 1] = spec.mean_level + other[ci - h : ci + h + 1, cj - h : cj + h + 1]

    reference = sample_noise_field(spec.noise_ref, clean_ref, s_nr)
    template = sample_noise_field(spec.noise_tmpl, Raster(tmpl), s_nt)
    sd = spec.d_max0 / (3 * math.sqrt(2))
    geo = tuple((float(c[1]) * 1e-4, -float(c[0]) * 1e-4) for c in corners)
    meta_ref = GeoMeta(geo, sd)
    meta_tmpl = GeoMeta(geo, sd)
    labels = [i not in outliers for i in range(len(cfs))]
    truth = Truth(spec.warp, labels, {"seed": spec.seed}, spec)
    return reference, template, (meta_ref, meta_tmpl), truth


def probe_grid(shape, n: int = 32) -> np.ndarray:
    """(n*n, 2) evenly spaced points spanning the image, corners included."""
    gi = np.linspace(0, shape[0] - 1, n)
    gj = np.linspace(0, shape[1] - 1, n)
    return np.stack(np.meshgrid(gi, gj, indexing="ij"), axis=-1).reshape(-1, 2)


def _pooled_sd(v: np.ndarray) -> float:
    v = np.asarray(v, dtype=np.float64).reshape(-1, 2)
    if len(v) < 2:
        return float("nan")
    return float(np.sqrt(np.mean(np.var(v, axis=0, ddof=1))))


def evaluate(estimate, truth: Truth, pcs=(), shape=None) -> dict:
    """Accuracy metrics of a fitted transform against the truth warp.

    ``estimate`` is a PolynomialTransform or an object with ``.transform`` (and optionally
    ``.sigma_reg``); ``pcs`` are the correspondences with ``state`` labels.
    """
    shape = shape or truth.spec.size
    transform = getattr(estimate, "transform", estimate)
    pts = probe_grid(shape, 32)
    err = np.hypot(*(transform(pts) - truth.warp(pts)).T)
    out = {
        "probe_max": float(err.max()),
        "probe_mean": float(err.mean()),
        "probe_rmse": float(np.sqrt(np.mean(err**2))),
        "probe_p50": float(np.percentile(err, 50)),
        "probe_p90": float(np.percentile(err, 90)),
        "probe_p99": float(np.percentile(err, 99)),
    }
    inl = [pc for pc in pcs if pc.state == "inlier"]
    out["n_inliers"] = len(inl)
    if inl:
        x = np.array([pc.x for pc in inl])
        res = np.array([pc.y for pc in inl]) - truth.warp(x)
        out["inlier_rmse"] = float(np.sqrt(np.mean(np.sum(res**2, axis=1))))
        lb = np.array([pc.sigma_lb for pc in inl])
        out["sigma_norm"] = _pooled_sd(res / lb[:, None])
        if hasattr(estimate, "sigma_reg"):
            sreg = estimate.sigma_reg(x)
            gerr = (transform(x) - truth.warp(x)) / sreg[:, None]
            out["global_norm_sd"] = _pooled_sd(gerr)
        labels = truth.labels
        out["outlier_inliers"] = int(sum(not labels[pc.k] for pc in inl))
    return out
