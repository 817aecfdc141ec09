"""Signal-dependent, spatially correlated Gaussian noise model."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .raster import Raster

__all__ = ["NoiseModel", "variance_at", "noise_cov", "sample_noise_field", "load_noise_config", "dump_noise_config"]


@dataclass(frozen=True)
class NoiseModel:
    """Variance ``sa2 + sp2 * I + smu2 * I**2`` with Gaussian correlation of width ``sc`` pixels.

    ``sa2`` is in intensity^2, ``sp2`` in intensity units, ``smu2`` unitless.
    """

    sa2: float = 0.0
    sp2: float = 0.0
    smu2: float = 0.0
    sc: float = 0.0

    def __post_init__(self):
        for name in ("sa2", "sp2", "smu2", "sc"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"noise parameter {name} must be finite and >= 0, got {v}")

    @property
    def is_zero(self) -> bool:
        return self.sa2 == 0 and self.sp2 == 0 and self.smu2 == 0

    def variance(self, intensity) -> np.ndarray:
        i = np.asarray(intensity, dtype=np.float64)
        return self.sa2 + self.sp2 * np.maximum(i, 0.0) + self.smu2 * i * i

    def sd(self, intensity) -> np.ndarray:
        return np.sqrt(self.variance(intensity))

    def correlation(self, distance) -> np.ndarray:
        r = np.asarray(distance, dtype=np.float64)
        if self.sc == 0:
            return (r == 0).astype(np.float64)
        return np.exp(-0.5 * (r / self.sc) ** 2)

    def covariance_matrix(self, points, intensities, points_b=None, intensities_b=None) -> np.ndarray:
        """Dense noise covariance between two pixel sets (defaults to the set with itself)."""
        pa = np.asarray(points, dtype=np.float64)
        pb = pa if points_b is None else np.asarray(points_b, dtype=np.float64)
        sa = self.sd(intensities)
        sb = sa if intensities_b is None else self.sd(intensities_b)
        r = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
        return sa[:, None] * sb[None, :] * self.correlation(r)

    def scaled(self, variance_factor: float = 1.0, pixel_scale: float = 1.0) -> NoiseModel:
        """Multiply all variance terms by ``variance_factor``; stretch the correlation width."""
        return NoiseModel(
            self.sa2 * variance_factor, self.sp2 * variance_factor, self.smu2 * variance_factor, self.sc * pixel_scale
        )

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> NoiseModel:
        return cls(**{k: float(obj.get(k, 0.0)) for k in ("sa2", "sp2", "smu2", "sc")})


def variance_at(model: NoiseModel, intensity) -> float | np.ndarray:
    out = model.variance(intensity)
    return float(out) if np.ndim(out) == 0 else out


def noise_cov(model: NoiseModel, p, q, intensity_p: float, intensity_q: float) -> float:
    r = float(np.hypot(*(np.asarray(p, dtype=np.float64) - np.asarray(q, dtype=np.float64))))
    return float(model.sd(intensity_p) * model.sd(intensity_q) * model.correlation(r))


def _unit_correlated_field(shape, sc: float, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance stationary Gaussian field with correlation exp(-r^2 / (2 sc^2))."""
    if sc == 0:
        return rng.standard_normal(shape)
    pad = int(np.ceil(5 * sc))
    big = (shape[0] + pad, shape[1] + pad)
    white = rng.standard_normal(big)
    # circular autocorrelation sampled on the torus; its DFT is the spectral density
    di = np.minimum(np.arange(big[0]), big[0] - np.arange(big[0]))
    dj = np.minimum(np.arange(big[1]), big[1] - np.arange(big[1]))
    acf = np.exp(-0.5 * (di[:, None] ** 2 + dj[None, :] ** 2) / sc**2)
    spectrum = np.clip(np.fft.rfft2(acf).real, 0.0, None)
    field = np.fft.irfft2(np.fft.rfft2(white) * np.sqrt(spectrum), s=big)
    return field[: shape[0], : shape[1]]


def sample_noise_field(model: NoiseModel, clean: Raster, seed=None) -> Raster:
    """Add one noise realization to ``clean``; deterministic for a given seed."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if model.is_zero:
        return clean
    field = _unit_correlated_field(clean.shape, model.sc, rng)
    noisy = clean.intensities + model.sd(clean.intensities) * field
    return Raster(noisy, clean.nodata_mask)


def load_noise_config(path: str | Path) -> dict[str, NoiseModel]:
    """Read ``{"reference": {...}, "template": {...}}`` noise parameters."""
    obj = json.loads(Path(path).read_text())
    try:
        return {role: NoiseModel.from_json(obj[role]) for role in ("reference", "template")}
    except KeyError as exc:
        raise ValueError(f"noise config lacks {exc.args[0]!r}") from exc


def dump_noise_config(path: str | Path, reference: NoiseModel, template: NoiseModel) -> None:
    Path(path).write_text(json.dumps({"reference": reference.to_json(), "template": template.to_json()}, indent=2))
