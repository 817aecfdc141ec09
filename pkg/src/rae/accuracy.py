"""Potential accuracy of a correspondence: fBm texture fit, joint Gaussian FIM and CRLB.

Each fragment is modeled as an fBm increment field anchored at its center pixel plus
signal-dependent noise. The reference and template textures are correlated with
coefficient ``k_RT`` and the template texture is displaced by ``d``; translation is only
observable through that cross block.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from .noise import NoiseModel

__all__ = [
    "TextureParams",
    "ThetaPC",
    "AccuracyConfig",
    "AccuracyEstimate",
    "FragmentPair",
    "TextureError",
    "DegenerateModel",
    "UnboundedCRLB",
    "estimate_texture",
    "joint_covariance",
    "gaussian_fim",
    "fim",
    "fim_dense",
    "crlb_sigma",
    "validate",
    "assess_pc",
]

LAGS = (
    ((0, 1), (1, 0)),
    ((1, 1), (1, -1)),
    ((0, 2), (2, 0)),
    ((1, 2), (2, 1), (-1, 2), (2, -1)),
    ((0, 3), (3, 0)),
    ((0, 4), (4, 0)),
)
H_RANGE = (0.05, 0.95)
K_CLAMP = 0.99
MIN_PIXELS = 100


class TextureError(ValueError):
    """Texture parameters cannot be estimated (constant or noise-dominated fragment)."""


class DegenerateModel(ValueError):
    """Joint covariance is not positive definite even after jitter."""


class UnboundedCRLB(ValueError):
    """The Fisher information is singular: translation is not observable."""


@dataclass(frozen=True)
class TextureParams:
    sigma_ri: float
    sigma_ti: float
    k_rt: float
    H: float

    def __post_init__(self):
        if not (self.sigma_ri > 0 and self.sigma_ti > 0):
            raise ValueError("texture SDs must be > 0")
        if not -1 < self.k_rt < 1:
            raise ValueError("k_RT must lie in (-1, 1)")
        if not 0 < self.H < 1:
            raise ValueError("H must lie in (0, 1)")


@dataclass(frozen=True)
class ThetaPC:
    texture: TextureParams
    d: tuple[float, float] = (0.0, 0.0)

    def vector(self) -> np.ndarray:
        t = self.texture
        return np.array([t.sigma_ri, t.sigma_ti, t.k_rt, t.H, self.d[0], self.d[1]])

    @classmethod
    def from_vector(cls, v) -> ThetaPC:
        v = np.asarray(v, dtype=np.float64)
        return cls(TextureParams(float(v[0]), float(v[1]), float(v[2]), float(v[3])), (float(v[4]), float(v[5])))

    def aligned(self) -> ThetaPC:
        """Same texture at zero local misalignment (where the bound is evaluated)."""
        return replace(self, d=(0.0, 0.0))


@dataclass(frozen=True)
class AccuracyConfig:
    sigma_lb_max: float = 0.35
    e_est: float = 0.1
    fd_step: float = 1e-3
    jitter: float = 1e-8
    cond_max: float = 1e12

    def __post_init__(self):
        if not 0 < self.e_est <= 1:
            raise ValueError("e_est must lie in (0, 1]")
        if not self.sigma_lb_max > 0:
            raise ValueError("sigma_lb_max must be > 0")


@dataclass(frozen=True)
class AccuracyEstimate:
    sigma_lb: float
    sigma_pc: float
    validated: bool


@dataclass
class FragmentPair:
    """Two aligned fragments on the reference grid with their noise models.

    ``offsets`` are (row, col) positions relative to the fragment center of the valid pixels;
    ``ref`` / ``tmpl`` hold the raw intensities used for the signal-dependent noise.
    """

    offsets: np.ndarray
    ref: np.ndarray
    tmpl: np.ndarray
    noise_ref: NoiseModel
    noise_tmpl: NoiseModel
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_windows(cls, ref_win, tmpl_win, mask, noise_ref: NoiseModel, noise_tmpl: NoiseModel) -> FragmentPair:
        ref_win = np.asarray(ref_win, dtype=np.float64)
        n = ref_win.shape[0]
        h = n // 2
        u = np.arange(-h, h + 1, dtype=np.float64)
        grid = np.stack(np.meshgrid(u, u, indexing="ij"), axis=-1)
        m = np.ones(ref_win.shape, bool) if mask is None else np.asarray(mask, dtype=bool)
        return cls(grid[m], ref_win[m], np.asarray(tmpl_win, dtype=np.float64)[m], noise_ref, noise_tmpl)

    @property
    def n(self) -> int:
        return len(self.offsets)

    def distances(self) -> np.ndarray:
        if "dist" not in self._cache:
            diff = self.offsets[:, None, :] - self.offsets[None, :, :]
            self._cache["diff"] = diff
            self._cache["dist"] = np.sqrt((diff**2).sum(-1))
            self._cache["norm"] = np.hypot(self.offsets[:, 0], self.offsets[:, 1])
        return self._cache["dist"]

    def noise_blocks(self) -> tuple[np.ndarray, np.ndarray]:
        if "noise" not in self._cache:
            dist = self.distances()
            blocks = []
            for model, inten in ((self.noise_ref, self.ref), (self.noise_tmpl, self.tmpl)):
                sd = model.sd(inten)
                blocks.append(sd[:, None] * sd[None, :] * model.correlation(dist))
            self._cache["noise"] = tuple(blocks)
        return self._cache["noise"]


# ---------------------------------------------------------------------------
# texture estimation


def _pair_diffs(z, valid, di, dj):
    rows, cols = z.shape
    i0, i1 = max(0, -di), rows - max(0, di)
    j0, j1 = max(0, -dj), cols - max(0, dj)
    a = (slice(i0, i1), slice(j0, j1))
    b = (slice(i0 + di, i1 + di), slice(j0 + dj, j1 + dj))
    ok = valid[a] & valid[b]
    return a, b, ok


def _structure_function(z, valid, noise: NoiseModel) -> tuple[np.ndarray, np.ndarray]:
    """Noise-corrected mean squared increment at each lag class of ``LAGS``."""
    sd = noise.sd(z)
    radii, values = [], []
    for group in LAGS:
        r = float(np.hypot(*group[0]))
        rho = float(noise.correlation(r))
        acc, cnt = 0.0, 0
        for di, dj in group:
            a, b, ok = _pair_diffs(z, valid, di, dj)
            if not ok.any():
                continue
            sq = (z[a] - z[b]) ** 2
            nv = sd[a] ** 2 + sd[b] ** 2 - 2 * rho * sd[a] * sd[b]
            acc += float((sq - nv)[ok].sum())
            cnt += int(ok.sum())
        if cnt:
            radii.append(r)
            values.append(acc / cnt)
    return np.array(radii), np.array(values)


def _fit_fbm(z, valid, noise: NoiseModel) -> tuple[float, float]:
    r, s = _structure_function(z, valid, noise)
    good = s > 0
    if good.sum() < 2:
        raise TextureError("structure function not above the noise floor")
    slope, intercept = np.polyfit(np.log(r[good]), np.log(s[good]), 1)
    H = float(np.clip(slope / 2, *H_RANGE))
    return float(np.sqrt(np.exp(intercept))), H


def estimate_texture(frag_ref, frag_tmpl, noise_ref: NoiseModel, noise_tmpl: NoiseModel, mask=None,
                     raw=None, gains=None) -> TextureParams:
    """Fit (sigma_RI, sigma_TI, k_RT, H) on two aligned fragments.

    ``raw`` optionally gives ``(ref, ref_valid, tmpl, tmpl_valid)`` windows that were not
    interpolated; roughness (sigma, H) is then fitted on them because resampling smooths
    the texture, while k_RT always comes from the aligned pair. H is the mean of the two
    per-image slope estimates. ``gains`` are per-pixel noise-variance factors of the aligned
    fragments (interpolation attenuates noise) used when debiasing k_RT. Masked pixels
    (mask False) are ignored.
    """
    r = np.asarray(frag_ref, dtype=np.float64)
    t = np.asarray(frag_tmpl, dtype=np.float64)
    if r.shape != t.shape:
        raise ValueError("fragments must have the same shape")
    valid = np.ones(r.shape, bool) if mask is None else np.asarray(mask, dtype=bool)
    if valid.sum() < MIN_PIXELS:
        raise TextureError(f"only {int(valid.sum())} valid pixels (< {MIN_PIXELS})")
    if raw is None:
        sig_r, h_r = _fit_fbm(r, valid, noise_ref)
        sig_t, h_t = _fit_fbm(t, valid, noise_tmpl)
    else:
        rr, rv_ok, tt, tv_ok = (np.asarray(a) for a in raw)
        sig_r, h_r = _fit_fbm(rr.astype(np.float64), rv_ok.astype(bool), noise_ref)
        sig_t, h_t = _fit_fbm(tt.astype(np.float64), tv_ok.astype(bool), noise_tmpl)

    g_r, g_t = (1.0, 1.0) if gains is None else (np.asarray(g)[valid] for g in gains)
    rv, tv = r[valid], t[valid]
    rc, tc = rv - rv.mean(), tv - tv.mean()
    var_r = rc @ rc / rc.size - float(np.mean(g_r * noise_ref.variance(rv)))
    var_t = tc @ tc / tc.size - float(np.mean(g_t * noise_tmpl.variance(tv)))
    if var_r <= 0 or var_t <= 0:
        raise TextureError("fragment variance does not exceed the noise variance")
    k = float(np.clip((rc @ tc / rc.size) / np.sqrt(var_r * var_t), -K_CLAMP, K_CLAMP))
    return TextureParams(sig_r, sig_t, k, 0.5 * (h_r + h_t))


# ---------------------------------------------------------------------------
# covariance model


def _pow(x, H):
    return np.power(x, 2 * H)


def _increment_cov(pair: FragmentPair, H: float) -> np.ndarray:
    """Unit-sigma fBm increment covariance anchored at the center: V(p, q)."""
    dist = pair.distances()
    a = _pow(pair._cache["norm"], H)
    return 0.5 * (a[:, None] + a[None, :] - _pow(dist, H))


def _cross_cov(pair: FragmentPair, H: float, d) -> np.ndarray:
    """Unit-sigma covariance between R(p) and T(q) when the template texture is displaced by ``d``."""
    d = np.asarray(d, dtype=np.float64)
    p = pair.offsets
    pair.distances()
    a = _pow(np.hypot(*(p - d).T), H)
    b = _pow(np.hypot(*(p + d).T), H)
    c = _pow(np.sqrt(((pair._cache["diff"] - d) ** 2).sum(-1)), H)
    return 0.5 * (a[:, None] + b[None, :] - c - _pow(np.hypot(*d), H))


def joint_covariance(theta: ThetaPC, pair: FragmentPair) -> np.ndarray:
    """Full (2n x 2n) covariance of the stacked (reference, template) fragment samples."""
    t = theta.texture
    v = _increment_cov(pair, t.H)
    nr, nt = pair.noise_blocks()
    x = t.k_rt * t.sigma_ri * t.sigma_ti * _cross_cov(pair, t.H, theta.d)
    return np.block([[t.sigma_ri**2 * v + nr, x], [x.T, t.sigma_ti**2 * v + nt]])


def _precision(c: np.ndarray, jitter: float) -> np.ndarray:
    dim = c.shape[0]
    c = c + np.eye(dim) * (jitter * np.trace(c) / dim)
    try:
        factor = linalg.cho_factor(c, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise DegenerateModel("degenerate model: covariance not positive definite") from exc
    return linalg.cho_solve(factor, np.eye(dim), check_finite=False)


def gaussian_fim(c: np.ndarray, dcs, jitter: float = 0.0) -> np.ndarray:
    """Zero-mean Gaussian FIM: I_ij = tr(C^-1 dC_i C^-1 dC_j) / 2."""
    p = _precision(np.asarray(c, dtype=np.float64), jitter)
    a = [p @ np.asarray(dc, dtype=np.float64) for dc in dcs]
    m = len(a)
    out = np.empty((m, m))
    for i in range(m):
        for j in range(i, m):
            out[i, j] = out[j, i] = 0.5 * np.sum(a[i] * a[j].T)
    return out


def fim_dense(theta: ThetaPC, pair: FragmentPair, config: AccuracyConfig = AccuracyConfig(), cov_fn=None):
    """Reference FIM: central differences of the full covariance in every parameter."""
    cov_fn = cov_fn or (lambda th: joint_covariance(th, pair))
    v = theta.vector()
    h = config.fd_step
    steps = np.array([h * v[0], h * v[1], h, h, h, h])
    dcs = []
    for i, s in enumerate(steps):
        e = np.zeros(6)
        e[i] = s
        dcs.append((cov_fn(ThetaPC.from_vector(v + e)) - cov_fn(ThetaPC.from_vector(v - e))) / (2 * s))
    return gaussian_fim(cov_fn(theta), dcs, config.jitter)


def fim(theta: ThetaPC, pair: FragmentPair, config: AccuracyConfig = AccuracyConfig()) -> np.ndarray:
    """6x6 FIM at zero local misalignment using the block structure of the derivatives.

    Parameter order: (sigma_RI, sigma_TI, k_RT, H, d1, d2).
    """
    t = theta.texture
    sr, st, k, H = t.sigma_ri, t.sigma_ti, t.k_rt, t.H
    h = config.fd_step
    v = _increment_cov(pair, H)
    nr, nt = pair.noise_blocks()
    c = np.block([[sr**2 * v + nr, k * sr * st * v], [k * sr * st * v, st**2 * v + nt]])
    p = _precision(c, config.jitter)
    n = pair.n
    pb = ((p[:n, :n], p[:n, n:]), (p[n:, :n], p[n:, n:]))

    fh = (_increment_cov(pair, H + h) - _increment_cov(pair, H - h)) / (2 * h)
    g = [
        (_cross_cov(pair, H, e * h) - _cross_cov(pair, H, -e * h)) / (2 * h)
        for e in (np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    ]
    x = k * sr * st
    # each derivative as {(row_block, col_block): (coef, name)}
    mats = {"v": v, "fh": fh, "g0": g[0], "g0t": g[0].T, "g1": g[1], "g1t": g[1].T}
    derivs = [
        {(0, 0): (2 * sr, "v"), (0, 1): (k * st, "v"), (1, 0): (k * st, "v")},
        {(1, 1): (2 * st, "v"), (0, 1): (k * sr, "v"), (1, 0): (k * sr, "v")},
        {(0, 1): (sr * st, "v"), (1, 0): (sr * st, "v")},
        {(0, 0): (sr**2, "fh"), (1, 1): (st**2, "fh"), (0, 1): (x, "fh"), (1, 0): (x, "fh")},
        {(0, 1): (x, "g0"), (1, 0): (x, "g0t")},
        {(0, 1): (x, "g1"), (1, 0): (x, "g1t")},
    ]
    cache = {}

    def prod(a, r, name):
        key = (a, r, name)
        if key not in cache:
            cache[key] = pb[a][r] @ mats[name]
        return cache[key]

    blocks = []
    for d in derivs:
        # (P dC)[a, col] = sum_r P[a, r] dC[r, col]
        out = [[None, None], [None, None]]
        for a in (0, 1):
            for col in (0, 1):
                acc = None
                for r in (0, 1):
                    if (r, col) in d:
                        coef, name = d[(r, col)]
                        term = coef * prod(a, r, name)
                        acc = term if acc is None else acc + term
                out[a][col] = acc
        blocks.append(out)

    m = len(blocks)
    info = np.zeros((m, m))
    for i in range(m):
        for j in range(i, m):
            s = 0.0
            # tr(A_i A_j) = sum_{a,b} sum(A_i[a,b] * A_j[b,a].T)
            for a in (0, 1):
                for b in (0, 1):
                    ai, aj = blocks[i][a][b], blocks[j][b][a]
                    if ai is not None and aj is not None:
                        s += np.sum(ai * aj.T)
            info[i, j] = info[j, i] = 0.5 * s
    return info


def crlb_sigma(info: np.ndarray, cond_max: float = 1e12) -> float:
    """sqrt of the mean CRLB variance of the two translation components."""
    info = np.asarray(info, dtype=np.float64)
    if not np.all(np.isfinite(info)) or np.linalg.cond(info) > cond_max:
        raise UnboundedCRLB("unbounded CRLB: singular Fisher information")
    cov = np.linalg.inv(info)
    var = 0.5 * (cov[4, 4] + cov[5, 5])
    if not var > 0:
        raise UnboundedCRLB("unbounded CRLB: non-positive translation variance")
    return float(np.sqrt(var))


def validate(sigma_lb: float, config: AccuracyConfig = AccuracyConfig()) -> AccuracyEstimate:
    if not sigma_lb > 0:
        raise ValueError("sigma_lb must be > 0")
    ok = bool(sigma_lb < config.sigma_lb_max)
    return AccuracyEstimate(float(sigma_lb), float(sigma_lb / np.sqrt(config.e_est)), ok)


def assess_pc(ref_win, ref_mask, tmpl_frag, tmpl_mask, noise_ref: NoiseModel, noise_tmpl: NoiseModel,
              config: AccuracyConfig = AccuracyConfig(), d_pc=(0.0, 0.0),
              raw=None, gains=None) -> tuple[ThetaPC | None, AccuracyEstimate]:
    """Texture fit, FIM and threshold test for one fragment pair.

    Failures (ill-posed texture, degenerate model, singular FIM) give sigma_lb = inf and a
    rejected estimate rather than an exception.
    """
    mask = np.asarray(ref_mask, bool) & np.asarray(tmpl_mask, bool)
    reject = AccuracyEstimate(float("inf"), float("inf"), False)
    try:
        texture = estimate_texture(ref_win, tmpl_frag, noise_ref, noise_tmpl, mask, raw, gains)
    except TextureError:
        return None, reject
    theta = ThetaPC(texture, (float(d_pc[0]), float(d_pc[1])))
    pair = FragmentPair.from_windows(ref_win, tmpl_frag, mask, noise_ref, noise_tmpl)
    try:
        sigma = crlb_sigma(fim(theta.aligned(), pair, config), config.cond_max)
    except (DegenerateModel, UnboundedCRLB):
        return theta, reject
    return theta, validate(sigma, config)

