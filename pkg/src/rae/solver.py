"""Outlier-robust global fit: EM over the leave-one-out mixture likelihood, multistart, final fit."""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PolynomialTransform, basis, n_coeffs, rebase_matrix

__all__ = [
    "SolverConfig",
    "Observations",
    "MixtureState",
    "GlobalEstimate",
    "MStepFailure",
    "NoValidStarts",
    "RankError",
    "prior_pc_prob",
    "normal_density",
    "e_step",
    "m_step_pcf",
    "m_step_loocv",
    "loocv_predictions",
    "q_value",
    "detect_inliers",
    "em_run",
    "multistart",
    "final_fit",
    "sigma_reg",
    "BasisCounter",
]


class MStepFailure(RuntimeError):
    """Not enough inlying control fragments to solve the weighted regression."""


class NoValidStarts(RuntimeError):
    """Every random triple gave an invalid seed transform."""


class RankError(ValueError):
    """The final design matrix is rank deficient."""


@dataclass(frozen=True)
class SolverConfig:
    degree: int = 1
    P_th: float = 0.9
    n_starts: int = 10
    max_em_iters: int = 100
    em_tol: float = 1e-6
    p_cf_init: float = 0.5
    cond_max: float = 1e12
    max_draws: int = 20000
    # False switches the E-step to one global fit shared by every CF (no leave-one-out)
    loocv: bool = True

    def __post_init__(self):
        if not 0 < self.P_th < 1:
            raise ValueError("P_th must lie in (0, 1)")
        if self.degree < 1:
            raise ValueError("degree must be >= 1")

    @property
    def n_c(self) -> int:
        return n_coeffs(self.degree)

    @property
    def neighbor_count(self) -> int:
        return self.n_c + 1


class BasisCounter:
    """Counts monomial-basis rows entering M-step normal equations (a work measure)."""

    def __init__(self):
        self.rows = 0

    def add(self, n: int) -> None:
        self.rows += int(n)


@dataclass
class Observations:
    """Validated correspondences as flat arrays, grouped by control fragment."""

    cf: np.ndarray
    x: np.ndarray
    y: np.ndarray
    sigma: np.ndarray
    area: np.ndarray
    keys: list = field(default_factory=list)

    def __post_init__(self):
        self.cf = np.asarray(self.cf, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.float64).reshape(-1, 2)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1, 2)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        self.area = np.broadcast_to(np.asarray(self.area, dtype=np.float64), self.cf.shape).copy()
        if np.any(self.sigma <= 0):
            raise ValueError("sigma_PC must be > 0")
        if np.any(self.area <= 0):
            raise ValueError("search zone area must be > 0")
        # dense CF ids 0..K-1, CF centers, PCs per CF
        self.cf_ids, self.group = np.unique(self.cf, return_inverse=True)
        self.n_cf = len(self.cf_ids)
        self.centers = np.zeros((self.n_cf, 2))
        self.centers[self.group] = self.x
        self.n_vpc = np.bincount(self.group, minlength=self.n_cf)
        if not self.keys:
            self.keys = list(range(len(self.cf)))

    def __len__(self) -> int:
        return len(self.cf)

    @classmethod
    def from_pcs(cls, pcs, radius_of) -> Observations:
        """``radius_of(k)`` gives the current search radius of CF ``k``."""
        pcs = list(pcs)
        return cls(
            [pc.k for pc in pcs],
            [pc.x for pc in pcs],
            [pc.y for pc in pcs],
            [pc.sigma_pc for pc in pcs],
            [math.pi * radius_of(pc.k) ** 2 for pc in pcs],
            [pc.key for pc in pcs],
        )


@dataclass
class MixtureState:
    P_CF: float
    posterior: np.ndarray
    pred: np.ndarray
    Q: float = -np.inf
    converged: bool = False
    n_iter: int = 0
    q_trace: list = field(default_factory=list)
    seed_transform: PolynomialTransform | None = None


@dataclass
class GlobalEstimate:
    transform: PolynomialTransform
    R_c: np.ndarray
    inliers: list
    origin: np.ndarray
    scale: float
    R_norm: np.ndarray

    def sigma_reg(self, points) -> np.ndarray:
        """sqrt(e(x) R_c e(x)^T), evaluated in the normalized basis for stability."""
        e = basis((np.asarray(points, dtype=np.float64) - self.origin) / self.scale, self.transform.degree)
        return np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", e, self.R_norm, e), 0.0))


# ---------------------------------------------------------------------------
# elementary steps


def prior_pc_prob(p_cf, n_vpc):
    """Per-PC inlier prior so that the CF has at least one inlier with probability P_CF."""
    p_cf = np.asarray(p_cf, dtype=np.float64)
    out = 1.0 - np.power(1.0 - p_cf, 1.0 / np.asarray(n_vpc, dtype=np.float64))
    return float(out) if np.ndim(out) == 0 else out


def normal_density(resid, sigma):
    """Isotropic bivariate normal density N(r, sigma^2 I)."""
    r2 = np.sum(np.asarray(resid, dtype=np.float64) ** 2, axis=-1)
    s2 = np.asarray(sigma, dtype=np.float64) ** 2
    return np.exp(-0.5 * r2 / s2) / (2 * np.pi * s2)


def e_step(resid, sigma, p_pc, area, p_cf) -> np.ndarray:
    """Posterior inlier probability of each PC."""
    area = np.asarray(area, dtype=np.float64)
    if np.any(area <= 0):
        raise ValueError("search zone area must be > 0")
    num = np.asarray(p_pc) * normal_density(resid, sigma)
    den = num + (1.0 - p_cf) / area
    with np.errstate(invalid="ignore", divide="ignore"):
        post = np.where(den > 0, num / den, 0.0)
    return post


_BELOW_ONE = np.nextafter(1.0, 0.0)


def m_step_pcf(posterior, group, n_cf: int | None = None) -> float:
    """Mean over CFs of the probability that at least one PC of the CF is an inlier."""
    posterior = np.asarray(posterior, dtype=np.float64)
    group = np.asarray(group)
    if posterior.size == 0:
        raise MStepFailure("no validated control fragments")
    n_cf = int(group.max()) + 1 if n_cf is None else n_cf
    log_out = np.zeros(n_cf)
    np.add.at(log_out, group, np.log1p(-np.minimum(posterior, _BELOW_ONE)))
    per_cf = 1.0 - np.exp(log_out)
    per_cf[np.bincount(group, minlength=n_cf) == 0] = np.nan
    return float(np.nanmean(per_cf))


def q_value(obs: Observations, posterior, pred, p_cf: float, literal: bool = False) -> float:
    """Complete-data log-likelihood of the mixture at parameters (pred, P_CF).

    The outlier density 1/S enters weighted by (1 - P), and the Gaussian keeps its 2 pi, so
    the value is the expectation of the joint log density whose posterior is ``e_step``.
    ``literal=True`` instead adds ln(1/S) to every PC unweighted and drops the 2 pi; that
    variant scores an all-outlier state as high as the true one, so starts cannot be ranked by it.
    """
    p = np.asarray(posterior)
    r2 = np.sum((obs.y - pred[obs.group]) ** 2, axis=1)
    s2 = obs.sigma**2
    p_pc = prior_pc_prob(p_cf, obs.n_vpc[obs.group])
    with np.errstate(divide="ignore"):
        ln_pc = np.where(p > 0, np.log(np.maximum(p_pc, 1e-300)), 0.0)
        ln_out = np.log(max(1.0 - p_cf, 1e-300))
    ln_s = np.log(obs.area)
    if literal:
        terms = -p * r2 / (2 * s2) - np.log(s2) * p + ln_pc * p + ln_out * (1 - p) - ln_s
    else:
        terms = p * (ln_pc - np.log(2 * np.pi * s2) - r2 / (2 * s2)) + (1 - p) * (ln_out - ln_s)
    return float(np.sum(terms))


def detect_inliers(posterior, group, P_th: float = 0.9) -> np.ndarray:
    """At most one PC per CF: the max-posterior PC if it exceeds ``P_th`` (ties: lowest index)."""
    posterior = np.asarray(posterior, dtype=np.float64)
    group = np.asarray(group)
    flags = np.zeros(posterior.shape, bool)
    order = np.lexsort((np.arange(len(posterior)), -posterior))
    seen = set()
    for i in order:
        g = int(group[i])
        if g in seen:
            continue
        seen.add(g)
        if posterior[i] > P_th:
            flags[i] = True
    return flags


# ---------------------------------------------------------------------------
# M-step for the transform


def _cf_sums(obs: Observations, posterior):
    """Per-CF information weight W_t = sum P/sigma^2 and weighted target sum Y_t."""
    w = np.asarray(posterior) / obs.sigma**2
    W = np.bincount(obs.group, weights=w, minlength=obs.n_cf)
    Y = np.stack([np.bincount(obs.group, weights=w * obs.y[:, c], minlength=obs.n_cf) for c in (0, 1)], axis=1)
    return W, Y


def _neighbor_sets(obs: Observations, posterior, config: SolverConfig, m: int | None = None,
                   fallback: bool = True) -> np.ndarray:
    """(K, m) indices of the CFs used to predict each CF (never the CF itself), m = n_c + 1 by default."""
    m = config.neighbor_count if m is None else int(m)
    if obs.n_cf < m + 1:
        raise MStepFailure(f"need at least {m + 1} validated CFs, have {obs.n_cf}")
    best = np.full(obs.n_cf, -np.inf)
    np.maximum.at(best, obs.group, np.asarray(posterior))
    inlying = np.flatnonzero(best > config.P_th)
    out = np.empty((obs.n_cf, m), dtype=np.int64)
    if len(inlying) >= m + 1:
        tree = cKDTree(obs.centers[inlying])
        _, idx = tree.query(obs.centers, k=m + 1)
        cand = inlying[idx]
        for k in range(obs.n_cf):
            row = cand[k][cand[k] != k]
            out[k] = row[:m]
        return out
    if not fallback:
        raise MStepFailure(f"M-step failure: {len(inlying)} inlying CFs, need {m + 1}")
    # bootstrap: too few inlying CFs, use the highest-posterior ones
    ranked = np.lexsort((np.arange(obs.n_cf), -best))
    for k in range(obs.n_cf):
        out[k] = ranked[ranked != k][:m]
    return out


def _norm_scale(obs: Observations) -> float:
    span = np.ptp(obs.centers, axis=0).max() if obs.n_cf > 1 else 1.0
    return float(max(span, 1.0))


def loocv_predictions(obs: Observations, posterior, config: SolverConfig, counter: BasisCounter | None = None):
    """Leave-one-out prediction g(x_k, c_k) for every CF.

    Returns ``(pred (K, 2), ok (K,))``; ``ok`` is False where the neighborhood system is
    degenerate (condition number above ``config.cond_max``).
    """
    W, Y = _cf_sums(obs, posterior)
    nb = _neighbor_sets(obs, posterior, config)
    scale = _norm_scale(obs)
    # basis around each CF center, so the prediction is the constant coefficient
    local = (obs.centers[nb] - obs.centers[:, None, :]) / scale  # (K, m, 2)
    E = basis(local, config.degree)  # (K, m, n_c)
    if counter is not None:
        counter.add(E.shape[0] * E.shape[1])
    Wn = W[nb]
    info = np.einsum("km,kmi,kmj->kij", Wn, E, E)
    b = np.einsum("kmi,kmc->kic", E, Y[nb])
    cond = np.linalg.cond(info)
    ok = np.isfinite(cond) & (cond < config.cond_max)
    pred = np.full((obs.n_cf, 2), np.nan)
    if ok.any():
        sol = np.linalg.solve(info[ok], b[ok])
        pred[ok] = sol[:, 0, :]
    return pred, ok


def _global_prediction(obs: Observations, posterior, config: SolverConfig, counter: BasisCounter | None = None):
    """One weighted fit over every PC, evaluated at every CF (the plain mixture variant)."""
    w = np.asarray(posterior) / obs.sigma**2
    origin = obs.centers.mean(axis=0)
    scale = _norm_scale(obs)
    E = basis((obs.x - origin) / scale, config.degree)
    if counter is not None:
        counter.add(E.shape[0])
    info = E.T @ (w[:, None] * E)
    if np.linalg.cond(info) > config.cond_max:
        return np.full((obs.n_cf, 2), np.nan), np.zeros(obs.n_cf, bool)
    coef = np.linalg.solve(info, E.T @ (w[:, None] * obs.y))
    return basis((obs.centers - origin) / scale, config.degree) @ coef, np.ones(obs.n_cf, bool)


def m_step_loocv(obs: Observations, posterior, k: int, config: SolverConfig = SolverConfig(),
                 n_neighbors: int | None = None, fallback: bool = False) -> PolynomialTransform:
    """Leave-one-out coefficients of CF ``k`` (dense CF index) in the raw monomial basis.

    Uses the ``n_neighbors`` (default n_c + 1) nearest inlying CFs other than ``k``.
    """
    nb = _neighbor_sets(obs, posterior, config, n_neighbors, fallback)[k]
    W, Y = _cf_sums(obs, posterior)
    origin = obs.centers[k]
    scale = _norm_scale(obs)
    E = basis((obs.centers[nb] - origin) / scale, config.degree)
    info = E.T @ (W[nb][:, None] * E)
    if np.linalg.cond(info) > config.cond_max:
        raise MStepFailure("degenerate neighborhood")
    coef_n = np.linalg.solve(info, E.T @ Y[nb])
    m = rebase_matrix(config.degree, origin, scale)
    return PolynomialTransform.from_coeffs(config.degree, m.T @ coef_n)


# ---------------------------------------------------------------------------
# EM


def _predict(obs, posterior, config, counter):
    if config.loocv:
        return loocv_predictions(obs, posterior, config, counter)
    return _global_prediction(obs, posterior, config, counter)


def em_run(obs: Observations, initial: PolynomialTransform | None, config: SolverConfig = SolverConfig(),
           counter: BasisCounter | None = None) -> MixtureState:
    """EM from an initial transform until the relative Q change drops below ``em_tol``.

    ``initial=None`` starts from unit posteriors instead (first M-step sees every PC).

    The iteration stops and keeps the previous state if an update would lower Q, so the
    reported Q trace is nondecreasing.
    """
    if obs.n_cf < config.n_c + 2:
        raise MStepFailure(f"need at least {config.n_c + 2} validated CFs, have {obs.n_cf}")
    p_cf = config.p_cf_init
    n_vpc = obs.n_vpc[obs.group]
    if initial is None:
        pred, _ = _predict(obs, np.ones(len(obs)), config, counter)
        if not np.all(np.isfinite(pred)):
            raise MStepFailure("degenerate configuration for the unit-posterior start")
    else:
        pred = initial(obs.centers)

    def posterior_at(pred, p_cf, prev):
        post = e_step(obs.y - pred[obs.group], obs.sigma, prior_pc_prob(p_cf, n_vpc), obs.area, p_cf)
        if prev is not None:
            bad = ~np.isfinite(pred[obs.group]).all(axis=1)
            post = np.where(bad, prev, post)
        return post

    post = posterior_at(pred, p_cf, None)
    state = MixtureState(p_cf, post, pred, seed_transform=initial)
    for it in range(1, config.max_em_iters + 1):
        new_pcf = min(m_step_pcf(post, obs.group, obs.n_cf), 1.0 - 1e-9)
        new_pred, ok = _predict(obs, post, config, counter)
        # unavailable predictions keep the previous ones
        new_pred = np.where(ok[:, None], new_pred, pred)
        q = q_value(obs, post, new_pred, new_pcf)
        if state.q_trace and q < state.q_trace[-1] - 1e-9 * abs(state.q_trace[-1]):
            state.converged = True
            break
        prev_q = state.q_trace[-1] if state.q_trace else None
        state.q_trace.append(q)
        pred, p_cf = new_pred, new_pcf
        post = posterior_at(pred, p_cf, post)
        state.P_CF, state.pred, state.posterior, state.Q, state.n_iter = p_cf, pred, post, q, it
        if prev_q is not None and abs(q - prev_q) <= config.em_tol * max(abs(prev_q), 1e-300):
            state.converged = True
            break
    if not state.converged:
        warnings.warn("EM did not converge within max_em_iters; returning best-so-far", RuntimeWarning)
    return state


def _triples(obs: Observations, rng: np.random.Generator, max_draws: int):
    """Random triples of PCs from distinct CFs, without repetition."""
    m = len(obs)
    total = math.comb(m, 3)
    if total <= max_draws:
        combos = np.array(list(itertools.combinations(range(m), 3)), dtype=np.int64).reshape(-1, 3)
        combos = combos[rng.permutation(len(combos))]
        for t in combos:
            g = obs.group[t]
            if g[0] != g[1] and g[0] != g[2] and g[1] != g[2]:
                yield tuple(int(v) for v in t)
        return
    seen = set()
    for _ in range(max_draws):
        t = tuple(sorted(rng.choice(m, 3, replace=False).tolist()))
        if t in seen:
            continue
        seen.add(t)
        g = obs.group[list(t)]
        if len(set(g.tolist())) == 3:
            yield t


def _affine_from_triple(x, y):
    design = np.column_stack([np.ones(3), x])
    det = np.linalg.det(design)
    span = max(np.ptp(x, axis=0).max(), 1.0)
    if abs(det) < 1e-6 * span**2:
        return None
    coef = np.linalg.solve(design, y)  # rows: const, i, j
    A = coef[1:].T
    if np.linalg.det(A) <= 0:
        return None
    return coef


def multistart(obs: Observations, init: PolynomialTransform, d_max0: float, corners, config: SolverConfig = SolverConfig(),
               seed=None, counter: BasisCounter | None = None) -> tuple[MixtureState, int]:
    """EM from up to ``n_starts`` valid random-triple seeds; returns (best state, starts used).

    A seed affine is valid when it stays within ``d_max0`` of ``init`` at the four image
    corners (the extremes of an affine difference over a rectangle).
    """
    if obs.n_cf < 3:
        raise NoValidStarts("need vPCs in at least 3 distinct CFs")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    corners = np.asarray(corners, dtype=np.float64)
    ref_corners = init(corners)
    best, used = None, 0
    for t in _triples(obs, rng, config.max_draws):
        coef = _affine_from_triple(obs.x[list(t)], obs.y[list(t)])
        if coef is None:
            continue
        full = np.zeros((config.n_c, 2))
        full[:3] = coef
        cand = PolynomialTransform.from_coeffs(config.degree, full)
        if np.max(np.hypot(*(cand(corners) - ref_corners).T)) > d_max0:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            state = em_run(obs, cand, config, counter)
        used += 1
        if best is None or state.Q > best.Q:
            best = state
        if used >= config.n_starts:
            break
    if best is None:
        raise NoValidStarts("no valid starts")
    return best, used


# ---------------------------------------------------------------------------
# final estimate


def final_fit(x, y, weights, degree: int, origin=None, scale: float | None = None, keys=None,
              cond_max: float = 1e12) -> GlobalEstimate:
    """Weighted LS over inliers; R_c is the inverse information matrix (raw monomial basis)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    y = np.asarray(y, dtype=np.float64).reshape(-1, 2)
    w = np.asarray(weights, dtype=np.float64)
    nc = n_coeffs(degree)
    if len(x) < nc:
        raise RankError(f"need at least {nc} inliers, have {len(x)}")
    origin = x.mean(axis=0) if origin is None else np.asarray(origin, dtype=np.float64)
    scale = float(max(np.ptp(x, axis=0).max(), 1.0)) if scale is None else float(scale)
    E = basis((x - origin) / scale, degree)
    info = E.T @ (w[:, None] * E)
    if np.linalg.matrix_rank(info) < nc or np.linalg.cond(info) > cond_max:
        raise RankError("rank-deficient design for the final fit")
    r_norm = np.linalg.inv(info)
    r_norm = 0.5 * (r_norm + r_norm.T)
    coef_n = r_norm @ (E.T @ (w[:, None] * y))
    m = rebase_matrix(degree, origin, scale)
    r_c = m.T @ r_norm @ m
    transform = PolynomialTransform.from_coeffs(degree, m.T @ coef_n, 0.5 * (r_c + r_c.T))
    return GlobalEstimate(transform, transform.cov, list(keys or []), origin, scale, r_norm)


def sigma_reg(est_or_cov, points, degree: int | None = None) -> np.ndarray:
    """Registration SD sqrt(e R_c e^T) at template points.

    Accepts a GlobalEstimate or a raw ``R_c`` matrix with its ``degree``.
    """
    if isinstance(est_or_cov, GlobalEstimate):
        return est_or_cov.sigma_reg(points)
    r_c = np.asarray(est_or_cov, dtype=np.float64)
    e = basis(points, degree)
    return np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", e, r_c, e), 0.0))
