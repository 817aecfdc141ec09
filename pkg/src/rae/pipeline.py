"""Registration loop: asynchronous PC search, CRLB validation, scheduled refits, zone shrinking."""

from __future__ import annotations

import heapq
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .accuracy import AccuracyConfig, assess_pc
from .geometry import (
    PolynomialTransform,
    affine_from_corners,
    initial_search_radius,
    rst_from_affine,
)
from .matcher import (
    INLIER,
    OUTLIER,
    REJECTED,
    VALIDATED,
    NCC_THRESHOLD,
    SearchZone,
    UndefinedCorrelation,
    fragment_noise_gains,
    pc_fragments,
    raw_windows,
    refine_subpixel,
    search_pcs,
)
from .noise import NoiseModel
from .raster import DomainError, GeoMeta, Raster, TilingConfig, tile
from .solver import (
    BasisCounter,
    GlobalEstimate,
    MStepFailure,
    NoValidStarts,
    Observations,
    RankError,
    SolverConfig,
    detect_inliers,
    em_run,
    final_fit,
    multistart,
)
from .synth import probe_grid

__all__ = [
    "PipelineConfig",
    "PipelineResult",
    "RegistrationFailed",
    "Schedule",
    "shrink_zone",
    "schedule_next",
    "run",
    "calibration_sample",
]

log = logging.getLogger(__name__)

ZONE_FLOOR = 2.0


class RegistrationFailed(RuntimeError):
    """No valid global transform could be initialized."""


def shrink_zone(sigma_reg, d_max0: float):
    """d_max = min(6 sigma_reg + 2, d_max0); the +2 floor covers the NCC lobe width."""
    out = np.minimum(6.0 * np.maximum(np.asarray(sigma_reg, dtype=np.float64), 0.0) + ZONE_FLOOR, d_max0)
    return float(out) if np.ndim(out) == 0 else out


def schedule_next(n: int, q: float = 2.0) -> int:
    if not q > 1:
        raise ValueError("schedule growth q must be > 1")
    return max(int(round(q * n)), n + 1)


@dataclass
class Schedule:
    q: float = 2.0
    n: int = 1
    t: int = 1

    def __post_init__(self):
        if not self.q > 1:
            raise ValueError("schedule growth q must be > 1")

    def advance(self) -> int:
        self.n = schedule_next(self.n, self.q)
        self.t += 1
        return self.n


@dataclass(frozen=True)
class PipelineConfig:
    degree: int = 1
    tiling: TilingConfig = field(default_factory=TilingConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    accuracy: AccuracyConfig = field(default_factory=AccuracyConfig)
    q: float = 2.0
    seed: int = 0
    # fixed op counts instead of wall time; 8 searches cost about one CRLB evaluation
    deterministic: bool = False
    searches_per_crlb: int = 8
    threads: int = 1
    d_max0: float | None = None
    ncc_threshold: float = NCC_THRESHOLD
    max_pcs_per_cf: int | None = None

    def __post_init__(self):
        if self.degree != self.solver.degree:
            object.__setattr__(self, "solver", replace(self.solver, degree=self.degree))
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.searches_per_crlb < 1:
            raise ValueError("searches_per_crlb must be >= 1")


@dataclass
class PipelineResult:
    estimate: GlobalEstimate | None
    pcs: list
    report: dict
    trace: list
    d_max: np.ndarray
    success: bool

    @property
    def transform(self) -> PolynomialTransform | None:
        return None if self.estimate is None else self.estimate.transform


class _Registration:
    def __init__(self, reference: Raster, template: Raster, metas, noise: dict, config: PipelineConfig):
        self.ref, self.tmpl, self.cfg = reference, template, config
        meta_ref, meta_tmpl = metas
        affine = affine_from_corners(meta_ref, meta_tmpl, reference.shape, template.shape)
        self.init = PolynomialTransform.from_affine(affine, config.degree)
        self.rst = rst_from_affine(affine.A)
        if config.d_max0 is not None:
            self.d_max0 = float(config.d_max0)
        else:
            self.d_max0 = initial_search_radius(meta_ref.geopos_sd, meta_tmpl.geopos_sd, self.rst.scale)
        if not self.d_max0 > 0:
            raise ValueError("initial search radius is zero: metadata lacks geopositioning SDs")
        self.noise_ref = noise.get("reference", NoiseModel())
        self.noise_tmpl_px = noise.get("template", NoiseModel())
        # template noise seen on the reference grid: correlation width stretched by the scale
        self.noise_tmpl = self.noise_tmpl_px.scaled(1.0, self.rst.scale)
        self.cfs = tile(template.shape, config.tiling)
        self.centers = np.array([cf.center for cf in self.cfs], dtype=np.float64)
        n = len(self.cfs)
        self.d_max = np.full(n, self.d_max0)
        self.zone_centers = self.init(self.centers)
        self.sigma_reg_cf = np.full(n, self.d_max0 / 3)
        root = np.random.SeedSequence(config.seed)
        order_rng, self.ms_rng = (np.random.default_rng(s) for s in root.spawn(2))
        self.unsearched = list(order_rng.permutation(n))
        self.heap: list = []
        self.active: dict = {}
        self.vpcs: dict = {}
        self.all_pcs: list = []
        self.cache: dict = {}
        self.estimate: GlobalEstimate | None = None
        self.counter = BasisCounter()
        self.processed = 0
        self.n_validated = 0
        self.trace: list = []
        self.solver_report: dict = {}
        self.crlb_time = None
        self.n_crlb = 0
        self.n_searched = 0
        self.pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
        tr = template.shape
        self.probes = probe_grid(tr, 32)
        self.corners = np.array([[0, 0], [0, tr[1] - 1], [tr[0] - 1, 0], [tr[0] - 1, tr[1] - 1]], dtype=np.float64)

    # -- PC list ---------------------------------------------------------------

    def _push(self, pc):
        self.active[pc.key] = pc
        heapq.heappush(self.heap, (-abs(pc.k_rt), pc.k, pc.p))

    def _pop(self):
        while self.heap:
            _, k, p = heapq.heappop(self.heap)
            pc = self.active.pop((k, p), None)
            if pc is not None:
                return pc
        return None

    def _peek(self, n: int):
        # the heap mirrors ``active`` exactly (both shrink together)
        return [self.active[(k, p)] for _, k, p in heapq.nsmallest(n, self.heap)]

    def search_one(self) -> bool:
        if not self.unsearched:
            return False
        k = int(self.unsearched.pop(0))
        cf = self.cfs[k]
        zone = SearchZone(self.zone_centers[k], self.d_max[k])
        try:
            found = search_pcs(cf, zone, self.ref, self.tmpl, self.rst, self.cfg.tiling.n_ri,
                               self.cfg.ncc_threshold, refine=False)
        except (DomainError, UndefinedCorrelation):
            found = []
        if self.cfg.max_pcs_per_cf is not None:
            found = found[: self.cfg.max_pcs_per_cf]
        for pc in found:
            self.all_pcs.append(pc)
            self._push(pc)
        self.n_searched += 1
        return True

    # -- CRLB ------------------------------------------------------------------

    def _assess(self, pc):
        """Refine and compute the CRLB of a PC; pure in its inputs so results can be cached."""
        work = replace(pc)
        try:
            refine_subpixel(work, self.ref, self.tmpl, self.rst, self.cfg.tiling.n_ri)
            win, wmask, frag, fmask = pc_fragments(work, self.ref, self.tmpl, self.rst, self.cfg.tiling.n_ri)
        except (UndefinedCorrelation, DomainError):
            return work.y, work.k_rt, work.refinement_clipped, None, None
        raw = raw_windows(work, self.ref, self.tmpl, self.rst, self.cfg.tiling.n_ri)
        gains = fragment_noise_gains(work, self.rst, self.cfg.tiling.n_ri, self.noise_ref.sc, self.noise_tmpl_px.sc)
        theta, est = assess_pc(win, wmask, frag, fmask, self.noise_ref, self.noise_tmpl, self.cfg.accuracy,
                               raw=raw, gains=gains)
        return work.y, work.k_rt, work.refinement_clipped, theta, est

    def _prefetch(self, first):
        if self.pool is None:
            return
        todo = [pc for pc in [first, *self._peek(self.cfg.threads - 1)] if pc.key not in self.cache]
        for pc, res in zip(todo, self.pool.map(self._assess, todo)):
            self.cache[pc.key] = res

    def process_one(self):
        """Pop the highest-|k_RT| PC and validate it; returns True if it became a vPC."""
        pc = self._pop()
        if pc is None:
            return None
        self._prefetch(pc)
        t0 = time.perf_counter()
        res = self.cache.pop(pc.key, None) or self._assess(pc)
        dt = time.perf_counter() - t0
        self.crlb_time = dt if self.crlb_time is None else 0.9 * self.crlb_time + 0.1 * dt
        self.processed += 1
        self.n_crlb += 1
        y, k_rt, clipped, theta, est = res
        pc.y, pc.k_rt, pc.refinement_clipped, pc.texture = np.asarray(y), k_rt, clipped, theta
        k = pc.k
        if est is None or not est.validated or np.hypot(*(pc.y - self.zone_centers[k])) > self.d_max[k]:
            if est is not None:
                pc.sigma_lb, pc.sigma_pc = est.sigma_lb, est.sigma_pc
            pc.advance(REJECTED)
            return False
        pc.sigma_lb, pc.sigma_pc = est.sigma_lb, est.sigma_pc
        pc.advance(VALIDATED)
        self.vpcs[pc.key] = pc
        self.n_validated += 1
        return True

    # -- refit -----------------------------------------------------------------

    def refit(self) -> bool:
        pcs = sorted(self.vpcs.values(), key=lambda pc: pc.key)
        cfg = self.cfg.solver
        if len({pc.k for pc in pcs}) < cfg.n_c + 2:
            return False
        obs = Observations.from_pcs(pcs, lambda k: self.d_max[k])
        try:
            if self.estimate is None:
                state, used = multistart(obs, self.init, self.d_max0, self.corners, cfg, self.ms_rng, self.counter)
            else:
                state, used = em_run(obs, self.estimate.transform, cfg, self.counter), 0
            flags = detect_inliers(state.posterior, obs.group, cfg.P_th)
            if self.estimate is None and flags.sum() < cfg.n_c + 2:
                return False
            w = state.posterior[flags] / obs.sigma[flags] ** 2
            tr = np.array(self.tmpl.shape, dtype=np.float64)
            est = final_fit(obs.x[flags], obs.y[flags], w, cfg.degree, (tr - 1) / 2, float(tr.max()),
                            [obs.keys[i] for i in np.flatnonzero(flags)], cfg.cond_max)
        except (MStepFailure, NoValidStarts, RankError) as exc:
            log.debug("refit skipped: %s", exc)
            return False
        for i, pc in enumerate(pcs):
            pc.posterior = float(state.posterior[i])
            pc.advance(INLIER if flags[i] else OUTLIER)
        self.estimate = est
        self.solver_report = {
            "P_CF": float(state.P_CF),
            "n_inliers": int(flags.sum()),
            "Q": float(state.Q),
            "n_starts_used": int(used) if used else self.solver_report.get("n_starts_used", 0),
            "seed": self.cfg.seed,
            "converged": bool(state.converged),
            "em_iters": int(state.n_iter),
        }
        self._shrink()
        return True

    def _shrink(self):
        est = self.estimate
        self.sigma_reg_cf = est.sigma_reg(self.centers)
        new = np.minimum(shrink_zone(self.sigma_reg_cf, self.d_max0), self.d_max)
        assert np.all(new <= self.d_max + 1e-12)
        self.d_max = new
        self.zone_centers = est.transform(self.centers)
        keep = lambda pc: np.hypot(*(pc.y - self.zone_centers[pc.k])) <= self.d_max[pc.k]
        for key in [key for key, pc in self.active.items() if not keep(pc)]:
            self.active.pop(key).advance(REJECTED)
        self.heap = [(-abs(pc.k_rt), pc.k, pc.p) for pc in self.active.values()]
        heapq.heapify(self.heap)
        self.cache = {key: v for key, v in self.cache.items() if key in self.active}
        for key in [key for key, pc in self.vpcs.items() if not keep(pc)]:
            pc = self.vpcs.pop(key)
            if pc.state != OUTLIER:
                pc.advance(OUTLIER)

    def sigma_bar(self) -> float:
        if self.estimate is None:
            return self.d_max0 / 3
        return float(np.sqrt(np.mean(self.estimate.sigma_reg(self.probes) ** 2)))

    def record(self, t: int, fitted: bool):
        row = {
            "t": t,
            "processed": self.processed,
            "validated": self.n_validated,
            "sigma_bar": self.sigma_bar(),
            "P_CF": self.solver_report.get("P_CF", float("nan")),
            "n_inliers": self.solver_report.get("n_inliers", 0),
            "fitted": fitted,
        }
        self.trace.append(row)
        log.info("iter=%d processed=%d validated=%d sigma_bar=%.6g P_CF=%.4g", t, row["processed"], row["validated"],
                 row["sigma_bar"], row["P_CF"])

    # -- main loop -------------------------------------------------------------

    def _populate(self):
        if self.cfg.deterministic or self.crlb_time is None:
            for _ in range(self.cfg.searches_per_crlb):
                if not self.search_one():
                    break
            return
        t0 = time.perf_counter()
        while self.unsearched and time.perf_counter() - t0 < self.crlb_time:
            self.search_one()

    def run(self):
        sched = Schedule(self.cfg.q)
        new = 0
        while True:
            self._populate()
            if not self.heap and not self.unsearched:
                break
            ok = self.process_one()
            if ok is None:
                continue
            new += int(ok)
            if new >= sched.n:
                fitted = self.refit()
                self.record(sched.t, fitted)
                sched.advance()
                new = 0
        if new or self.estimate is None:
            fitted = self.refit()
            self.record(sched.t, fitted)
        if self.pool is not None:
            self.pool.shutdown()


def run(reference: Raster, template: Raster, metas: tuple[GeoMeta, GeoMeta], noise: dict | None = None,
        config: PipelineConfig = PipelineConfig()) -> PipelineResult:
    """Register ``template`` onto ``reference``; raises RegistrationFailed if no fit is found."""
    t0 = time.perf_counter()
    reg = _Registration(reference, template, metas, noise or {}, config)
    reg.run()
    report = {
        "success": reg.estimate is not None,
        "seed": config.seed,
        "d_max0": reg.d_max0,
        "n_cf": len(reg.cfs),
        "processed_pcs": reg.processed,
        "validated_pcs": reg.n_validated,
        "searched_cfs": reg.n_searched,
        "basis_evaluations": reg.counter.rows,
        "runtime_s": time.perf_counter() - t0,
        **reg.solver_report,
    }
    result = PipelineResult(reg.estimate, reg.all_pcs, report, reg.trace, reg.d_max, reg.estimate is not None)
    if reg.estimate is None:
        report["reason"] = "registration failed: no valid multistart seed"
        raise RegistrationFailed(report["reason"], result)
    return result


def calibration_sample(reference: Raster, template: Raster, metas, noise: dict | None, truth_warp,
                       config: PipelineConfig = PipelineConfig(), radius: float = ZONE_FLOOR) -> dict:
    """Top PC of every CF searched in a small zone around its true match, then CRLB-assessed.

    Emulates a converged registration (zone at its floor radius) so that true errors can be
    compared against sigma_PC.LB. Returns arrays ``sigma_lb``, ``validated`` and ``error``
    (RI position minus truth, shape (n, 2)) over the CFs that produced an assessable PC.
    """
    reg = _Registration(reference, template, metas, noise or {}, replace(config, threads=1, d_max0=radius))
    lb, ok, err = [], [], []
    for cf in reg.cfs:
        center = truth_warp(np.asarray(cf.center, dtype=np.float64)[None])[0]
        try:
            found = search_pcs(cf, SearchZone(center, radius), reg.ref, reg.tmpl, reg.rst, config.tiling.n_ri,
                               config.ncc_threshold, refine=False)
        except (DomainError, UndefinedCorrelation):
            continue
        if not found:
            continue
        y, _, _, _, est = reg._assess(found[0])
        if est is None:
            continue
        lb.append(est.sigma_lb)
        ok.append(est.validated)
        err.append(np.asarray(y) - center)
    return {"sigma_lb": np.array(lb), "validated": np.array(ok, dtype=bool), "error": np.array(err).reshape(-1, 2)}
