"""Command line: register, predict, simulate, crlb.

Exit codes: 0 success, 1 algorithmic failure, 2 input error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .accuracy import AccuracyConfig, TextureError, assess_pc
from .geometry import PolynomialTransform
from .matcher import write_correspondences
from .noise import NoiseModel, dump_noise_config, load_noise_config
from .pipeline import PipelineConfig, RegistrationFailed, run
from .raster import (
    MissingMetadataError,
    RasterFormatError,
    TilingConfig,
    load_raster,
    write_f32,
    write_meta,
)
from .solver import SolverConfig, sigma_reg
from .synth import evaluate, gen_pair, load_spec

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2
ISOLINE_LEVELS = (0.1, 0.25, 0.5, 1.0)
LB_BINS = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35)
ERR_BINS = (0.0, 0.1, 0.25, 0.5, 1.0, 2.0, np.inf)


class InputError(Exception):
    pass


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _pipeline_config(args) -> PipelineConfig:
    solver = SolverConfig(degree=args.degree, P_th=args.p_th, n_starts=args.n_starts)
    return PipelineConfig(
        degree=args.degree,
        tiling=TilingConfig(args.fragment, args.fragment),
        solver=solver,
        q=args.q,
        seed=args.seed,
        deterministic=args.deterministic,
        searches_per_crlb=args.searches_per_crlb,
        threads=args.threads,
        d_max0=args.d_max0,
    )


def sigma_reg_grid(transform: PolynomialTransform, shape, stride: int = 1, to_reference: bool = False):
    """sigma_reg sampled every ``stride`` pixels of a grid of ``shape``.

    The grid is in template pixels, or in reference pixels when ``to_reference`` is set (each
    reference pixel is pulled back through the fitted transform).
    """
    if transform.cov is None:
        raise InputError("transform JSON has no cov (R_c)")
    if stride < 1:
        raise InputError("stride must be >= 1")
    gi = np.arange(0, shape[0], stride, dtype=np.float64)
    gj = np.arange(0, shape[1], stride, dtype=np.float64)
    pts = np.stack(np.meshgrid(gi, gj, indexing="ij"), axis=-1)
    if to_reference:
        pts = _invert(transform, pts)
    return sigma_reg(transform.cov, pts, transform.degree)


def _invert(transform: PolynomialTransform, y, iters: int = 50) -> np.ndarray:
    """Template points mapping onto ``y`` (Newton steps with the affine part's Jacobian)."""
    step = np.linalg.inv(transform.affine_part().A)
    x = (y - transform.affine_part().d) @ step.T
    for _ in range(iters):
        x = x - (transform(x) - y) @ step.T
    return x


def isolines(values: np.ndarray, stride: int = 1, levels=ISOLINE_LEVELS) -> list[tuple[float, float, float]]:
    """Level crossings along each grid row as ``(level, i, j)`` with linear interpolation in j."""
    out = []
    for level in levels:
        for r, row in enumerate(values):
            a, b = row[:-1] - level, row[1:] - level
            for c in np.flatnonzero((a * b < 0) | ((a == 0) & (b != 0))):
                t = a[c] / (a[c] - b[c])
                out.append((float(level), float(r * stride), float((c + t) * stride)))
    return out


def _write_isolines(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "i_TI", "j_TI"])
        for lvl, i, j in rows:
            w.writerow([repr(lvl), repr(i), repr(j)])


def _write_trace(path: Path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "processed", "validated", "sigma_bar", "P_CF", "n_inliers", "fitted"])
        for r in trace:
            w.writerow([r["t"], r["processed"], r["validated"], repr(r["sigma_bar"]), repr(r["P_CF"]), r["n_inliers"],
                        int(r["fitted"])])


def _load_noise(path) -> dict:
    if path is None:
        return {}
    try:
        return load_noise_config(path)
    except (OSError, ValueError) as exc:
        raise InputError(f"bad noise config: {exc}") from exc


def _register(reference, template, metas, noise, args, out: Path):
    """Run the pipeline and write every register output into ``out``; returns (result or None, report)."""
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "progress.log"
    handler = logging.FileHandler(log_path, mode="w")
    handler.setFormatter(logging.Formatter("%(message)s"))
    plog = logging.getLogger("rae.pipeline")
    plog.addHandler(handler)
    plog.setLevel(logging.INFO)
    try:
        result = run(reference, template, metas, noise, _pipeline_config(args))
    except RegistrationFailed as exc:
        result = exc.args[1]
        report = dict(result.report)
        _dump(out / "report.json", report)
        write_correspondences(out / "correspondences.csv", result.pcs)
        return None, report
    finally:
        plog.removeHandler(handler)
        handler.close()
    est = result.estimate
    (out / "transform.json").write_text(est.transform.dumps() + "\n")
    write_correspondences(out / "correspondences.csv", result.pcs)
    grid_shape = reference.shape if args.to_reference else template.shape
    write_f32(out / "sigma_reg.f32", sigma_reg_grid(est.transform, grid_shape, args.stride, args.to_reference))
    _write_trace(out / "trace.csv", result.trace)
    _dump(out / "report.json", result.report)
    return result, result.report


def cmd_register(args) -> int:
    try:
        reference, meta_ref = load_raster(args.reference)
        template, meta_tmpl = load_raster(args.template)
    except MissingMetadataError as exc:
        print(f"error: missing metadata: {exc}", file=sys.stderr)
        return EXIT_INPUT
    noise = _load_noise(args.noise)
    result, report = _register(reference, template, (meta_ref, meta_tmpl), noise, args, Path(args.out))
    if result is None:
        print(f"error: {report.get('reason', 'registration failed')}", file=sys.stderr)
        return EXIT_FAIL
    print(json.dumps({k: report[k] for k in ("success", "n_inliers", "P_CF", "processed_pcs")}))
    return EXIT_OK


def cmd_predict(args) -> int:
    try:
        transform = PolynomialTransform.from_json(json.loads(Path(args.transform).read_text()))
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise InputError(f"bad transform JSON: {exc}") from exc
    values = sigma_reg_grid(transform, tuple(args.shape), args.stride)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_f32(out / "sigma_reg.f32", values)
    _write_isolines(out / "isolines.csv", isolines(values, args.stride))
    return EXIT_OK


def error_histogram(pcs, truth) -> list[list]:
    """Counts of validated PCs per (sigma_LB bin, absolute true error bin)."""
    rows = []
    vpcs = [pc for pc in pcs if pc.state in ("crlb_validated", "inlier", "outlier")]
    if not vpcs:
        return rows
    lb = np.array([pc.sigma_lb for pc in vpcs])
    err = np.hypot(*(np.array([pc.y for pc in vpcs]) - truth.warp(np.array([pc.x for pc in vpcs]))).T)
    counts, _, _ = np.histogram2d(lb, err, bins=[np.array(LB_BINS), np.array(ERR_BINS)])
    for b in range(len(LB_BINS) - 1):
        rows.append([LB_BINS[b], LB_BINS[b + 1], *counts[b].astype(int).tolist()])
    return rows


def cmd_simulate(args) -> int:
    try:
        spec = load_spec(args.spec)
        if args.seed_override is not None:
            spec = replace(spec, seed=args.seed_override)
        reference, template, metas, truth = gen_pair(spec)
    except (OSError, ValueError) as exc:
        raise InputError(f"malformed spec: {exc}") from exc
    out = Path(args.out)
    data = out / "data"
    data.mkdir(parents=True, exist_ok=True)
    for name, raster, meta in (("reference", reference, metas[0]), ("template", template, metas[1])):
        write_f32(data / f"{name}.f32", raster.intensities)
        write_meta(data / f"{name}.f32", meta)
    dump_noise_config(data / "noise.json", spec.noise_ref, spec.noise_tmpl)
    _dump(data / "truth.json", truth.to_json())
    if args.degree != spec.degree:
        args.degree = spec.degree
    noise = {"reference": spec.noise_ref, "template": spec.noise_tmpl}
    result, report = _register(reference, template, metas, noise, args, out)
    metrics = {"success": result is not None, "seed": spec.seed}
    if result is not None:
        metrics.update(evaluate(result.estimate, truth, result.pcs))
        with open(out / "error_histogram.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lb_lo", "lb_hi", *[f"err<{e}" for e in ERR_BINS[1:]]])
            w.writerows(error_histogram(result.pcs, truth))
        metrics["outlier_max_posterior"] = max(
            [pc.posterior for pc in result.pcs if pc.posterior is not None and not truth.labels[pc.k]], default=0.0)
    _dump(out / "metrics.json", metrics)
    print(json.dumps(metrics))
    return EXIT_OK if result is not None else EXIT_FAIL


def cmd_crlb(args) -> int:
    try:
        a, _ = load_raster(args.reference_fragment, require_meta=False)
        b, _ = load_raster(args.template_fragment, require_meta=False)
    except (OSError, RasterFormatError) as exc:
        raise InputError(str(exc)) from exc
    if a.shape != b.shape:
        raise InputError("fragments differ in size")
    mask = ~a.nodata_mask & ~b.nodata_mask
    for name, r in (("reference", a), ("template", b)):
        if np.ptp(r.intensities[mask]) == 0:
            raise InputError(f"degenerate fragment: {name} fragment is constant")
    noise = _load_noise(args.noise)
    n_ref, n_tmpl = noise.get("reference", NoiseModel()), noise.get("template", NoiseModel())
    try:
        theta, est = assess_pc(a.intensities, mask, b.intensities, mask, n_ref, n_tmpl, AccuracyConfig())
    except TextureError as exc:
        raise InputError(f"degenerate fragment: {exc}") from exc
    report = {
        "texture": None if theta is None else vars(theta.texture),
        "sigma_lb": est.sigma_lb,
        "sigma_pc": est.sigma_pc,
        "validated": est.validated,
    }
    print(json.dumps(report, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--deterministic", action="store_true", help="fixed search/CRLB interleaving")
    common.add_argument("--degree", type=int, default=1, choices=(1, 2, 3))
    common.add_argument("--out", default="rae_out")

    reg_opts = argparse.ArgumentParser(add_help=False)
    reg_opts.add_argument("--noise", help="noise config JSON {reference: {...}, template: {...}}")
    reg_opts.add_argument("--stride", type=int, default=1, help="sigma_reg map stride in template pixels")
    reg_opts.add_argument("--to-reference", action="store_true", help="resample the sigma_reg map to reference pixels")
    reg_opts.add_argument("--d-max0", type=float, default=None, help="override the initial search radius")
    reg_opts.add_argument("--q", type=float, default=2.0, help="refit schedule growth")
    reg_opts.add_argument("--p-th", type=float, default=0.9)
    reg_opts.add_argument("--n-starts", type=int, default=10)
    reg_opts.add_argument("--searches-per-crlb", type=int, default=8,
                          help="CF searches per CRLB evaluation in --deterministic mode")
    reg_opts.add_argument("--fragment", type=int, default=17, help="odd fragment size in pixels")

    p = argparse.ArgumentParser(prog="rae", description="Registration with accuracy estimation")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("register", parents=[common, reg_opts], help="register a template onto a reference")
    r.add_argument("reference")
    r.add_argument("template")
    r.set_defaults(func=cmd_register)
    pr = sub.add_parser("predict", parents=[common], help="sigma_reg raster and isolines from a transform")
    pr.add_argument("transform")
    pr.add_argument("--shape", type=int, nargs=2, required=True, metavar=("ROWS", "COLS"))
    pr.add_argument("--stride", type=int, default=1)
    pr.set_defaults(func=cmd_predict)
    s = sub.add_parser("simulate", parents=[common, reg_opts], help="synthetic pair, registration and metrics")
    s.add_argument("spec", help="spec JSON path or bundled name (mono_easy, multimodal, outliers90)")
    s.add_argument("--spec-seed", dest="seed_override", type=int, default=None)
    s.set_defaults(func=cmd_simulate)
    c = sub.add_parser("crlb", parents=[common], help="CRLB of one fragment pair")
    c.add_argument("reference_fragment")
    c.add_argument("template_fragment")
    c.add_argument("--noise")
    c.set_defaults(func=cmd_crlb)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FileNotFoundError, RasterFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
