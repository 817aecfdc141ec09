"""M-step basis evaluations and runtime as the number of control fragments doubles."""

import argparse

from rae.noise import NoiseModel
from rae.pipeline import PipelineConfig, run
from rae.synth import SynthSpec, gen_pair, rst_warp

SIZES = [(136, 136), (136, 272), (272, 272), (272, 544), (544, 544)]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--count", type=int, default=3, help="number of sizes from the doubling ladder")
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()
    prev = None
    print("rows cols N_CF basis_evals ratio runtime_s")
    for size in SIZES[: args.count]:
        spec = SynthSpec(size=size, sigma_x=3.0, k_rt_target=0.95, warp=rst_warp(size, (3.0, -2.0), 0.5),
                         d_max0=10.0, noise_ref=NoiseModel(0.2, 0.0002), noise_tmpl=NoiseModel(0.2, 0.0002),
                         seed=args.seed)
        ref, tmpl, metas, _ = gen_pair(spec)
        rep = run(ref, tmpl, metas, {"reference": spec.noise_ref, "template": spec.noise_tmpl},
                  PipelineConfig(deterministic=True, seed=args.seed)).report
        evals = rep["basis_evaluations"]
        ratio = "" if prev is None else f"{evals / prev:.2f}"
        print(size[0], size[1], rep["n_cf"], evals, ratio, f"{rep['runtime_s']:.1f}")
        prev = evals


if __name__ == "__main__":
    main()
