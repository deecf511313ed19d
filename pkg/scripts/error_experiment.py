"""Robust estimator against the empirical mean and coordinate-wise median.

Runs the sub-gaussian and bounded-covariance harnesses at N = n_factor * d / delta^2
with a cluster-shift adversary at distance sigma * delta / eps, and prints
median errors next to the guaranteed bound.

    python scripts/error_experiment.py --d 20 --seeds 20
"""

import argparse
import math

from robustmean.cli import RunConfig, format_summary, run_experiment
from robustmean.contamination import AdversarySpec
from robustmean.model import Regime, build_constants


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--d", type=int, default=20)
    p.add_argument("--n-factor", type=float, default=4.0)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--sigma", type=float, nargs="+", default=[1.0, 3.0])
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args()
    seeds = tuple(range(args.seeds))

    sg = build_constants(args.eps)
    n = math.ceil(args.n_factor * args.d / sg.delta ** 2)
    cfg = RunConfig(n=n, d=args.d, eps=args.eps, seeds=seeds,
                    adversary=AdversarySpec.cluster_shift(args.eps, sg.delta / args.eps))
    res = run_experiment(cfg, jobs=args.jobs)
    print(f"sub-gaussian, N={n}, bound c3*delta = {sg.c3 * sg.delta:.4f}")
    print(format_summary(res.summary), "\n")

    bc = build_constants(args.eps, Regime.BOUNDED_COVARIANCE)
    n = 2 * math.ceil(args.n_factor * args.d / bc.delta ** 2)
    for sigma in args.sigma:
        adv = AdversarySpec.cluster_shift(args.eps, sigma * bc.delta / args.eps)
        cfg = RunConfig(mode=Regime.BOUNDED_COVARIANCE, n=n, d=args.d, eps=args.eps,
                        sigma=sigma, seeds=seeds, adversary=adv)
        res = run_experiment(cfg, jobs=args.jobs)
        bound = bc.c3 * bc.c1 * math.sqrt(args.eps) * sigma
        print(f"bounded covariance, sigma={sigma}, 2N={n}, bound c3*c1*sqrt(eps)*sigma = {bound:.4f}")
        print(format_summary(res.summary), "\n")


if __name__ == "__main__":
    main()
