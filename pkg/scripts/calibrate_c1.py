"""Pass rate of the good-sample condition checker as a function of c1.

c1 scales delta = c1 * eps * sqrt(log(1/eps)), which in turn sets the
condition thresholds and (through N = n_factor * d / delta^2) the sample
size. DEFAULT_C1 is the smallest grid value passing in every seed.

    python scripts/calibrate_c1.py --d 20 --n-factor 50 --seeds 20
"""

import argparse
import math

from robustmean.contamination import (AdversarySpec, DistributionKind, GeneratorSpec,
                                      check_conditions, generate)
from robustmean.model import Regime, build_constants


def pass_rate(c1, eps, d, n_factor, seeds, regime):
    schedule = build_constants(eps, regime, {"c1": c1})
    n = math.ceil(n_factor * d / schedule.delta ** 2)
    dist = (DistributionKind.GAUSSIAN_IDENTITY if regime is Regime.SUB_GAUSSIAN
            else DistributionKind.BOUNDED_COVARIANCE)
    adv = AdversarySpec.cluster_shift(eps, schedule.delta / eps)
    passed = 0
    for seed in range(seeds):
        samples, truth = generate(GeneratorSpec(n, d, seed, dist), adv)
        passed += check_conditions(samples, truth, schedule).passed
    return n, passed / seeds


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--d", type=int, default=20)
    p.add_argument("--n-factor", type=float, default=50.0)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--mode", choices=[r.value for r in Regime], default=Regime.SUB_GAUSSIAN.value)
    p.add_argument("--grid", type=float, nargs="+", default=[2.0, 3.0, 3.5, 4.0, 4.5, 5.0, 6.0])
    args = p.parse_args()
    print(f"{'c1':>6}{'N':>8}{'pass rate':>12}")
    for c1 in args.grid:
        n, rate = pass_rate(c1, args.eps, args.d, args.n_factor, args.seeds, Regime(args.mode))
        print(f"{c1:>6.2f}{n:>8d}{rate:>12.2f}")


if __name__ == "__main__":
    main()
