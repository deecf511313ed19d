"""Wall time of the robust estimator over dimensions with N proportional to d.

Prints per-dimension median wall times and the log-log slope against d * N.

    python scripts/scaling_sweep.py --dims 50 100 200 400
"""

import argparse
from collections import defaultdict

import numpy as np

from robustmean.cli import scaling_sweep


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--dims", type=int, nargs="+", default=[50, 100, 200, 400])
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--n-factor", type=float, default=4.0)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args()
    records, exponent = scaling_sweep(args.dims, args.eps, tuple(range(args.seeds)),
                                      args.n_factor, args.jobs)
    rows = defaultdict(list)
    for r in records:
        rows[(r["d"], r["n"])].append(r)
    print(f"{'d':>6}{'N':>8}{'median s':>10}{'iters':>7}{'sdp calls':>11}")
    for (d, n), rs in rows.items():
        wall = np.median([r["wall_ms"] for r in rs]) / 1e3
        print(f"{d:>6}{n:>8}{wall:>10.2f}{rs[0]['iterations']:>7}{rs[0]['sdp_calls']:>11}")
    print(f"fitted exponent of wall time vs d*N: {exponent:.3f}")


if __name__ == "__main__":
    main()
