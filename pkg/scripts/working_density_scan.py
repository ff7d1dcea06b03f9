"""Bias/variance trade-off of the working-density size L.

For each L: the largest |z| of the estimating function at the true beta
(mean-zero witness) and the mean sup-error of the fitted regression.

    python3 scripts/working_density_scan.py --model II.a --sizes 7,11,25
"""

import argparse
import logging

import numpy as np

from splinedeconv.semipar_regression import WorkingDensity
from splinedeconv.sim_harness import MethodConfig, SimDesign, mean_zero_witness, run_table1


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", default="II.a")
    ap.add_argument("--sizes", default="6,7,9,11,13,16,20,25")
    ap.add_argument("--n", type=int, default=500, help="sample size of the sup-error runs")
    ap.add_argument("--replicates", type=int, default=20)
    ap.add_argument("--datasets", type=int, default=200, help="datasets (n = 2000) for the witness")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.ERROR)

    print(f"{'L':>3s}  {'max|z|':>7s}  {'mean MAE':>9s}  {'SE':>6s}  failures")
    for L in map(int, args.sizes.split(",")):
        wit = mean_zero_witness(args.model, 2000, args.datasets, args.seed, work=WorkingDensity.uniform(L))
        rep = run_table1(
            SimDesign("regression", args.model, args.n, args.replicates, args.seed),
            MethodConfig(working_points=L),
            strict=False,
        )
        print(f"{L:3d}  {np.max(np.abs(wit.z)):7.2f}  {rep.mean:9.3f}  {rep.se:6.3f}  {rep.failures}", flush=True)


if __name__ == "__main__":
    main()
