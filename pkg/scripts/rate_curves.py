"""sqrt(n h_b)-scaled sup-error across sample sizes for the Model I designs.

    python3 scripts/rate_curves.py --replicates 30 --out rate.csv
"""

import argparse
import logging

from splinedeconv.dataio import write_table_csv
from splinedeconv.sim_harness import MethodConfig, SimDesign, run_table1


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--replicates", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--sizes", default="500,700,1000,1500,2000")
    ap.add_argument("--models", default="I.a,I.b,I.c")
    ap.add_argument("--tasks", default="density,regression")
    ap.add_argument("--workers", type=int)
    ap.add_argument("--out", default="rate.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.ERROR)

    header = ("task", "model", "n", "h_b", "mean_mae", "scaled_mae", "scaled_se", "failures")
    rows = []
    for task in args.tasks.split(","):
        for model in args.models.split(","):
            for n in map(int, args.sizes.split(",")):
                # failures are reported rather than fatal so the whole curve is visible
                rep = run_table1(SimDesign(task, model, n, args.replicates, args.seed), MethodConfig(), args.workers,
                                 strict=False)
                rows.append((task, model, str(n), rep.h_b, rep.mean, rep.scaled_mean, rep.scaled_se,
                             str(rep.failures)))
                print(f"{task:10s} {model:4s} n={n:5d}  scaled {rep.scaled_mean:8.2f} +/- {rep.scaled_se:.2f}"
                      f"  failures={rep.failures}", flush=True)
    write_table_csv(args.out, header, rows)


if __name__ == "__main__":
    main()
