#!/usr/bin/env python3
"""Map the estimated lambda over the (sigma, d) two-cluster grid.

Prints a small table of lambda estimates and writes the full grid to CSV so
it can be plotted (sigma on one axis, center distance on the other).
"""

import argparse

from scdh.bounds import TOY_CSV_FIELDS, ToyConfig, toy_lambda_grid, write_rows_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--samples-per-cluster", type=int, default=200)
    ap.add_argument("--triplet-samples", type=int, default=1_000_000)
    ap.add_argument("--out", default="lambda_grid.csv")
    args = ap.parse_args()

    cfg = ToyConfig(seed=args.seed,
                    samples_per_cluster=args.samples_per_cluster,
                    triplet_samples=args.triplet_samples)
    rows = toy_lambda_grid(cfg)
    write_rows_csv(args.out, rows, TOY_CSV_FIELDS)

    ds = sorted(set(r.d for r in rows))
    print("lambda estimates (rows: sigma, cols: d)")
    print("sigma\\d " + " ".join(f"{d:7.1f}" for d in ds))
    for sigma in cfg.sigma_grid:
        vals = [r.lambda_estimate for d in ds for r in rows
                if r.sigma == sigma and r.d == d]
        print(f"{sigma:6.2f}  " + " ".join(f"{v:7.4f}" for v in vals))
    lams = [r.lambda_estimate for r in rows if not r.degenerate]
    print(f"\ncells below 1: {sum(l < 1 for l in lams)}/{len(lams)}   "
          f"max: {max(lams):.4f}   wrote {args.out}")


if __name__ == "__main__":
    main()
