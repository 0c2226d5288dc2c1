"""Capacity check: overfit a tiny lifter on a few synthetic sequences.

    python scripts/overfit.py --epochs 500 --loss-csv overfit_loss.csv
"""
import argparse
import csv
from dataclasses import fields

from gatedlift.experiments import OverfitConfig, run_overfit


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    for f in fields(OverfitConfig):
        ap.add_argument("--" + f.name.replace("_", "-"), type=type(f.default), default=f.default)
    ap.add_argument("--loss-csv", help="write per-epoch training loss here")
    args = ap.parse_args()
    cfg = OverfitConfig(**{f.name: getattr(args, f.name) for f in fields(OverfitConfig)})
    res = run_overfit(cfg)
    print(f"{res.n_windows} windows, {len(res.history)} epochs, {res.seconds:.0f}s")
    print(f"final train MPJPE {res.final_mpjpe:.2f} mm")
    rises = res.ma_increases(20)
    if rises.size:
        print(f"largest 20-epoch moving-average rise {rises.max():.4g}")
    if args.loss_csv:
        with open(args.loss_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss"])
            w.writerows(enumerate(res.history))


if __name__ == "__main__":
    main()
