"""Paired source-only vs curriculum runs on rotated two-moons.

Prints one row per seed plus the means and a one-sided sign test, and
optionally writes the table as CSV.

    python scripts/adaptation_gain.py --seeds 10 --out gain.csv
"""
import argparse
import csv
import sys
import time
from dataclasses import replace

import numpy as np
from scipy.stats import binomtest

from dropda.adapt import TrainConfig, train
from dropda.data import ShiftSpec, apply_shift, make_two_moons
from dropda.diffcore import make_rng
from dropda.evaluation import accuracy, feature_distance

VARIANTS = ("source_only", "grl", "cd3a")


def run_seed(seed, args, base):
    src = make_two_moons(args.n, args.noise, make_rng(args.data_seed + seed))
    tgt = apply_shift(src, ShiftSpec("rotation", args.angle))
    held = make_two_moons(args.heldout, args.noise, make_rng(args.data_seed + seed + 50_000))
    held_t = apply_shift(held, ShiftSpec("rotation", args.angle))
    row = {"seed": seed}
    for v in VARIANTS:
        params, _ = train(src, tgt.unlabeled(), replace(base, variant=v, seed=seed))
        row[f"{v}_acc_tgt"] = accuracy(params, tgt)
        row[f"{v}_d_A"] = feature_distance(params, held, held_t, seed).d_a
    return row


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--angle", type=float, default=45.0)
    p.add_argument("--data-seed", type=int, default=1000)
    p.add_argument("--heldout", type=int, default=4000, help="points per domain for d_A")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lambda-max", type=float, default=3.0)
    p.add_argument("--disc-lr-mult", type=float, default=10.0)
    p.add_argument("--out", help="CSV path")
    args = p.parse_args(argv)

    base = TrainConfig(epochs=args.epochs, lambda_max=args.lambda_max,
                       disc_lr_mult=args.disc_lr_mult, eval_period=0)
    t0 = time.perf_counter()
    rows = [run_seed(s, args, base) for s in range(args.seeds)]
    fields = list(rows[0])
    w = csv.DictWriter(sys.stdout, fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})
    so = np.array([r["source_only_acc_tgt"] for r in rows])
    cd = np.array([r["cd3a_acc_tgt"] for r in rows])
    wins = int(np.sum(cd > so))
    print("\nmean target accuracy: " + ", ".join(
        f"{v} {np.mean([r[f'{v}_acc_tgt'] for r in rows]):.4f}" for v in VARIANTS))
    print("mean d_A: " + ", ".join(f"{v} {np.mean([r[f'{v}_d_A'] for r in rows]):.4f}" for v in VARIANTS))
    print(f"cd3a beats source_only on {wins}/{len(rows)} seeds, "
          f"sign test p = {binomtest(wins, len(rows), 0.5, alternative='greater').pvalue:.4f}")
    print(f"{time.perf_counter() - t0:.1f} s")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fields, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
