"""Overfit the 32-pair toy corpus with each flagship configuration.

    python scripts/run_overfit.py            # all four
    python scripts/run_overfit.py --cell binary --attn model2 --dim 16
"""

import argparse
import sys

from treeattn.toy import FLAGSHIP, OVERFIT_MSE, OVERFIT_PEARSON, overfit


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cell", choices=["child_sum", "binary"])
    ap.add_argument("--attn", choices=["model1", "model2"])
    ap.add_argument("--pairs", type=int, default=32)
    ap.add_argument("--dim", type=int, default=16)
    ap.add_argument("--epochs", type=int, default=200)
    args = ap.parse_args()
    runs = [(c, k) for c, k in FLAGSHIP
            if args.cell in (None, c) and args.attn in (None, k)]
    print(f"target: pearson >= {OVERFIT_PEARSON}, mse <= {OVERFIT_MSE}")
    failed = 0
    for cell, kind in runs:
        r = overfit(cell, kind, args.pairs, args.dim, args.epochs)
        failed += not r.passed
        print(f"{'PASS' if r.passed else 'FAIL'}  {cell}/{kind}/other_sentence  epochs={r.epochs} "
              f"pearson={r.report.pearson:.5f} mse={r.report.mse:.5f} time={r.seconds:.1f}s", flush=True)
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
