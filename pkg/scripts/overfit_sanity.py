#!/usr/bin/env python3
"""Memorization sanity run: drive train MSE below 1e-3 on 20 trajectories.

A model that cannot interpolate a handful of samples is miswired somewhere;
this script is the quick smoke test for that.  Plateau decay is disabled
because validation MSE never improves while memorizing and would strangle
the learning rate.

    python3 scripts/overfit_sanity.py --out runs/overfit
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from spatea import nbody
from spatea import train as tr
from spatea.model import ModelConfig


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dataset", default="data/les5_tiny.jsonl")
    ap.add_argument("--out", default="runs/overfit")
    ap.add_argument("--epochs", type=int, default=500)
    ap.add_argument("--lr", type=float, default=4e-3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if not os.path.exists(args.dataset):
        os.makedirs(os.path.dirname(args.dataset) or ".", exist_ok=True)
        nbody.generate_dataset(20, 5, "L_ES", 1e-3, 1000, 0, args.dataset)
        print(f"generated 20 trajectories -> {args.dataset}")

    rc = tr.RunConfig(dataset=args.dataset, out_dir=args.out,
                      model=ModelConfig(), seed=args.seed, epochs=args.epochs,
                      lr=args.lr, patience=args.epochs + 1)
    res = tr.train(rc)
    best = min(r.train_mse for r in res.rows)
    hit = [r.epoch for r in res.rows if r.train_mse <= 1e-3]
    print(f"min train MSE {best:.3e}; reached 1e-3 at epoch "
          f"{hit[0] if hit else 'never'} of {args.epochs}")
    return 0 if hit else 1


if __name__ == "__main__":
    sys.exit(main())
