#!/usr/bin/env python3
"""Desk-scale comparison: SpaTea vs matched mean-field baseline on L_ES(5).

Generates a 1000-trajectory charged-particle dataset (Lorentz + gravity +
electrostatics, 5 particles, 1000 steps of dt=1e-3), trains both model
variants on a few seeds, and reports best-validation test MSE side by side.

Run from the repo root:

    python3 scripts/compare_les5.py --out runs/compare_les5
"""

import argparse
import json
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from spatea import nbody
from spatea import train as tr
from spatea.model import ModelConfig, matched_baseline_config


def ensure_dataset(path: str, n_traj: int, seed: int) -> None:
    if os.path.exists(path):
        print(f"dataset {path} exists, reusing")
        return
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    t0 = time.time()
    nbody.generate_dataset(n_traj, 5, "L_ES", 1e-3, 1000, seed, path)
    print(f"generated {n_traj} trajectories in {time.time() - t0:.1f}s -> {path}")


def run_one(dataset: str, out_dir: str, variant: str, seed: int,
            epochs: int) -> dict:
    if variant == "spatea":
        cfg = ModelConfig()
    else:
        cfg = matched_baseline_config(ModelConfig())
    rc = tr.RunConfig(dataset=dataset, out_dir=out_dir, model=cfg,
                      seed=seed, epochs=epochs)
    t0 = time.time()
    res = tr.train(rc)
    wall = time.time() - t0
    ev = tr.evaluate_checkpoint(res.checkpoint_path, dataset)
    best_epoch = min(res.rows, key=lambda r: r.val_mse).epoch
    return {
        "variant": variant,
        "seed": seed,
        "params": res.param_count,
        "best_val": res.best_val_mse,
        "best_epoch": best_epoch,
        "test_mse": ev["test_mse"],
        "wall_seconds": round(wall, 1),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dataset", default="data/les5.jsonl")
    ap.add_argument("--out", default="runs/compare_les5")
    ap.add_argument("--n-traj", type=int, default=1000)
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=30)
    args = ap.parse_args(argv)

    ensure_dataset(args.dataset, args.n_traj, args.data_seed)
    os.makedirs(args.out, exist_ok=True)

    rows = []
    for seed in args.seeds:
        for variant in ("spatea", "baseline"):
            run_dir = os.path.join(args.out, f"{variant}_s{seed}")
            row = run_one(args.dataset, run_dir, variant, seed, args.epochs)
            rows.append(row)
            print(f"{variant:>8} seed {seed}: test {row['test_mse']:.6f} "
                  f"(val {row['best_val']:.6f} @ {row['best_epoch']}, "
                  f"{row['params']} params, {row['wall_seconds']}s)")

    wins = 0
    for seed in args.seeds:
        sp = next(r for r in rows if r["variant"] == "spatea" and r["seed"] == seed)
        bl = next(r for r in rows if r["variant"] == "baseline" and r["seed"] == seed)
        if sp["test_mse"] <= bl["test_mse"]:
            wins += 1
    summary = {"rows": rows, "wins": wins, "n_seeds": len(args.seeds)}
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)

    print(f"\nspatea <= baseline on {wins}/{len(args.seeds)} seeds")
    return 0 if wins >= len(args.seeds) // 2 + 1 else 1


if __name__ == "__main__":
    sys.exit(main())
