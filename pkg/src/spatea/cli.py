"""Command-line driver.

Subcommands: gen-data, train, eval, check, compress, dmrg. Every command is
deterministic under a fixed seed and writes machine-readable output next to
its human-readable logging. Exit codes: 0 success, 1 check/tolerance
failure, 2 usage or config error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import checkpoint as ckpt
from . import checks
from . import compress as cp
from . import dmrg
from . import model as mdl
from . import nbody
from . import train as tr
from .autodiff import CapabilityError

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3


def _parse_override(text: str):
    """--key=value with JSON-style values, bare words as strings."""
    if "=" not in text:
        raise ValueError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.lstrip("-"), value


def _apply_override(config_dict: dict, key: str, value):
    parts = key.split(".")
    node = config_dict
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ValueError(f"cannot override through non-table key {p!r}")
    node[parts[-1]] = value


def _build_run_config(args, overrides) -> tr.RunConfig:
    doc = {}
    if args.config:
        with open(args.config, "rb") as fh:
            doc = tomllib.load(fh)
    for flag in ("dataset", "out_dir", "epochs", "batch_size", "lr", "seed"):
        val = getattr(args, flag)
        if val is not None:
            doc[flag] = val
    for text in overrides:
        key, value = _parse_override(text)
        _apply_override(doc, key, value)
    if "dataset" not in doc or "out_dir" not in doc:
        raise ValueError("dataset and out_dir are required "
                         "(flags or config file)")
    model_cfg = mdl.ModelConfig.from_dict(doc.get("model", {}))
    if getattr(args, "baseline", False):
        model_cfg = mdl.matched_baseline_config(model_cfg)
    doc["model"] = model_cfg.to_dict()
    return tr.RunConfig.from_dict(doc)


def cmd_gen_data(args) -> int:
    path = nbody.generate_dataset(args.n_traj, args.n_particles, args.field,
                                  args.dt, args.steps, args.seed, args.out)
    print(f"wrote {args.n_traj} {args.field} trajectories to {path}")
    return EXIT_OK


def cmd_train(args, overrides) -> int:
    rc = _build_run_config(args, overrides)
    if args.baseline:
        spatea_cfg = mdl.ModelConfig.from_dict(
            {**rc.model.to_dict(), "variant": "spatea"})
        n_spatea = mdl.count_params(mdl.init_params(spatea_cfg, 0))
        n_base = mdl.count_params(mdl.init_params(rc.model, 0))
        print(f"parameter match: spatea={n_spatea} baseline={n_base} "
              f"(diff {abs(n_spatea - n_base)})")
    result = tr.train(rc)
    print(f"best val MSE {result.best_val_mse:.6g} | "
          f"checkpoint {result.checkpoint_path} | "
          f"metrics {result.metrics_path}")
    if result.aborted:
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_eval(args) -> int:
    report = tr.evaluate_checkpoint(args.checkpoint, args.dataset,
                                    split=args.split)
    text = json.dumps(report, sort_keys=True)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    return EXIT_OK


def cmd_check(args) -> int:
    report = checks.run_suites(args.suite, args.seed)
    for c in report["checks"]:
        status = "pass" if c["passed"] else "FAIL"
        print(f"[{status}] {c['name']}: max_err={c['max_err']:.3e} "
              f"tol={c['tol']:.1e}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, sort_keys=True, indent=1)
            fh.write("\n")
    if not report["passed"]:
        failed = [c["name"] for c in report["checks"] if not c["passed"]]
        print(f"failed checks: {', '.join(failed)}")
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_compress(args) -> int:
    config, params, _ = ckpt.load_checkpoint(args.checkpoint)
    samples = nbody.read_dataset(args.dataset)
    if args.index >= len(samples):
        raise ValueError(f"sample index {args.index} out of range "
                         f"({len(samples)} samples)")
    graph, _ = nbody.sample_to_graph(samples[args.index])
    records = cp.export_model_chains(graph, params, config)
    records = [r for r in records if r["layer"] == args.layer]
    caps = args.max_bond or [max(1, config.chi // 2)]
    report = []
    for rec in records:
        rows = cp.truncation_report(rec, caps)
        report.append({"node": rec["node"], "layer": rec["layer"],
                       "bond_dims": rec["chain"].bond_dims,
                       "truncations": rows})
        worst = max((r["deviation"] for r in rows), default=0.0)
        print(f"node {rec['node']}: bonds {rec['chain'].bond_dims} "
              f"worst deviation {worst:.3e}")
    text = json.dumps(report, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    bad = [r for r in report for t in r["truncations"]
           if t["deviation"] > t["bound"] + 1e-12]
    return EXIT_CHECK_FAILED if bad else EXIT_OK


def cmd_dmrg(args) -> int:
    mpo = dmrg.build_tfim_mpo(args.n, args.j, args.h)
    e_exact, _ = dmrg.exact_diag(mpo)
    state = dmrg.dmrg_ground_state(mpo, chi=args.chi, sweeps=args.sweeps,
                                   seed=args.seed)
    delta = abs(state.energy - e_exact)
    print(f"{'N':>4} {'J':>8} {'h':>8} {'chi':>5} "
          f"{'E_dmrg':>16} {'E_exact':>16} {'|delta|':>12}")
    print(f"{args.n:>4} {args.j:>8.3f} {args.h:>8.3f} {args.chi:>5} "
          f"{state.energy:>16.10f} {e_exact:>16.10f} {delta:>12.3e}")
    return EXIT_OK if delta <= 1e-6 else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spatea",
        description="equivariant MPS message passing: data, training, checks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate an N-body dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--field", choices=nbody.FIELDS, default="ES")
    p.add_argument("--n-traj", type=int, default=1000)
    p.add_argument("--n-particles", type=int, default=5)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="TOML run config")
    p.add_argument("--dataset")
    p.add_argument("--out-dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--baseline", action="store_true",
                   help="train the matched-parameter mean-field variant")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test",
                   choices=["train", "val", "test", "all"])
    p.add_argument("--out")

    p = sub.add_parser("check", help="run invariant suites")
    p.add_argument("--suite", default="all",
                   choices=list(checks.SUITES) + ["all"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("compress", help="truncate exported kernel chains")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--max-bond", type=int, nargs="*")
    p.add_argument("--out")

    p = sub.add_parser("dmrg", help="TFIM ground state vs exact")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--j", type=float, default=1.0)
    p.add_argument("--h", type=float, default=1.0)
    p.add_argument("--chi", type=int, default=16)
    p.add_argument("--sweeps", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, unknown = parser.parse_known_args(argv)
    overrides = []
    for item in unknown:
        if args.command == "train" and item.startswith("--") and "=" in item:
            overrides.append(item)
        else:
            parser.error(f"unrecognized argument: {item}")
    try:
        if args.command == "gen-data":
            return cmd_gen_data(args)
        if args.command == "train":
            return cmd_train(args, overrides)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "check":
            return cmd_check(args)
        if args.command == "compress":
            return cmd_compress(args)
        if args.command == "dmrg":
            return cmd_dmrg(args)
        parser.error(f"unknown command {args.command}")
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, ckpt.CheckpointError, CapabilityError,
            tomllib.TOMLDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
