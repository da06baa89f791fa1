"""Command-line entry points: run, report, gradcheck, info.

Exit code 0 on success; on failure a single machine-readable line
`ERROR {json}` goes to stderr and the exit code is nonzero.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import bench
from .datasets import load_manifest, resolve_dataset
from .dropout import DropoutPolicy, sample_circuit_mask, sample_node_masks
from .errors import ConfigError
from .network import Topology, build_network
from .rng import RngKey
from .training import grad_check

DEFAULT_OUT_ENV = "PARCIRCUIT_OUT"

_POLICY_ALIASES = {
    "none": "none",
    "nd": "node_dropout",
    "node_dropout": "node_dropout",
    "nfd": "nonfixed_dropcircuit",
    "nonfixed_dropcircuit": "nonfixed_dropcircuit",
    "fd": "fixed_dropcircuit",
    "fixed_dropcircuit": "fixed_dropcircuit",
}


def _default_out() -> str:
    return os.environ.get(DEFAULT_OUT_ENV, "bench_out")


def parse_arch(spec: str) -> Topology:
    """Parse 'IN-H1,H2-OUT[@K]', e.g. '6-16,16-3@2'."""
    text, _, kpart = spec.partition("@")
    parts = text.split("-")
    if len(parts) != 3:
        raise ConfigError(f"arch spec {spec!r} must look like IN-H1,H2-OUT[@K]")
    try:
        input_dim = int(parts[0])
        hidden = tuple(int(w) for w in parts[1].split(","))
        output_dim = int(parts[2])
        k = int(kpart) if kpart else 1
    except ValueError:
        raise ConfigError(f"arch spec {spec!r} has a non-integer field") from None
    return Topology(input_dim=input_dim, k=k, hidden=hidden, output_dim=output_dim)


def cmd_run(args) -> int:
    config = bench.load_config(args.config)
    rows = bench.run_matrix(config, args.out, jobs=args.jobs, resume=args.resume)
    for fmt in ("csv", "markdown"):
        path = bench.emit_report(rows, fmt, args.out)
        print(f"wrote {path}")
    for row in rows:
        print(
            f"{row.dataset} {row.architecture} {row.condition} k={row.k}: "
            f"mean {row.mean_error:.3f}% median {row.median_error:.3f}% "
            f"({row.mean_seconds:.2f}s mean train time, {row.trials} trials)"
        )
    return 0


def cmd_report(args) -> int:
    rows = bench.rows_from_directory(args.in_dir)
    path = bench.emit_report(rows, args.format, args.in_dir)
    print(f"wrote {path}")
    return 0


def cmd_gradcheck(args) -> int:
    topo = parse_arch(args.arch)
    kind = _POLICY_ALIASES.get(args.policy.lower())
    if kind is None:
        raise ConfigError(f"unknown policy {args.policy!r}")
    seed = RngKey(trial=args.seed)
    params = build_network(topo, init_scale=1.0, seed=seed)
    masks = None
    if kind == "node_dropout":
        masks = sample_node_masks(topo, 0.5, seed)
    elif kind in ("nonfixed_dropcircuit", "fixed_dropcircuit"):
        masks = sample_circuit_mask(topo.k, 0.5, seed)
    x = np.linspace(-1.0, 1.0, topo.input_dim)
    err = grad_check(params, x, target=0, masks=masks, eps=1e-5)
    print(f"max relative gradient error: {err:.3e}")
    if err >= 1e-4:
        print("FAIL: above 1e-4")
        return 1
    print("OK")
    return 0


def cmd_info(args) -> int:
    manifest = load_manifest(args.manifest)
    if args.dataset not in manifest:
        raise ConfigError(f"dataset {args.dataset!r} not in manifest {args.manifest}")
    parts = resolve_dataset(args.dataset, manifest[args.dataset], Path(args.manifest).parent)
    for part, ds in sorted(parts.items()):
        print(
            f"{args.dataset}[{part}]: {ds.n_samples} samples, {ds.n_features} features, "
            f"{ds.class_count} classes"
            + (f", {ds.dropped_rows} rows dropped" if ds.dropped_rows else "")
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="parcircuit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment matrix")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default=_default_out())
    p_run.add_argument("--jobs", type=int, default=1)
    p_run.add_argument("--resume", action="store_true")
    p_run.set_defaults(func=cmd_run)

    p_rep = sub.add_parser("report", help="emit reports from a finished run directory")
    p_rep.add_argument("--in", dest="in_dir", default=_default_out())
    p_rep.add_argument("--format", choices=("csv", "markdown", "plotdata"), default="csv")
    p_rep.set_defaults(func=cmd_report)

    p_gc = sub.add_parser("gradcheck", help="finite-difference check on a random network")
    p_gc.add_argument("--arch", required=True, help="IN-H1,H2-OUT[@K], e.g. 6-16,16-3@2")
    p_gc.add_argument("--policy", default="none", help="none | nd | nfd | fd")
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.set_defaults(func=cmd_gradcheck)

    p_info = sub.add_parser("info", help="describe a manifest dataset")
    p_info.add_argument("--dataset", required=True)
    p_info.add_argument("--manifest", default="data/manifest.yaml")
    p_info.set_defaults(func=cmd_info)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(
            "ERROR " + json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
