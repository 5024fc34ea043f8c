"""Command-line driver for the recycling experiments.

Typical session:

    krecycle record    --image builtin:16 --seed 0 --out runs/base
    krecycle references --seq runs/base
    krecycle compare   --seq runs/base --strategy None --strategy Ritz-S \
                       --strategy "RGen-L(R)" --strategy "RGen-L(R)-NSC" \
                       --out runs/base
    krecycle similarity --seq runs/base --out runs/base
    krecycle sweep     --seq runs/base --strategy Ritz-S --dims 0,4,10,30 --out runs/base

Every metric table lands as CSV with a fixed header, ready for the
plotting scripts.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .experiments import (
    CG_MINRES_HEADER,
    REPLAY_HEADER,
    SIMILARITY_HEADER,
    SWEEP_HEADER,
    RunConfig,
    cg_vs_minres,
    compute_references,
    dimension_sweep,
    load_sequence,
    record_sequence,
    replay,
    save_sequence,
    similarity_report,
    write_csv,
)
from .krylov import flops_minres, flops_rminres
from .recycling import StrategyDescriptor

__all__ = ["build_parser", "main"]


def _add_record_args(p):
    p.add_argument("--image", default="builtin:16", help="path, 'builtin', or 'builtin:<size>'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rate", type=float, default=0.3, help="fraction of retained pixels")
    p.add_argument("--noise", type=float, default=0.3, help="relative noise level")
    p.add_argument("--filters", type=int, default=3)
    p.add_argument("--kernel-size", type=int, default=5)
    p.add_argument("--delta", type=float, default=1e-2, help="inner stop tolerance")
    p.add_argument("--inner", type=int, default=500, help="max inner iterations")
    p.add_argument("--lower-gtol", type=float, default=1e-3)
    p.add_argument("--eps-stop", type=float, default=1e-4, help="upper gradient-norm stop")
    p.add_argument("--max-upper", type=int, default=25)
    p.add_argument("--out", required=True, help="output directory for the sequence")


def _add_seq_arg(p):
    p.add_argument("--seq", required=True, help="directory of a recorded sequence")


def _add_replay_args(p):
    p.add_argument("--stop", choices=["res", "nsc", "true-hg"], default=None)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--recycle-dim", type=int, default=None)
    p.add_argument("--inner", type=int, default=None, help="max inner iterations")
    p.add_argument("--no-one-step", action="store_true", help="skip the one-step upper costs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="krecycle",
        description="Recycling Krylov solvers for bilevel-learning Hessian sequences",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("record", help="solve the bilevel problem once and freeze the sequence")
    _add_record_args(p)

    p = sub.add_parser("references", help="add high-accuracy reference hypergradients")
    _add_seq_arg(p)
    p.add_argument("--delta-ref", type=float, default=1e-13)

    p = sub.add_parser("replay", help="re-solve the sequence under one strategy")
    _add_seq_arg(p)
    p.add_argument("--strategy", required=True, help="Table-style acronym, e.g. RGen-L(R)-NSC")
    _add_replay_args(p)
    p.add_argument("--out", default=None, help="directory for replay.csv (default: print totals)")

    p = sub.add_parser("compare", help="replay a list of strategies into one CSV")
    _add_seq_arg(p)
    p.add_argument("--strategy", action="append", required=True, help="repeatable")
    _add_replay_args(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("similarity", help="relative differences of consecutive systems")
    _add_seq_arg(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="recycle-dimension sweep for one strategy")
    _add_seq_arg(p)
    p.add_argument("--strategy", required=True)
    p.add_argument("--dims", required=True, help="comma-separated dimensions, e.g. 0,2,8,30")
    p.add_argument("--stop", choices=["res", "nsc", "true-hg"], default=None)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("cg-vs-minres", help="cold and warm CG/MINRES over the sequence")
    _add_seq_arg(p)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("flops", help="evaluate the closed-form cost model")
    p.add_argument("--iterations", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--recycle-dim", type=int, default=0)
    p.add_argument("--h-cost", type=int, required=True)
    return parser


def _cmd_record(args) -> int:
    cfg = RunConfig(
        image=args.image,
        seed=args.seed,
        rate=args.rate,
        noise=args.noise,
        num_filters=args.filters,
        kernel_size=args.kernel_size,
        delta=args.delta,
        max_inner=args.inner,
        lower_gtol=args.lower_gtol,
        eps_stop=args.eps_stop,
        max_upper=args.max_upper,
    )
    seq = record_sequence(cfg)
    out = save_sequence(seq, args.out)
    total = sum(rec.iterations for rec in seq.systems)
    print(f"recorded {len(seq)} systems ({total} inner iterations) -> {out}")
    return 0


def _cmd_references(args) -> int:
    seq = load_sequence(args.seq)
    compute_references(seq, delta_ref=args.delta_ref)
    save_sequence(seq, args.seq)
    print(f"references at delta_ref={args.delta_ref:g} stored for {len(seq)} systems")
    return 0


def _replay_one(seq, name, args):
    return replay(
        seq,
        name,
        stop=args.stop,
        recycle_dim=args.recycle_dim,
        delta=args.delta,
        compute_one_step=not args.no_one_step,
        max_inner=args.inner,
    )


def _cmd_replay(args) -> int:
    seq = load_sequence(args.seq)
    metrics = _replay_one(seq, args.strategy, args)
    if args.out:
        path = Path(args.out) / "replay.csv"
        write_csv(path, REPLAY_HEADER, metrics.as_table())
        print(f"wrote {path}")
    print(
        f"{args.strategy}: {metrics.total_iterations} iterations, "
        f"{metrics.total_flops} flops"
        + (
            f", max hg err {metrics.max_hg_rel_error:.3e}"
            if metrics.max_hg_rel_error is not None
            else ""
        )
    )
    return 0


def _cmd_compare(args) -> int:
    seq = load_sequence(args.seq)
    rows = []
    for name in args.strategy:
        StrategyDescriptor.parse(name)  # fail fast on typos
        metrics = _replay_one(seq, name, args)
        rows.extend(metrics.as_table())
        print(f"{name}: {metrics.total_iterations} iterations, {metrics.total_flops} flops")
    path = Path(args.out) / "replay.csv"
    write_csv(path, REPLAY_HEADER, rows)
    print(f"wrote {path}")
    return 0


def _cmd_similarity(args) -> int:
    seq = load_sequence(args.seq)
    rows = similarity_report(seq)
    path = Path(args.out) / "similarity.csv"
    write_csv(path, SIMILARITY_HEADER, rows)
    print(f"wrote {path}")
    return 0


def _cmd_sweep(args) -> int:
    seq = load_sequence(args.seq)
    dims = [int(v) for v in args.dims.split(",") if v != ""]
    rows = dimension_sweep(seq, args.strategy, dims, stop=args.stop, delta=args.delta)
    path = Path(args.out) / "sweep.csv"
    write_csv(path, SWEEP_HEADER, rows)
    print(f"wrote {path}")
    return 0


def _cmd_cg_vs_minres(args) -> int:
    seq = load_sequence(args.seq)
    rows = cg_vs_minres(seq, delta=args.delta)
    path = Path(args.out) / "cg_minres.csv"
    write_csv(path, CG_MINRES_HEADER, rows)
    print(f"wrote {path}")
    return 0


def _cmd_flops(args) -> int:
    if args.recycle_dim:
        value = flops_rminres(args.iterations, args.dim, args.recycle_dim, args.h_cost)
    else:
        value = flops_minres(args.iterations, args.dim, args.h_cost)
    print(value)
    return 0


_COMMANDS = {
    "record": _cmd_record,
    "references": _cmd_references,
    "replay": _cmd_replay,
    "compare": _cmd_compare,
    "similarity": _cmd_similarity,
    "sweep": _cmd_sweep,
    "cg-vs-minres": _cmd_cg_vs_minres,
    "flops": _cmd_flops,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
