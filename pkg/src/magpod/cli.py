"""Command-line front end: dataset generation, training/evaluation studies,
and the one-dimensional gradient-enhancement demo.

Exit codes: 0 success, 1 runtime/numeric failure, 2 argument error.
"""

import argparse
import json
import os
import sys

from . import pipeline
from .exceptions import MagpodError
from .testbed import DEFAULT_BOUNDS, TestbedConfig


def _parse_sizes(text):
    sizes = tuple(int(s) for s in text.split(","))
    if not sizes:
        raise argparse.ArgumentTypeError("need at least one size")
    return sizes


def _parse_bounds(text):
    out = []
    for part in text.split(","):
        lo, _, hi = part.partition(":")
        out.append((float(lo), float(hi)))
    return tuple(out)


def _parse_modes(text):
    if text == "both":
        return ("gf", "ge")
    if text in ("gf", "ge"):
        return (text,)
    raise argparse.ArgumentTypeError(f"modes must be gf, ge, or both, got {text!r}")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="magpod",
        description="POD/GPR surrogate studies on a parametric magnetostatic testbed",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="generate a solved dataset directory")
    gen.add_argument("--out", required=True, help="output dataset directory")
    gen.add_argument("--sizes", type=_parse_sizes, default=(15, 31, 61, 119),
                     help="comma-separated ascending partition sizes")
    gen.add_argument("--test", type=int, default=30, help="held-out test points")
    gen.add_argument("--resolution", type=int, default=24,
                     help="mesh elements per side")
    gen.add_argument("--material", choices=("linear", "brauer"), default="linear")
    gen.add_argument("--bounds", type=_parse_bounds, default=DEFAULT_BOUNDS,
                     help="parameter box as lo:hi,lo:hi,...")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--threads", type=int, default=os.cpu_count())

    tr = sub.add_parser("train-eval", help="train surrogates and write reports")
    tr.add_argument("--dataset", required=True, help="dataset directory")
    tr.add_argument("--out", default=None,
                    help="report directory (defaults to the dataset directory)")
    tr.add_argument("--rank", type=int, default=14, help="POD basis size")
    tr.add_argument("--modes", type=_parse_modes, default=("gf", "ge"))
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--threads", type=int, default=os.cpu_count())
    tr.add_argument("--basis-study", action="store_true",
                    help="also sweep reconstruction error against basis size")

    demo = sub.add_parser("demo-1d", help="gradient-enhanced GP demo on x*sin(x)")
    demo.add_argument("--out", default="demo1d.csv", help="output CSV path")
    demo.add_argument("--seed", type=int, default=0)
    return parser


def _echo_config(args):
    resolved = {k: v for k, v in vars(args).items() if k != "command"}
    print(f"config: {json.dumps(resolved, sort_keys=True, default=str)}")


def _cmd_generate(args):
    cfg = TestbedConfig(resolution=args.resolution, material=args.material)
    ds = pipeline.generate_dataset(
        cfg,
        sizes=args.sizes,
        test_size=args.test,
        seed=args.seed,
        bounds=args.bounds,
        n_jobs=args.threads,
    )
    pipeline.save_dataset(ds, args.out)
    print(
        f"accepted {len(ds.points)} samples, rejected {ds.rejected_count}, "
        f"total {ds.manifest['total_seconds']:.2f} s"
    )
    return 0


def _cmd_train_eval(args):
    out_dir = args.out or args.dataset
    os.makedirs(out_dir, exist_ok=True)
    ds = pipeline.load_dataset(args.dataset)
    from .pod import build_weight
    from .testbed import ParamPoint

    weight = build_weight(ParamPoint.midpoint(ds.bounds), ds.cfg)
    field_surrogates = {}
    kpi_surrogates = {}
    for partition in ds.sizes:
        for mode in args.modes:
            try:
                field_surrogates[(partition, mode)] = pipeline.train_field_surrogate(
                    ds, partition, rank=args.rank, mode=mode, seed=args.seed,
                    weight=weight, n_jobs=args.threads,
                )
                kpi_surrogates[(partition, mode)] = pipeline.train_kpi_surrogate(
                    ds, partition, mode=mode, seed=args.seed
                )
            except MagpodError as exc:
                print(
                    f"error: fit failed for partition {partition} mode {mode}: {exc}",
                    file=sys.stderr,
                )
                return 1
    report = pipeline.evaluate(ds, field_surrogates, kpi_surrogates)
    report.to_csv(os.path.join(out_dir, "report.csv"))
    timing = pipeline.timing_report(ds, field_surrogates, kpi_surrogates)
    pipeline.write_rows_csv(os.path.join(out_dir, "timing.csv"), timing)
    print(f"wrote {os.path.join(out_dir, 'report.csv')}")
    print(f"wrote {os.path.join(out_dir, 'timing.csv')}")
    if args.basis_study:
        rows = pipeline.basis_study(ds, weight=weight)
        pipeline.write_rows_csv(os.path.join(out_dir, "basis.csv"), rows)
        print(f"wrote {os.path.join(out_dir, 'basis.csv')}")
    return 0


def _cmd_demo_1d(args):
    result = pipeline.demo_one_dimensional(csv_path=args.out, seed=args.seed)
    print(f"gf rmse: {result['gf_rmse']:.6g}")
    print(f"ge rmse: {result['ge_rmse']:.6g}")
    print(f"wrote {args.out}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "train-eval": _cmd_train_eval,
    "demo-1d": _cmd_demo_1d,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    _echo_config(args)
    try:
        return _COMMANDS[args.command](args)
    except (MagpodError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def console_main():
    sys.exit(main())


if __name__ == "__main__":
    console_main()
