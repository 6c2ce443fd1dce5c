"""Command-line front end: ``bisque grid | infer | simulate | oracle``.

Exit status is 0 on success, 1 on numerical or convergence failure and 2 on
usage or configuration errors.  Worker threads default to the logical
processor count and can be capped with ``--threads`` or the
``BISQUE_THREADS`` environment variable (the flag wins).
"""

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .exceptions import BisqueError
from .models.furseal import U2_DEFAULT, simulate_furseal
from .models.spatial import PAPER_M, PAPER_N, PAPER_PARAMS, PAPER_PRIORS, simulate_spatial
from .pipeline import ConfigError, dump_json
from .sparse_quad import CLASSICAL, NESTED, sparse_grid, write_grid_csv

EXIT_OK, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="bisque", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("grid", help="write a sparse grid for N(0, I) as CSV")
    g.add_argument("--dim", type=int, required=True)
    g.add_argument("--level", type=int, required=True)
    g.add_argument("--family", choices=("nested", "classical"), default="nested")
    g.add_argument("--out", help="CSV path (default: standard output)")

    for name, text in (("infer", "run BISQuE from a JSON configuration"), ("oracle", "BISQuE versus an MCMC chain")):
        p = sub.add_parser(name, help=text)
        p.add_argument("config", help="JSON run configuration")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--threads", type=int, default=None)

    s = sub.add_parser("simulate", help="write a simulated dataset as CSV")
    s.add_argument("model", choices=("spatial", "furseal"))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=".", help="output directory")
    s.add_argument("--n", type=int, default=None, help="observations (spatial) or population size (furseal)")
    s.add_argument("--m", type=int, default=PAPER_M, help="prediction sites, a perfect square (spatial)")
    s.add_argument("--sigma2", type=float, default=PAPER_PARAMS[0])
    s.add_argument("--rho", type=float, default=PAPER_PARAMS[1])
    s.add_argument("--nu", type=float, default=PAPER_PARAMS[2])
    s.add_argument("--priors", type=float, nargs=6, default=list(PAPER_PRIORS), metavar=("A", "B", "L0", "U0", "L1", "U1"))
    s.add_argument("--visits", type=int, default=7, help="capture occasions (furseal)")
    s.add_argument("--u1", type=float, default=0.0, help="logit mean capture probability (furseal)")
    s.add_argument("--u2", type=float, default=U2_DEFAULT, help="log capture-probability concentration (furseal)")
    return parser


def cmd_grid(args):
    if args.dim < 1:
        raise ConfigError("--dim must be at least 1")
    if args.level < args.dim:
        raise ConfigError("--level must be at least --dim")
    family = NESTED if args.family == "nested" else CLASSICAL
    grid = sparse_grid(args.dim, args.level, family)
    text = write_grid_csv(grid)
    if args.out:
        Path(args.out).write_text(text)
        print(f"nodes: {grid.size}")
    else:
        sys.stdout.write(text)
        print(f"nodes: {grid.size}", file=sys.stderr)
    return EXIT_OK


def _run(args, runner, report_name):
    cfg = pipeline.load_config(args.config)
    out_dir = Path(args.out) if args.out else cfg.path(cfg.output_dir)
    threads = pipeline.thread_count(args.threads)
    try:
        result = runner(cfg, threads)
    except BisqueError as err:
        failure = {"model": cfg.model, "error": {"type": type(err).__name__, "message": str(err), **_fields(err)}}
        pipeline.write_outputs(out_dir, {}, failure, {}, report_name)
        print(f"bisque: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    report, files, timings = result
    pipeline.write_outputs(out_dir, files, report, timings, report_name)
    return report, timings, out_dir


def _fields(err):
    keep = {}
    for key, value in vars(err).items():
        try:
            json.dumps(pipeline.to_jsonable(value))
        except TypeError:
            continue
        keep[key] = pipeline.to_jsonable(value)
    return keep


def cmd_infer(args):
    def runner(cfg, threads):
        report, files, _, timings = pipeline.run_inference(cfg, n_jobs=threads)
        return report, files, timings

    out = _run(args, runner, "report.json")
    if isinstance(out, int):
        return out
    report, timings, out_dir = out
    print(f"wrote {out_dir} (converged: {str(report['converged']).lower()}, {timings['total']:.2f} s)")
    return EXIT_OK if report["converged"] else EXIT_NUMERICAL


def cmd_oracle(args):
    def runner(cfg, threads):
        return pipeline.run_oracle(cfg, n_jobs=threads)

    cfg = pipeline.load_config(args.config)
    pipeline._oracle_settings(cfg)
    out = _run(args, runner, "comparison.json")
    if isinstance(out, int):
        return out
    report, timings, out_dir = out
    for key, value in sorted(report["comparison"].items()):
        print(f"{key}: {json.dumps(pipeline.to_jsonable(value), sort_keys=True)}")
    print(f"runtime ratio (oracle / BISQuE): {timings['runtime_ratio']:.1f}")
    print(f"wrote {out_dir}")
    return EXIT_OK


def cmd_simulate(args):
    out = Path(args.out)
    if args.model == "spatial":
        n = PAPER_N if args.n is None else args.n
        if n < 1 or args.m < 1:
            raise ConfigError("--n and --m must be positive")
        try:
            cfg = simulate_spatial(
                seed=args.seed, N=n, M=args.m, sigma2=args.sigma2, rho=args.rho, nu_smooth=args.nu,
                priors=tuple(args.priors),
            )
        except ValueError as err:
            raise ConfigError(str(err)) from err
        out.mkdir(parents=True, exist_ok=True)
        obs, pred = out / f"spatial_observations_seed{args.seed}.csv", out / f"spatial_predictions_seed{args.seed}.csv"
        obs.write_text(cfg.observations_csv())
        pred.write_text(cfg.prediction_csv())
        meta = {"model": "spatial", "seed": args.seed, "n": n, "m": args.m,
                "params": [args.sigma2, args.rho, args.nu], "priors": list(args.priors)}
        files = [obs, pred]
    else:
        n = 100 if args.n is None else args.n
        if n < 1 or args.visits < 1:
            raise ConfigError("--n and --visits must be positive")
        fx = simulate_furseal(seed=args.seed, N=n, I=args.visits, U1=args.u1, U2=args.u2)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"furseal_seed{args.seed}.csv"
        path.write_text(fx.data.to_csv())
        meta = {"model": "furseal", "seed": args.seed, "N": n, "visits": args.visits, "U1": args.u1, "U2": args.u2,
                "alpha": fx.alpha}
        files = [path]
    meta_path = out / f"{args.model}_seed{args.seed}.json"
    meta_path.write_text(dump_json(meta))
    for f in files + [meta_path]:
        print(f"wrote {f}")
    return EXIT_OK


COMMANDS = {"grid": cmd_grid, "infer": cmd_infer, "simulate": cmd_simulate, "oracle": cmd_oracle}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"bisque: configuration error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except BisqueError as err:
        print(f"bisque: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
