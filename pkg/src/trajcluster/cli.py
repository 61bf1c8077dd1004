"""Command-line front end.

Subcommands: ``generate`` (synthetic data), ``fit`` (one method at one G),
``sweep`` (one method over a range of G) and ``assign`` (cluster new
trajectories with a saved model). Every run writes the tool version and the
fully resolved configuration to stderr as one JSON line; saving that line to
a file and passing it to ``--config`` replays the run.

Exit status: 0 when all requested files were written, 1 on data or fitting
errors, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import secrets
import sys
from typing import Optional, Sequence

from . import __version__

log = logging.getLogger("trajcluster")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
THREAD_ENV = "TRAJCLUSTER_THREADS"
_BLAS_ENV = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

# options each subcommand must end up with, from argv or a replayed config
REQUIRED = {
    "generate": ("seed", "out"),
    "fit": ("method", "k", "input", "out"),
    "sweep": ("method", "input", "report"),
    "assign": ("model", "input", "out"),
}
# options that are not part of the replayable configuration
_GLOBAL = {"command", "config", "verbose"}


class UsageError(Exception):
    pass


def _add_method_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=("kml", "llpa", "ahc", "kmedoids", "features", "gbtm", "gmm"))
    p.add_argument("--starts", type=int, default=20, help="random starts per fit (default 20)")
    p.add_argument("--seed", type=int, help="master seed (default: random, echoed)")
    p.add_argument("--in", dest="input", metavar="CSV", help="long-format subject_id,time,value file")
    p.add_argument("--linkage", default="average", choices=("average", "single", "complete", "ward", "centroid"))
    p.add_argument("--basis", default="poly:2", help="poly:D or bspline:3:K (default poly:2)")
    p.add_argument("--re", default="intercept", choices=("intercept", "basis", "basis-full"),
                   help="GMM random effects")
    p.add_argument("--variance", default="free", choices=("free", "tied"),
                   help="per-cluster (free) or shared (tied) variances")
    p.add_argument("--re-tied", action="store_true", help="share the GMM random-effect covariance")
    p.add_argument("--features", default="b0,b1,b2,logN", help="comma-separated b0,b1,b2,sd,logN,ac1")
    p.add_argument("--max-iter", type=int, help="EM / Lloyd iteration cap")
    p.add_argument("--bic-n", default="observations", choices=("observations", "subjects"),
                   help="BIC sample size")
    p.add_argument("--time-unit", default="raw-days", choices=("raw-days", "normalized"))
    p.add_argument("--attempts", metavar="CSV",
                   help="per-subject series on which the logN feature counts attempts (e.g. daily data)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trajcluster", description="Clustering of longitudinal trajectories.")
    parser.add_argument("--version", action="version", version=f"trajcluster {__version__}")
    parser.add_argument("--threads", type=int, help=f"worker thread cap (env {THREAD_ENV})")
    parser.add_argument("--config", metavar="JSON", help="replay a configuration echoed by an earlier run")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="{generate,fit,sweep,assign}")

    g = sub.add_parser("generate", help="simulate synthetic adherence data")
    g.add_argument("--n", type=int, default=500, help="patients (default 500)")
    g.add_argument("--days", type=int, default=361, help="days of follow-up (default 361)")
    g.add_argument("--block", type=int, default=14, help="block length in days (default 14)")
    g.add_argument("--seed", type=int, help="seed (required)")
    g.add_argument("--out", help="data CSV")
    g.add_argument("--truth", help="true membership CSV")
    g.add_argument("--daily", action="store_true", help="write daily values instead of block means")
    g.add_argument("--daily-out", metavar="CSV", help="also write the daily values")
    g.add_argument("--timestamp", default="start", choices=("start", "midpoint"))

    f = sub.add_parser("fit", help="fit one method with K clusters")
    _add_method_options(f)
    f.add_argument("--k", type=int, help="number of clusters")
    f.add_argument("--out", metavar="JSON", help="model document")
    f.add_argument("--assign", metavar="CSV", help="per-subject assignment")

    s = sub.add_parser("sweep", help="fit one method over a range of K")
    _add_method_options(s)
    s.add_argument("--kmin", type=int, default=1)
    s.add_argument("--kmax", type=int, default=8)
    s.add_argument("--report", metavar="CSV", help="score table")
    s.add_argument("--json", metavar="JSON", help="score table as JSON")
    s.add_argument("--curves", metavar="CSV", help="cluster mean curves (long format)")
    s.add_argument("--choose", choices=("bic-min", "asw-max", "elbow"), help="report a chosen K")
    s.add_argument("--wall-time", action="store_true", help="include wall time (not reproducible)")

    a = sub.add_parser("assign", help="cluster new trajectories with a saved model")
    a.add_argument("--model", metavar="JSON")
    a.add_argument("--in", dest="input", metavar="CSV")
    a.add_argument("--out", metavar="CSV")
    a.add_argument("--time-unit", default="raw-days", choices=("raw-days", "normalized"))
    a.add_argument("--attempts", metavar="CSV", help="attempt series for feature models fitted with one")
    for p in (g, f, s, a):
        # also accepted after the subcommand
        p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def parse(argv: Sequence[str]) -> argparse.Namespace:
    """Parse ``argv``, filling unset options from ``--config`` when given."""
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    argv = list(argv)
    if known.config:
        try:
            with open(known.config, encoding="utf-8") as fh:
                replay = json.load(fh)
            command, options = replay["command"], replay["options"]
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise UsageError(f"cannot read config {known.config}: {e}") from None
        if command not in REQUIRED:
            raise UsageError(f"config names unknown command {command!r}")
        if not any(a in REQUIRED for a in argv):
            argv.append(command)
        sp = _subparser(parser, command)
        dests = {a.dest for a in sp._actions}
        unknown = set(options) - dests - {"threads"}
        if unknown:
            raise UsageError(f"config has unknown option(s): {', '.join(sorted(unknown))}")
        sp.set_defaults(**{k: v for k, v in options.items() if k != "threads"})
        if options.get("threads") is not None:
            parser.set_defaults(threads=options["threads"])
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        raise UsageError("a subcommand is required")
    missing = [o for o in REQUIRED[args.command] if getattr(args, o) is None
               and not (o == "seed" and args.command != "generate")]
    if missing:
        _subparser(parser, args.command).print_usage(sys.stderr)
        raise UsageError("missing required option(s): " + ", ".join("--" + _flag(m) for m in missing))
    return args


def _flag(dest: str) -> str:
    return {"input": "in"}.get(dest, dest.replace("_", "-"))


def _resolve_threads(args) -> int:
    n = args.threads
    if n is None:
        env = os.environ.get(THREAD_ENV)
        try:
            n = int(env) if env else 1
        except ValueError:
            raise UsageError(f"{THREAD_ENV} must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("--threads must be >= 1")
    for var in _BLAS_ENV:
        os.environ.setdefault(var, str(n))
    return n


def _echo(args) -> None:
    options = {k: v for k, v in sorted(vars(args).items()) if k not in _GLOBAL}
    doc = {"software": "trajcluster", "version": __version__, "command": args.command, "options": options}
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)


def _write_labels(path, ids, labels, probs=None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        G = 0 if probs is None else probs.shape[1]
        w.writerow(["subject_id", "cluster"] + [f"p_{g + 1}" for g in range(G)])
        for i, sid in enumerate(ids):
            row = [sid, int(labels[i])]
            if probs is not None:
                row += [repr(float(p)) for p in probs[i]]
            w.writerow(row)


def _method_config(args):
    from .methods import MethodConfig

    return MethodConfig(args.method, n_starts=args.starts, linkage=args.linkage, basis=args.basis, re=args.re,
                        variance=args.variance, re_tied=args.re_tied, features=args.features,
                        max_iter=args.max_iter, bic_n=args.bic_n)


def _attempts(args):
    from .core import load_trajectories

    return load_trajectories(args.attempts, args.time_unit) if args.attempts else None


def cmd_generate(args) -> int:
    from .synthgen import GeneratorConfig, default_specs, downsample, generate
    from .core import write_trajectories

    cfg = GeneratorConfig(n_patients=args.n, n_days=args.days, block_days=args.block, seed=args.seed)
    daily, truth = generate(cfg)
    data = daily if args.daily else downsample(daily, cfg.block_days, timestamp=args.timestamp)
    write_trajectories(data, args.out)
    if args.daily_out:
        write_trajectories(daily, args.daily_out)
    if args.truth:
        names = [s.name for s in default_specs()]
        with open(args.truth, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject_id", "cluster", "cluster_name"])
            for sid, g in zip(data.subject_ids, truth.labels.tolist()):
                w.writerow([sid, g, names[g - 1]])
    print(f"wrote {len(data)} subjects, {data.n_obs} observations to {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    from .core import load_trajectories
    from .methods import Prepared, dump_document, fit

    ds = load_trajectories(args.input, args.time_unit)
    prep = Prepared(ds, _method_config(args), _attempts(args))
    out = fit(prep, args.k, args.seed)
    doc = dict(out.document)
    doc["seed"] = args.seed
    dump_document(doc, args.out)
    if args.assign:
        probs = None if out.posterior is None else out.posterior.probs
        _write_labels(args.assign, ds.subject_ids, out.partition.labels, probs)
    sizes = " ".join(str(int(s)) for s in out.partition.sizes())
    line = f"{args.method} G={args.k} sizes=[{sizes}]"
    if out.loglik is not None:
        line += f" loglik={out.loglik:.4f} n_params={out.n_params} bic={out.bic(args.bic_n):.4f}"
    if out.flags:
        line += " flags=" + ";".join(out.flags)
    print(line)
    return EXIT_OK


def cmd_sweep(args, threads: int) -> int:
    from .core import load_trajectories
    from .selection import sweep, write_curves

    ds = load_trajectories(args.input, args.time_unit)
    report = sweep(ds, _method_config(args), args.kmin, args.kmax, seed=args.seed, chooser=args.choose,
                   threads=threads, attempts=_attempts(args))
    report.to_csv(args.report, wall_time=args.wall_time)
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            fh.write(report.to_json(wall_time=args.wall_time))
    if args.curves:
        write_curves(report, ds, args.curves)
    for r in report.rows:
        if not r.ok:
            print(f"G={r.G} {r.status}", file=sys.stderr)
    if report.chosen_G is not None:
        print(f"{args.choose}: G={report.chosen_G}")
    elif args.choose:
        print(f"{args.choose}: no choice")
    return EXIT_OK


def cmd_assign(args) -> int:
    from .core import load_trajectories
    from .methods import assign

    try:
        with open(args.model, encoding="utf-8") as fh:
            doc = json.load(fh)
    except ValueError as e:
        raise UsageError(f"{args.model} is not a JSON model document: {e}") from None
    ds = load_trajectories(args.input, args.time_unit)
    labels, probs = assign(doc, ds, _attempts(args))
    _write_labels(args.out, ds.subject_ids, labels, probs)
    print(f"assigned {len(ds)} subjects")
    return EXIT_OK


def _cleanup(args) -> None:
    # never leave a partially written primary artifact behind
    for dest in ("out", "report", "assign", "json", "curves", "truth", "daily_out"):
        path = getattr(args, dest, None)
        if path and os.path.exists(path):
            try:
                os.remove(path)
            except OSError:
                pass


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse(argv)
        threads = _resolve_threads(args)
    except UsageError as e:
        print(f"trajcluster: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command in ("fit", "sweep") and args.seed is None:
        args.seed = secrets.randbits(32)
        log.warning("no --seed given; using %d", args.seed)
    args.threads = threads
    _echo(args)
    del args.threads
    from .core import TrajclusterError

    try:
        if args.command == "generate":
            return cmd_generate(args)
        if args.command == "fit":
            return cmd_fit(args)
        if args.command == "sweep":
            return cmd_sweep(args, threads)
        return cmd_assign(args)
    except UsageError as e:
        print(f"trajcluster: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrajclusterError, OSError) as e:
        _cleanup(args)
        print(f"trajcluster: error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
