"""Command line interface.

Subcommands::

    homsgd run <config>            full experiment -> trajectories/metrics/limits CSVs
    homsgd diagnose <config>       resolvent audits -> diagnostics.csv
    homsgd compare <csv> [<csv>..] pointwise comparison of trajectory files
    homsgd threshold <config>      convergence threshold and regime

Exit codes: 0 success, 2 configuration or input error, 3 I/O error.
``HOMSGD_WORKERS`` sets the number of worker threads.
"""

import argparse
import logging
import math
import sys

from homsgd import __version__
from homsgd.config import load_config
from homsgd.errors import ConfigError, HomsgdError, InputError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3

log = logging.getLogger("homsgd")


def _cmd_run(args):
    from homsgd.experiments import run_experiment

    cfg = load_config(args.config)
    res = run_experiment(cfg, output_dir=args.output)
    for row in res.limits:
        label, thr, gl, psi_inf, excess = row[:5]
        log.info("%s: threshold=%.6g gamma_limit=%.6g psi_inf=%.6g excess_inf=%.6g", label, thr, gl, psi_inf, excess)
    diverged = sum(t.diverged for t in res.sgd) + sum(t.diverged for t in res.hsgd)
    if diverged or res.theory.diverged:
        log.warning("divergence recorded: %d simulator runs, theory=%s", diverged, res.theory.diverged)
    print(f"wrote {res.output_dir}")
    return EXIT_OK


def _cmd_diagnose(args):
    from homsgd.experiments import run_experiment

    cfg = load_config(args.config)
    res = run_experiment(cfg, output_dir=args.output, diagnostics_only=True)
    for check, quantity, value, bound, passed, _ in res.diagnostics:
        print(f"{check:15s} {quantity:16s} {value:12.6g} bound {bound:10.6g}  {'pass' if passed else 'FAIL'}")
    print(f"wrote {res.output_dir / 'diagnostics.csv'}")
    return EXIT_OK


def _cmd_compare(args):
    from homsgd.experiments import COMPARE_HEADER, compare_files, write_csv

    rows = compare_files(args.csv)
    write_csv(args.output, COMPARE_HEADER, rows)
    for left, right, label, sup, mean in rows:
        print(f"{label:16s} sup={sup:.6g} mean={mean:.6g}  {left} vs {right}")
    print(f"wrote {args.output}")
    return EXIT_OK


def _cmd_threshold(args):
    from homsgd.experiments import build_instance, threshold_report

    cfg = load_config(args.config)
    rep = threshold_report(build_instance(cfg), cfg.schedule)
    thr = rep["threshold"]
    print(f"threshold   {'inf' if math.isinf(thr) else repr(thr)}")
    print(f"gamma_limit {rep['gamma_limit']!r}")
    print(f"kernel_mass {rep['kernel_mass']!r}")
    print(f"regime      {rep['regime']}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="homsgd", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment config (TOML or manifest.json)")
    p.add_argument("config")
    p.add_argument("-o", "--output", help="output directory (overrides output_dir)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("diagnose", help="resolvent delocalization audits only")
    p.add_argument("config")
    p.add_argument("-o", "--output", help="output directory (overrides output_dir)")
    p.set_defaults(func=_cmd_diagnose)

    p = sub.add_parser("compare", help="compare trajectories.csv files")
    p.add_argument("csv", nargs="+")
    p.add_argument("-o", "--output", default="metrics.csv", help="where to write the comparison (default: %(default)s)")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("threshold", help="print the convergence threshold for a config")
    p.add_argument("config")
    p.set_defaults(func=_cmd_threshold)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InputError, HomsgdError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
