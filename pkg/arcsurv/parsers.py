"""Argument parsers."""


import argparse

from arcsurv import __version__
from arcsurv.mcmc import load_presets


def add_run_group(parser, seed=True, threads=True, preset=True):
    group = parser.add_argument_group("Run options")
    group.add_argument(
        "-c",
        "--config",
        required=True,
        help="JSON run configuration",
    )
    group.add_argument(
        "-o",
        "--out",
        required=True,
        help="Output directory (created if missing)",
    )
    if seed:
        group.add_argument(
            "--seed",
            type=int,
            help="Master seed, overrides the configuration",
        )
    if threads:
        group.add_argument(
            "--threads",
            type=int,
            help="Worker processes for running chains (def. 1, or the user default)",
        )
    if preset:
        group.add_argument(
            "--preset",
            choices=sorted(load_presets()),
            help="Named sampler settings; explicit sampler keys in the configuration"
            " take precedence",
        )


def add_data_group(parser, required=True):
    group = parser.add_argument_group("Data")
    group.add_argument(
        "-l",
        "--longitudinal",
        required=required,
        help="Long-format measurements with columns id, time, z",
    )
    group.add_argument(
        "-s",
        "--survival",
        required=required,
        help="One row per subject with columns id, t, delta and the covariates",
    )


def add_simulate_subparser(subparsers):
    parser = subparsers.add_parser(
        "simulate",
        help="Simulate a joint longitudinal and survival dataset",
        description="Simulate a dataset from a model, generating values and a design.",
        epilog="Usage examples\n--------------\n"
        "Simulate a Model I dataset:\n"
        "  $ arcsurv simulate -c configs/model1_simulate.json -o sim1\n"
        "  Output: sim1/longitudinal.csv sim1/survival.csv sim1/truth.json\n\n",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    add_run_group(parser, threads=False, preset=False)


def add_fit_subparser(subparsers):
    parser = subparsers.add_parser(
        "fit",
        help="Fit a joint model by MCMC",
        description="Fit a joint model to longitudinal and survival tables.",
        epilog="Usage examples\n--------------\n"
        "Fit Model I to a simulated dataset with the simulation study settings:\n"
        "  $ arcsurv fit -c configs/model1_fit.json \\\n"
        "      -l sim1/longitudinal.csv -s sim1/survival.csv \\\n"
        "      --preset model1-sim -o fit1\n\n"
        "Run three chains in parallel:\n"
        "  $ arcsurv fit -c configs/cpcra_fit.json \\\n"
        "      -l cd4.csv -s survival.csv --preset table2 --threads 3 -o cpcra\n\n",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    add_data_group(parser)
    add_run_group(parser)


def add_study_subparser(subparsers):
    parser = subparsers.add_parser(
        "study",
        help="Run a coverage study",
        description="Repeatedly simulate and fit, scoring 95%% credible interval coverage.",
        epilog="Usage examples\n--------------\n"
        "  $ arcsurv study -c configs/model1_study.json --preset model1-desk -o study1\n\n",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    add_run_group(parser)


def add_curves_subparser(subparsers):
    parser = subparsers.add_parser(
        "curves",
        help="Tabulate fitted curves and risk flags",
        description="Write fitted population curves at a covariate profile, per-subject"
        " arc lengths with risk flags and, optionally, individual trajectories.",
        epilog="Usage examples\n--------------\n"
        "  $ arcsurv curves -c configs/curves.json -f fit1 -o curves1\n\n",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument(
        "-f",
        "--fit",
        required=True,
        help="Output directory of a completed arcsurv fit",
    )
    add_data_group(parser, required=False)
    add_run_group(parser, seed=False, threads=False, preset=False)


def add_config_subparser(subparsers):
    parser = subparsers.add_parser(
        "config",
        help="Configure arcsurv",
        description="Set user defaults, used when a run configuration leaves them unset",
        epilog=(
            "Example usage\n-------------\n"
            "Use 400 quadrature intervals and 4 processes by default:\n"
            " $ arcsurv config --quad_points 400 --threads 4\n\n"
        ),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument(
        "--quad_points",
        help="Quadrature sub-intervals per subject for Model II (def. 200)",
        type=int,
    )
    parser.add_argument(
        "--threads",
        help="Worker processes for running chains (def. 1)",
        type=int,
    )


def get_parser():
    parser = argparse.ArgumentParser(
        "arcsurv",
        description="arcsurv: Bayesian joint models of longitudinal and survival data"
        " where the hazard depends on the arc length of the latent trajectory.",
    )
    parser.add_argument(
        "--version", action="version", version="%(prog)s " + __version__
    )
    parser.add_argument(
        "-v",
        "--verbose",
        action="store_true",
        help="Log debugging messages",
    )
    subparsers = parser.add_subparsers(dest="command")
    add_simulate_subparser(subparsers)
    add_fit_subparser(subparsers)
    add_study_subparser(subparsers)
    add_curves_subparser(subparsers)
    add_config_subparser(subparsers)
    return parser


def parse_args(args):
    parser = get_parser()
    args = parser.parse_args(args)

    if not args.command:
        parser.print_help()
        parser.exit(1)

    if args.command == "curves" and bool(args.longitudinal) != bool(args.survival):
        parser.error("--longitudinal and --survival must be given together")

    return args
