"""
CLI, main routine
"""

import json
import logging
import sys
import time

from pathlib import Path

import numpy as np

from arcsurv import (
    __version__,
    config,
    diagnostics,
    mcmc,
    parsers,
    simulate,
    study,
    tables,
)
from arcsurv.errors import (
    ConfigError,
    DomainError,
    InitialisationError,
    NumericalError,
    SimulationError,
    StudyError,
)

logging.basicConfig(
    format="[%(asctime)s] %(levelname)s - %(message)s", datefmt="%H:%M:%S"
)

LOG = logging.getLogger("arcsurv")
LOG.setLevel(logging.INFO)

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def write_json(obj, path):
    with tables.atomic_write(path) as fp:
        json.dump(obj, fp, indent=2)
        fp.write("\n")


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args, user_defaults):
    resolved = config.load_run_config(args.config, "simulate", user_defaults)
    if args.seed is not None:
        resolved["design"]["seed"] = args.seed
    spec = config.build_model_spec(resolved["model"])
    truth = config.build_truth(resolved["truth"], spec)
    design = config.build_design(resolved["design"], spec, truth)

    dataset = simulate.generate_dataset(design)

    out = _out_dir(args.out)
    tables.write_dataset(dataset.subjects, out)
    write_json(dataset.to_dict(), out / "truth.json")
    write_json(resolved, out / "config.json")
    write_json(
        {
            "command": "simulate",
            "version": __version__,
            "seed": design.seed,
            "dataset": tables.describe_dataset(dataset.subjects),
            "failures": dataset.failures,
        },
        out / "manifest.json",
    )


def _read_fit_data(data, spec, longitudinal, survival):
    if data["covariates"] is not None and len(data["covariates"]) != spec.n_covariates:
        raise ConfigError(
            f"expected {spec.n_covariates} column names", "/data/covariates"
        )
    return tables.read_dataset(
        longitudinal,
        survival,
        covariates=data["covariates"],
        encodings=data["encodings"],
        n_covariates=spec.n_covariates,
        transform=data["transform"],
    )


def cmd_fit(args, user_defaults):
    resolved = config.load_run_config(args.config, "fit", user_defaults)
    spec = config.build_model_spec(resolved["model"])
    cfg = config.build_sampler(
        resolved["sampler"],
        preset=args.preset,
        seed=args.seed,
        threads=args.threads,
        user_defaults=user_defaults,
    )
    resolved["sampler"] = cfg.to_dict()
    subjects, dropped = _read_fit_data(resolved["data"], spec, args.longitudinal, args.survival)

    LOG.info("Fitting Model %s with %r", spec.kind, cfg)
    start = time.perf_counter()
    samples = mcmc.run(spec, subjects, cfg)
    runtime = time.perf_counter() - start

    rows = diagnostics.summarize(samples)
    dic_value, p_d = diagnostics.dic(samples.deviance)
    text = diagnostics.format_summary(rows, dic_value, p_d)

    out = _out_dir(args.out)
    tables.write_chains(samples, out)
    tables.write_random_effects(samples, out / "random_effects.csv")
    write_json(
        {"parameters": [row.to_dict() for row in rows], "dic": dic_value, "p_d": p_d},
        out / "summary.json",
    )
    with tables.atomic_write(out / "summary.txt") as fp:
        fp.write(text + "\n")
    write_json(resolved, out / "config.json")
    write_json(
        {
            "command": "fit",
            "version": __version__,
            "data": {
                "longitudinal": str(Path(args.longitudinal).resolve()),
                "survival": str(Path(args.survival).resolve()),
                "dropped_rows": dropped,
                **tables.describe_dataset(subjects),
            },
            "runtime_seconds": runtime,
            "dic": dic_value,
            "p_d": p_d,
            **samples.to_dict(),
        },
        out / "manifest.json",
    )
    print(text, flush=True)


def cmd_study(args, user_defaults):
    resolved = config.load_run_config(args.config, "study", user_defaults)
    if args.seed is not None:
        resolved["seed"] = args.seed
    spec = config.build_model_spec(resolved["model"])
    truth = config.build_truth(resolved["truth"], spec)
    design = config.build_design(resolved["design"], spec, truth)
    cfg = config.build_sampler(
        resolved["sampler"],
        preset=args.preset,
        threads=args.threads,
        user_defaults=user_defaults,
    )
    resolved["sampler"] = cfg.to_dict()

    report, records = study.run_study(
        design,
        cfg,
        resolved["replicates"],
        seed=resolved["seed"],
        max_failure_fraction=resolved["max_failure_fraction"],
    )

    out = _out_dir(args.out)
    write_json({**report.to_dict(), "replicate_results": records}, out / "coverage.json")
    write_json(resolved, out / "config.json")
    print(json.dumps(report.to_dict(), indent=2), flush=True)


def cmd_curves(args, user_defaults):
    resolved = config.load_run_config(args.config, "curves", user_defaults)
    fit_dir = Path(args.fit)
    try:
        with open(fit_dir / "config.json") as fp:
            fit_config = json.load(fp)
        with open(fit_dir / "summary.json") as fp:
            summary = json.load(fp)
        with open(fit_dir / "manifest.json") as fp:
            manifest = json.load(fp)
    except FileNotFoundError as exc:
        raise ConfigError(f"not a completed fit directory: {exc}") from None

    fit_config = config.resolve(fit_config, "fit", user_defaults)
    spec = config.build_model_spec(fit_config["model"])
    longitudinal = args.longitudinal or manifest["data"]["longitudinal"]
    survival = args.survival or manifest["data"]["survival"]
    subjects, _ = _read_fit_data(fit_config["data"], spec, longitudinal, survival)

    ids, b_means = tables.read_random_effects(fit_dir / "random_effects.csv")
    if ids != subjects.ids:
        raise ConfigError("random_effects.csv does not match the subjects in the data tables")
    means = {row["name"]: row["mean"] for row in summary["parameters"]}
    grid = resolved["grid"]

    table = diagnostics.curve_table(
        spec,
        means,
        resolved["profile"],
        (grid["t_end"], grid["points"]),
        b_means=b_means,
        subjects=subjects,
        slope_index=resolved["slope_index"],
    )
    risk = resolved["risk"]
    table.subjects["flag"] = diagnostics.flag_high_risk(
        table.subjects["G"],
        table.subjects["t"],
        level=risk["level"],
        G_direction=risk["G"],
        t_direction=risk["t"],
        combine=risk["combine"],
    )
    LOG.info("Flagged %i of %i subjects", table.subjects["flag"].sum(), len(table.subjects))

    out = _out_dir(args.out)
    tables.write_frame(table.population, out / "curves.csv")
    tables.write_frame(table.subjects, out / "subjects.csv")
    if resolved["subjects"]:
        trajectories = diagnostics.subject_trajectories(
            spec, means, b_means, subjects, [str(id) for id in resolved["subjects"]]
        )
        tables.write_frame(trajectories, out / "trajectories.csv")
    write_json(resolved, out / "config.json")


def cmd_config(args, user_defaults):
    config.write_config_file(quad_points=args.quad_points, threads=args.threads)


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "study": cmd_study,
    "curves": cmd_curves,
    "config": cmd_config,
}


def main(argv=None):
    args = parsers.parse_args(sys.argv[1:] if argv is None else argv)
    if args.verbose:
        LOG.setLevel(logging.DEBUG)

    LOG.info("Starting arcsurv %s", args.command)
    try:
        COMMANDS[args.command](args, config.get_user_defaults())
    except (ConfigError, DomainError) as exc:
        LOG.error("%s", exc)
        return EXIT_CONFIG
    except (
        NumericalError,
        SimulationError,
        InitialisationError,
        StudyError,
        np.linalg.LinAlgError,
    ) as exc:
        LOG.error("%s", exc)
        return EXIT_NUMERICAL

    LOG.info("Done!")
    return 0


if __name__ == "__main__":
    sys.exit(main())
