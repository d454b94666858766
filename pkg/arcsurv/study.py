"""Simulation studies: simulate, fit and score interval coverage, many times."""

import copy
import logging

import numpy as np

from arcsurv import diagnostics, mcmc, simulate
from arcsurv.errors import InitialisationError, NumericalError, SimulationError, StudyError
from arcsurv.mcmc import SamplerConfig
from arcsurv.models import population_names


LOG = logging.getLogger(__name__)


def replicate_seeds(seed, replicates):
    """(simulation seed, sampler seed) per replicate, derived from the master seed."""
    states = np.random.SeedSequence(seed).generate_state(2 * replicates, dtype=np.uint64)
    return [(int(states[2 * r]), int(states[2 * r + 1])) for r in range(replicates)]


def truth_values(spec, truth):
    return dict(zip(population_names(spec), truth.population_values(spec)))


def run_replicate(design, sampler_cfg, simulation_seed, sampler_seed):
    """Simulates and fits one dataset.

    Returns:
        tuple: (SummaryRow per population parameter, sampler warnings)
    """
    design = copy.copy(design)
    design.seed = simulation_seed
    dataset = simulate.generate_dataset(design)
    cfg = SamplerConfig.from_dict({**sampler_cfg.to_dict(), "seed": sampler_seed})
    samples = mcmc.run(design.spec, dataset.subjects, cfg)
    return diagnostics.summarize(samples), samples.warnings


def run_study(design, sampler_cfg, replicates, seed=0, max_failure_fraction=0.2):
    """Coverage study of the 95% credible intervals.

    Parameters:
        design (SimulationDesign): Generating design; its seed is replaced
            per replicate.
        sampler_cfg (SamplerConfig): Chain settings; seed replaced per replicate.
        replicates (int): Number of datasets.
        seed (int): Master seed.
        max_failure_fraction (float): Largest tolerated fraction of failed replicates.

    Returns:
        tuple: (CoverageReport, list of per-replicate records)

    Raises:
        StudyError: If too many replicates failed.
    """
    if replicates < 1:
        raise StudyError("A study needs at least one replicate")
    truth = truth_values(design.spec, design.truth)
    summaries, records = [], []
    for r, (simulation_seed, sampler_seed) in enumerate(replicate_seeds(seed, replicates)):
        LOG.info("Replicate %i/%i", r + 1, replicates)
        record = {
            "replicate": r + 1,
            "simulation_seed": simulation_seed,
            "sampler_seed": sampler_seed,
        }
        try:
            rows, warnings = run_replicate(design, sampler_cfg, simulation_seed, sampler_seed)
        except (SimulationError, InitialisationError, NumericalError) as exc:
            LOG.warning("Replicate %i failed and is excluded: %s", r + 1, exc)
            record.update(status="failed", error=str(exc))
            summaries.append(None)
        else:
            record.update(
                status="ok",
                warnings=warnings,
                covered={row.name: row.covers(truth[row.name]) for row in rows},
                summary=[row.to_dict() for row in rows],
            )
            summaries.append(rows)
        records.append(record)

    failures = sum(rows is None for rows in summaries)
    if failures > max_failure_fraction * replicates:
        raise StudyError(
            f"{failures} of {replicates} replicates failed"
            f" (limit {max_failure_fraction:.0%})"
        )
    report = diagnostics.score_coverage(summaries, truth)
    LOG.info("Scored %i replicates, %i excluded", report.replicates, report.excluded)
    return report, records
