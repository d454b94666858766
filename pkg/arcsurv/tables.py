"""Reading and writing the CSV tables.

Input is two long-format tables: `longitudinal.csv` (id, time, z), one row per
measurement, and `survival.csv` (id, t, delta, covariates...), one row per
subject. Row numbers in error messages count the header as row 1.
"""

import logging
import os
import tempfile

from collections import Counter
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pandas as pd

from arcsurv.errors import ConfigError, IngestionError
from arcsurv.models import SubjectContainer, SubjectRecord


LOG = logging.getLogger(__name__)

LONGITUDINAL_COLUMNS = ("id", "time", "z")
SURVIVAL_COLUMNS = ("id", "t", "delta")
TRANSFORMS = (None, "sqrt")


@contextmanager
def atomic_write(path, mode="w"):
    """Writes to a temporary file next to path, renamed over it on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle, temp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(handle, mode, newline="" if "b" not in mode else None) as fp:
            yield fp
        os.replace(temp, path)
    except BaseException:
        if os.path.exists(temp):
            os.remove(temp)
        raise


def write_frame(frame, path):
    with atomic_write(path) as fp:
        frame.to_csv(fp, index=False)


def _row(index):
    return int(index) + 2


def _read(path, name, required, problems):
    try:
        frame = pd.read_csv(path, dtype={"id": str}, skipinitialspace=True)
    except FileNotFoundError:
        raise ConfigError(f"{name} not found: {path}") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise IngestionError([(name, 1, f"could not parse table: {exc}")]) from None
    frame.columns = [str(column).strip() for column in frame.columns]
    missing = [column for column in required if column not in frame.columns]
    if missing:
        problems.append((name, 1, f"missing column(s) {', '.join(missing)}"))
    return frame


def _numeric(frame, column, name, problems):
    values = pd.to_numeric(frame[column], errors="coerce")
    bad = values.isna() & frame[column].notna()
    for index in frame.index[bad]:
        problems.append((name, _row(index), f"{column}={frame.at[index, column]!r} is not a number"))
    return values


def _encode(frame, column, encodings, name, problems):
    if column not in encodings:
        values = _numeric(frame, column, name, problems)
    else:
        mapping = {str(level): value for level, value in encodings[column].items()}
        raw = frame[column].astype(str).str.strip()
        values = raw.map(mapping).astype(float)
        for index in frame.index[values.isna() & frame[column].notna()]:
            problems.append((name, _row(index), f"{column}={raw[index]!r} has no encoding"))
    for index in frame.index[frame[column].isna()]:
        problems.append((name, _row(index), f"missing value of covariate {column}"))
    return values


def read_survival(path, covariates=None, encodings=None, n_covariates=None):
    """Parses survival.csv.

    Parameters:
        path (str): Path to the table.
        covariates (list): Covariate columns in model order; default x1..xP.
        encodings (dict): Column -> {level: number} for categorical covariates.
        n_covariates (int): P, used for the default covariate names.

    Returns:
        tuple: (frame with id, t, delta and covariate columns, covariate names)

    Raises:
        IngestionError: Listing every malformed row.
    """
    name = Path(path).name
    problems = []
    encodings = encodings or {}
    if covariates is None:
        covariates = [f"x{p + 1}" for p in range(n_covariates or 0)]
    frame = _read(path, name, [*SURVIVAL_COLUMNS, *covariates], problems)
    if problems:
        raise IngestionError(problems)

    for index in frame.index[frame["id"].isna()]:
        problems.append((name, _row(index), "missing id"))
    for index in frame.index[frame["id"].duplicated() & frame["id"].notna()]:
        problems.append((name, _row(index), f"duplicate id {frame.at[index, 'id']!r}"))

    t = _numeric(frame, "t", name, problems)
    for index in frame.index[~(t > 0) & t.notna()]:
        problems.append((name, _row(index), f"observed time t={t[index]} must be positive"))
    for index in frame.index[frame["t"].isna()]:
        problems.append((name, _row(index), "missing observed time t"))

    delta = _numeric(frame, "delta", name, problems)
    for index in frame.index[~delta.isin([0, 1]) & frame["delta"].notna()]:
        if pd.notna(delta[index]):
            problems.append((name, _row(index), f"delta={delta[index]} is not 0 or 1"))
    for index in frame.index[frame["delta"].isna()]:
        problems.append((name, _row(index), "missing delta"))

    result = pd.DataFrame({"id": frame["id"].str.strip(), "t": t, "delta": delta})
    for column in covariates:
        result[column] = _encode(frame, column, encodings, name, problems)

    if problems:
        raise IngestionError(sorted(problems, key=lambda p: p[1]))
    result["delta"] = result["delta"].astype(int)
    return result, list(covariates)


def read_longitudinal(path, transform=None):
    """Parses longitudinal.csv, dropping rows with a missing z.

    Returns:
        tuple: (frame with id, time, z and the source row number, rows dropped)

    Raises:
        IngestionError: Listing every malformed row.
    """
    if transform not in TRANSFORMS:
        raise ConfigError(f"expected one of {TRANSFORMS}", "/data/transform")
    name = Path(path).name
    problems = []
    frame = _read(path, name, LONGITUDINAL_COLUMNS, problems)
    if problems:
        raise IngestionError(problems)

    for index in frame.index[frame["id"].isna()]:
        problems.append((name, _row(index), "missing id"))
    time = _numeric(frame, "time", name, problems)
    for index in frame.index[frame["time"].isna()]:
        problems.append((name, _row(index), "missing measurement time"))
    for index in frame.index[time < 0]:
        problems.append((name, _row(index), f"negative measurement time {time[index]}"))
    z = _numeric(frame, "z", name, problems)

    missing_z = frame["z"].isna()
    dropped = int(missing_z.sum())
    if dropped:
        LOG.warning("Dropped %i row(s) of %s with a missing z", dropped, name)

    if transform == "sqrt":
        for index in frame.index[(z < 0) & ~missing_z]:
            problems.append((name, _row(index), f"z={z[index]} is negative, cannot take sqrt"))
        z = np.sqrt(z.clip(lower=0))

    result = pd.DataFrame(
        {
            "id": frame["id"].str.strip(),
            "time": time,
            "z": z,
            "row": frame.index.map(_row),
        }
    )[~missing_z]

    for _, group in result.groupby("id", sort=False):
        unsorted = group["time"].diff() < 0
        for row in group["row"][unsorted]:
            problems.append((name, int(row), "measurement times are not sorted within subject"))

    if problems:
        raise IngestionError(sorted(problems, key=lambda p: p[1]), dropped)
    return result, dropped


def read_dataset(longitudinal_path, survival_path, covariates=None, encodings=None,
                 n_covariates=None, transform=None):
    """Parses and cross-checks both tables into a SubjectContainer.

    Subjects are returned in survival.csv order. Fitting should only start
    once this returns: any malformed row raises, listing every problem found.

    Raises:
        IngestionError: On orphan ids, measurements after t, subjects without
            measurements and every per-table problem.
    """
    survival, covariates = read_survival(
        survival_path, covariates=covariates, encodings=encodings, n_covariates=n_covariates
    )
    longitudinal, dropped = read_longitudinal(longitudinal_path, transform=transform)
    long_name = Path(longitudinal_path).name
    surv_name = Path(survival_path).name

    problems = []
    known = set(survival["id"])
    for row, id in zip(longitudinal["row"], longitudinal["id"]):
        if id not in known:
            problems.append((long_name, int(row), f"id {id!r} not in {surv_name}"))

    groups = {id: group for id, group in longitudinal.groupby("id", sort=False)}
    subjects = SubjectContainer()
    for index, record in survival.iterrows():
        group = groups.get(record["id"])
        if group is None:
            problems.append((surv_name, _row(index), f"subject {record['id']!r} has no measurements"))
            continue
        late = group["time"] > record["t"]
        for row in group["row"][late]:
            problems.append(
                (long_name, int(row), f"measurement after observed time t={record['t']}")
            )
        subjects.append(
            SubjectRecord(
                id=record["id"],
                t=record["t"],
                delta=record["delta"],
                x=record[covariates].to_numpy(dtype=float),
                times=group["time"].to_numpy(dtype=float),
                z=group["z"].to_numpy(dtype=float),
            )
        )
    if problems:
        raise IngestionError(problems, dropped)

    summary = describe_dataset(subjects)
    LOG.info(
        "Read %i subjects, %i observations, %i events",
        summary["subjects"], summary["observations"], summary["events"],
    )
    LOG.info("Subjects by number of measurements: %s", summary["measurement_counts"])
    return subjects, dropped


def describe_dataset(subjects):
    """Counts of subjects, observations and events, and subjects per measurement count."""
    counts = Counter(subject.n_measurements for subject in subjects)
    return {
        "subjects": len(subjects),
        "observations": int(sum(subject.n_measurements for subject in subjects)),
        "events": int(sum(subject.delta for subject in subjects)),
        "measurement_counts": {int(k): counts[k] for k in sorted(counts)},
    }


def dataset_frames(subjects):
    """(longitudinal, survival) DataFrames in the input CSV layout."""
    longitudinal = pd.DataFrame(
        [
            {"id": subject.id, "time": time, "z": z}
            for subject in subjects
            for time, z in zip(subject.times, subject.z)
        ],
        columns=list(LONGITUDINAL_COLUMNS),
    )
    P = subjects.n_covariates
    survival = pd.DataFrame(
        [
            {
                "id": subject.id,
                "t": subject.t,
                "delta": subject.delta,
                **{f"x{p + 1}": value for p, value in enumerate(subject.x)},
            }
            for subject in subjects
        ],
        columns=[*SURVIVAL_COLUMNS, *(f"x{p + 1}" for p in range(P))],
    )
    return longitudinal, survival


def write_dataset(subjects, out_dir):
    """Writes longitudinal.csv and survival.csv to out_dir."""
    out_dir = Path(out_dir)
    longitudinal, survival = dataset_frames(subjects)
    write_frame(longitudinal, out_dir / "longitudinal.csv")
    write_frame(survival, out_dir / "survival.csv")
    LOG.info("Wrote %i subjects to %s", len(subjects), out_dir)


def chain_frame(samples, chain):
    """Retained draws of one chain, one row per draw."""
    frame = pd.DataFrame(samples.draws[chain], columns=samples.names)
    frame.insert(0, "draw", np.arange(1, samples.n_draws + 1))
    frame["deviance"] = samples.deviance[chain]
    frame["log_posterior"] = samples.log_posterior[chain]
    return frame


def write_chains(samples, out_dir):
    """Writes chains/chain_<k>.csv for every chain."""
    chain_dir = Path(out_dir) / "chains"
    paths = []
    for chain in range(samples.n_chains):
        path = chain_dir / f"chain_{chain + 1}.csv"
        write_frame(chain_frame(samples, chain), path)
        paths.append(path)
    return paths


def write_random_effects(samples, path):
    b = samples.random_effect_means()
    frame = pd.DataFrame(b, columns=[f"b{j + 1}" for j in range(b.shape[1])])
    frame.insert(0, "id", samples.subject_ids)
    write_frame(frame, path)


def read_random_effects(path):
    """Returns (ids, subjects x K_re array) from random_effects.csv."""
    frame = pd.read_csv(path, dtype={"id": str})
    return frame["id"].tolist(), frame.drop(columns="id").to_numpy(dtype=float)
