"""User defaults and run configuration documents.

User defaults (quad_points, threads) live in config.ini under the platform
configuration directory and are written by `arcsurv config`. Run
configurations are JSON documents validated against the JSON schemas below
with jsonschema: unknown keys are rejected and every error names the JSON
pointer of the offending key. Schema defaults are merged in afterwards.
"""

import configparser
import copy
import json
import logging

from pathlib import Path

import appdirs
import jsonschema
import numpy as np

from arcsurv.errors import ConfigError
from arcsurv.mcmc import SamplerConfig
from arcsurv.models import ModelSpec, ParameterState, PriorSpec
from arcsurv.simulate import CovariateLaw, SimulationDesign
from arcsurv.splines import SplineConfig


LOG = logging.getLogger(__name__)

USER_KEYS = {"quad_points": int, "threads": int}
DEFAULT_QUAD_POINTS = 200


def get_config_dir():
    path = appdirs.user_config_dir(appname="arcsurv")
    return Path(path)


def get_user_defaults():
    """Values from config.ini; empty if arcsurv config was never run."""
    config_ini = get_config_dir() / "config.ini"
    if not config_ini.exists():
        return {}
    config_parser = configparser.ConfigParser()
    config_parser.read(config_ini)
    if "arcsurv" not in config_parser:
        return {}
    defaults = {}
    for key, cast in USER_KEYS.items():
        value = config_parser["arcsurv"].get(key)
        if value is None:
            continue
        try:
            defaults[key] = cast(value)
        except ValueError:
            LOG.warning("Ignoring invalid %s=%r in %s", key, value, config_ini)
    return defaults


def write_config_file(**kwargs):
    LOG.info("Starting config module")

    if not any(value is not None for value in kwargs.values()):
        raise ConfigError("No arguments given")

    config_dir = get_config_dir()

    # Make directory, if it doesn't exist
    if not config_dir.is_dir():
        LOG.info("No config directory found, creating %s", config_dir)
        config_dir.mkdir(parents=True)

    config_ini = config_dir / "config.ini"
    config_parser = configparser.ConfigParser()

    # Read in any config that already exists
    if config_ini.exists():
        LOG.info("Found existing configuration file, reading")
        config_parser.read(config_ini)
    if "arcsurv" not in config_parser:
        config_parser["arcsurv"] = {}

    for key, value in kwargs.items():
        if value is None:
            continue
        if key in USER_KEYS and value < 1:
            raise ConfigError(f"{key} must be a positive integer, got {value}")
        config_parser["arcsurv"][key] = str(value)

    LOG.info("Writing configuration to %s", config_ini)
    with config_ini.open("w") as cfg:
        config_parser.write(cfg)


# Schemas

NUMBER = {"type": "number"}
INTEGER = {"type": "integer"}
NUMBERS = {"type": "array", "items": NUMBER}


def nullable(schema, default=None):
    types = schema["type"] if isinstance(schema["type"], list) else [schema["type"]]
    return {**schema, "type": [*types, "null"], "default": default}


def obj(properties, required=(), default=None):
    schema = {
        "type": "object",
        "properties": properties,
        "additionalProperties": False,
    }
    if required:
        schema["required"] = list(required)
    if default is not None:
        schema["default"] = default
    return schema


def choice(values, default=None):
    schema = {"enum": list(values)}
    if default is not None:
        schema["default"] = default
    return schema


SPLINE_SCHEMA = obj(
    {
        "order": {**INTEGER, "default": 3},
        "inner_knots": {**NUMBERS, "default": []},
        "boundary": NUMBERS,
    },
    required=["boundary"],
)

PRIOR_SCHEMA = obj(
    {
        **{
            name: NUMBER
            for name in (
                "lambda_shape", "lambda_rate", "beta_sd", "alpha_sd", "gamma_sd",
                "mu_sd", "sigma2_shape", "sigma2_rate",
            )
        },
        "wishart_df": {"type": ["number", "null"]},
        "wishart_scale": {"type": ["array", "null"], "items": NUMBERS},
    },
    default={},
)

MODEL_SCHEMA = obj(
    {
        "kind": choice(("I", "Ia", "II")),
        "n_covariates": INTEGER,
        "longitudinal_covariate": nullable(INTEGER),
        "spline": nullable(SPLINE_SCHEMA),
        "quad_points": nullable(INTEGER),
        "priors": PRIOR_SCHEMA,
    },
    required=["kind", "n_covariates"],
)

TRUTH_SCHEMA = obj(
    {
        "lambda": NUMBER,
        "beta": NUMBERS,
        "alpha": NUMBER,
        "gamma": nullable(NUMBER),
        "mu": NUMBERS,
        "Sigma": {"type": "array", "items": NUMBERS},
        "sigma2": NUMBER,
    },
    required=["lambda", "beta", "alpha", "mu", "Sigma", "sigma2"],
)

COVARIATE_SCHEMA = obj(
    {"law": choice(("bernoulli", "normal")), "p": NUMBER, "mean": NUMBER, "sd": NUMBER},
    required=["law"],
)

DESIGN_SCHEMA = obj(
    {
        "n": {**INTEGER, "default": 100},
        "covariates": {"type": "array", "items": COVARIATE_SCHEMA, "default": []},
        "schedule": NUMBERS,
        "censoring": obj(
            {
                "administrative_time": nullable(NUMBER),
                "independent_rate": {**NUMBER, "default": 0.0},
            },
            default={},
        ),
        "seed": {**INTEGER, "default": 0},
        "t_max": {**NUMBER, "default": 1000.0},
    },
    required=["schedule"],
)

SAMPLER_SCHEMA = obj(
    {
        "algorithm": choice(("MwG", "NUTS")),
        "chains": INTEGER,
        "iterations": INTEGER,
        "burn_in": INTEGER,
        "thin": INTEGER,
        "seed": INTEGER,
        "target_accept": NUMBER,
        "max_tree_depth": INTEGER,
        "step_size_adapt_iters": {"type": ["integer", "null"]},
        "threads": INTEGER,
    },
    default={},
)

DATA_SCHEMA = obj(
    {
        "transform": {"enum": [None, "sqrt"], "default": None},
        "covariates": {"type": ["array", "null"], "items": {"type": "string"}, "default": None},
        "encodings": {"type": "object", "default": {}},
    },
    default={},
)

RISK_SCHEMA = obj(
    {
        "level": {**NUMBER, "default": 95.0},
        "G": choice(("above", "below"), "above"),
        "t": choice(("above", "below"), "above"),
        "combine": choice(("all", "any"), "all"),
    },
    default={},
)

SCHEMAS = {
    "simulate": obj(
        {"model": MODEL_SCHEMA, "truth": TRUTH_SCHEMA, "design": DESIGN_SCHEMA},
        required=["model", "truth", "design"],
    ),
    "fit": obj(
        {"model": MODEL_SCHEMA, "sampler": SAMPLER_SCHEMA, "data": DATA_SCHEMA},
        required=["model"],
    ),
    "study": obj(
        {
            "model": MODEL_SCHEMA,
            "truth": TRUTH_SCHEMA,
            "design": DESIGN_SCHEMA,
            "sampler": SAMPLER_SCHEMA,
            "replicates": INTEGER,
            "seed": {**INTEGER, "default": 0},
            "max_failure_fraction": {**NUMBER, "default": 0.2},
        },
        required=["model", "truth", "design", "replicates"],
    ),
    "curves": obj(
        {
            "profile": NUMBERS,
            "grid": obj(
                {"t_end": NUMBER, "points": {**INTEGER, "default": 101}},
                required=["t_end"],
            ),
            "slope_index": {**INTEGER, "default": 1},
            "risk": RISK_SCHEMA,
            "subjects": {
                "type": "array",
                "items": {"type": ["string", "integer"]},
                "default": [],
            },
        },
        required=["profile", "grid"],
    ),
}


def _describe(error):
    """(message, JSON pointer) of a validation error, pointing at the offending key."""
    path = list(error.absolute_path)
    if error.validator == "additionalProperties":
        known = error.schema.get("properties", {})
        unknown = sorted(key for key in error.instance if key not in known)
        return f"unknown key {unknown[0]!r}", path + unknown[:1]
    if error.validator == "required":
        missing = [key for key in error.validator_value if key not in error.instance]
        return "required key is missing", path + missing[:1]
    return error.message, path


def validate_document(document, schema):
    """Checks a document against a JSON schema.

    Raises:
        ConfigError: For the error with the smallest JSON pointer, naming
            that pointer.
    """
    errors = sorted(
        jsonschema.Draft7Validator(schema).iter_errors(document),
        key=lambda error: [
            f"{part:09d}" if isinstance(part, int) else part for part in error.absolute_path
        ],
    )
    if errors:
        message, path = _describe(errors[0])
        raise ConfigError(message, "".join(f"/{part}" for part in path))


def fill_defaults(document, schema):
    """Copy of a validated document with every schema default filled in."""
    if isinstance(document, list) and "items" in schema:
        return [fill_defaults(item, schema["items"]) for item in document]
    if not isinstance(document, dict) or "properties" not in schema:
        return copy.deepcopy(document)
    resolved = {}
    for key, sub in schema["properties"].items():
        if key in document:
            resolved[key] = fill_defaults(document[key], sub)
        elif "default" in sub:
            resolved[key] = fill_defaults(copy.deepcopy(sub["default"]), sub)
    return resolved


def load_document(path):
    try:
        with open(path) as fp:
            return json.load(fp)
    except FileNotFoundError:
        raise ConfigError(f"configuration file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from None


def resolve(document, command, user_defaults=None):
    """Validates a run configuration for a command and fills every default.

    User defaults are applied where the document leaves quad_points or the
    sampler thread count unset.
    """
    if not isinstance(document, dict):
        raise ConfigError("configuration must be a JSON object", "")
    schema = SCHEMAS[command]
    validate_document(document, schema)
    resolved = fill_defaults(document, schema)
    user_defaults = user_defaults or {}
    model = resolved.get("model")
    if model is not None and model["quad_points"] is None:
        model["quad_points"] = user_defaults.get("quad_points", DEFAULT_QUAD_POINTS)
    return resolved


def load_run_config(path, command, user_defaults=None):
    LOG.info("Reading %s configuration from %s", command, path)
    return resolve(load_document(path), command, user_defaults)


# Building domain objects from resolved documents

def build_model_spec(model):
    spline = None
    if model["spline"] is not None:
        spline = SplineConfig.from_dict(model["spline"])
    spec = ModelSpec(
        kind=model["kind"],
        n_covariates=model["n_covariates"],
        longitudinal_covariate=model["longitudinal_covariate"],
        spline=spline,
        priors=PriorSpec(**model["priors"]),
        quad_points=model["quad_points"],
    )
    spec.validate()
    return spec


def build_truth(truth, spec):
    try:
        Sigma = np.array(truth["Sigma"], dtype=float)
    except ValueError:
        raise ConfigError("rows differ in length", "/truth/Sigma") from None
    state = ParameterState(
        lam=truth["lambda"],
        beta=truth["beta"],
        alpha=truth["alpha"],
        gamma=truth["gamma"],
        mu=truth["mu"],
        Sigma=Sigma,
        sigma2=truth["sigma2"],
    )
    state.check("/truth")
    if spec.has_gamma and state.gamma is None:
        raise ConfigError("Model Ia needs gamma", "/truth/gamma")
    return state


def build_design(design, spec, truth):
    d = dict(design)
    d["covariates"] = [CovariateLaw.from_dict(c).to_dict() for c in d["covariates"]]
    simulation = SimulationDesign.from_dict(d, spec=spec, truth=truth)
    simulation.validate()
    return simulation


def build_sampler(sampler, preset=None, seed=None, threads=None, user_defaults=None):
    """SamplerConfig from defaults, then preset, then the config, then command line flags."""
    values = SamplerConfig().to_dict()
    if preset:
        values.update(SamplerConfig.from_preset(preset).to_dict())
    values.update(sampler or {})
    if "threads" not in (sampler or {}) and user_defaults and "threads" in user_defaults:
        values["threads"] = user_defaults["threads"]
    if seed is not None:
        values["seed"] = seed
    if threads is not None:
        values["threads"] = threads
    cfg = SamplerConfig.from_dict(values)
    cfg.validate()
    return cfg
