#!/usr/bin/env python3

"""
Test suite for parsers.py
"""

import pytest

from arcsurv import parsers


def test_fit_arguments():
    args = parsers.parse_args(
        ["fit", "-c", "fit.json", "-l", "long.csv", "-s", "surv.csv", "-o", "out",
         "--preset", "model1-sim", "--seed", "3", "--threads", "2"]
    )
    assert args.command == "fit"
    assert args.longitudinal == "long.csv"
    assert args.preset == "model1-sim"
    assert args.seed == 3
    assert args.threads == 2
    assert not args.verbose


def test_fit_needs_data():
    with pytest.raises(SystemExit):
        parsers.parse_args(["fit", "-c", "fit.json", "-o", "out"])


def test_unknown_preset():
    with pytest.raises(SystemExit):
        parsers.parse_args(["study", "-c", "s.json", "-o", "out", "--preset", "fast"])


def test_simulate_has_no_threads():
    args = parsers.parse_args(["-v", "simulate", "-c", "sim.json", "-o", "out"])
    assert args.verbose
    assert args.seed is None
    assert not hasattr(args, "threads")


def test_curves_data_is_optional_but_paired():
    args = parsers.parse_args(["curves", "-c", "c.json", "-f", "fit", "-o", "out"])
    assert args.longitudinal is None
    with pytest.raises(SystemExit):
        parsers.parse_args(["curves", "-c", "c.json", "-f", "fit", "-o", "out", "-l", "a.csv"])


def test_config_arguments():
    args = parsers.parse_args(["config", "--quad_points", "400"])
    assert args.quad_points == 400
    assert args.threads is None


def test_no_command_exits():
    with pytest.raises(SystemExit) as exc:
        parsers.parse_args([])
    assert exc.value.code == 1


def test_program_name():
    assert parsers.get_parser().prog == "arcsurv"


@pytest.mark.parametrize(
    "argv",
    [
        ["simulate", "--config", "sim.json", "--out", "out", "--seed", "1"],
        ["fit", "--config", "fit.json", "--longitudinal", "l.csv", "--survival", "s.csv",
         "--out", "out", "--seed", "1", "--threads", "2", "--preset", "table2"],
        ["study", "--config", "study.json", "--out", "out", "--seed", "1", "--threads", "2",
         "--preset", "model2-sim"],
        ["curves", "--config", "curves.json", "--fit", "fit", "--out", "out"],
    ],
)
def test_long_form_flags(argv):
    args = parsers.parse_args(argv)
    assert args.command == argv[0]
    assert args.config == argv[2]
    assert args.out == "out"
