"""Exceptions raised by arcsurv.

Configuration and data problems subclass ValueError, numerical failures
subclass ArithmeticError, so callers that only know the builtin hierarchy
still catch them sensibly.
"""


class ArcsurvError(Exception):
    """Base class for all arcsurv errors."""


class ConfigError(ArcsurvError, ValueError):
    """An invalid configuration value.

    Attributes:
        pointer (str): JSON pointer of the offending key, if known.
    """

    def __init__(self, message, pointer=None):
        self.pointer = pointer
        if pointer is not None:
            message = f"{pointer or '/'}: {message}"
        super().__init__(message)


class DomainError(ArcsurvError, ValueError):
    """A function was evaluated outside of its domain."""


class IngestionError(ConfigError):
    """Malformed input tables.

    Attributes:
        problems (list): (file, row, message) tuples, row numbers 1-based
            counting the header as row 1.
        dropped (int): Rows that were dropped rather than rejected.
    """

    def __init__(self, problems, dropped=0):
        self.problems = list(problems)
        self.dropped = dropped
        lines = [f"{name}:{row}: {message}" for name, row, message in self.problems]
        super().__init__(
            f"{len(self.problems)} problem(s) in input tables\n" + "\n".join(lines)
        )


class NumericalError(ArcsurvError, ArithmeticError):
    """A non-finite value was produced where a finite one is required."""


class SimulationError(ArcsurvError):
    """A simulated dataset was rejected.

    Attributes:
        failures (int): Number of subjects whose event time could not be inverted.
        n (int): Number of subjects in the dataset.
    """

    def __init__(self, failures, n):
        self.failures = failures
        self.n = n
        super().__init__(
            f"Event time inversion failed for {failures} of {n} subjects"
        )


class InitialisationError(ArcsurvError):
    """No starting state with a finite log posterior could be found."""


class StudyError(ArcsurvError):
    """Too many replicates of a coverage study failed."""
