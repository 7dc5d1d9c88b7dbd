"""Exception hierarchy shared across the package.

Everything raised on purpose derives from PairclustError so callers (and the
CLI) can distinguish usage problems from genuine bugs.
"""


class PairclustError(Exception):
    """Base class for all errors raised by pairclust."""


class ConfigError(PairclustError):
    """Invalid configuration value (bad variance, bad grid, bad flag combination)."""


class DataError(PairclustError):
    """Structurally invalid data: shape mismatches, bad treatment patterns, parse failures."""


class EstimationError(PairclustError):
    """An estimator could not produce a result at all (as opposed to a flagged one)."""


class MatchingError(PairclustError):
    """Pair construction failed (odd counts, singular covariance without ridge, ...)."""


class SimulationError(PairclustError):
    """A Monte Carlo run could not complete (excess failures, impossible plan)."""
