"""Exception types shared across the calibration engine."""


class MarkovFlowError(Exception):
    """Base class for all engine errors."""


class InvalidInputError(MarkovFlowError, ValueError):
    """Precondition violation: bad bounds, sizes, or parameter values."""


class ProbabilityError(InvalidInputError):
    """Probability argument outside [0, 1]."""


class MonotonicityError(MarkovFlowError):
    """A slice or CDF that must be nondecreasing is not (data corruption)."""


class ConvexOrderError(MarkovFlowError):
    """Marginals are not in convex order (calendar arbitrage)."""


class ConvergenceError(MarkovFlowError):
    """A fixed-point iteration stagnated or diverged."""


class BracketError(MarkovFlowError):
    """A root bracket could not be established."""


class SolverInstabilityError(MarkovFlowError):
    """PDE solve produced NaNs, negative mass, or lost conservation."""


class OneSidedMassError(MarkovFlowError):
    """Mean-zero renormalization is singular: all mass on one side of 0."""
