"""Local-volatility model calibration by Markov-functional flows.

A price process is represented as S_t = f(t, X_t) for a drifted Brownian
flow variable X; calibration constructs flow and drift functions so the
model matches a discrete set of marginal distributions exactly.
"""

__version__ = "0.1.0"

from .errors import (
    BracketError,
    ConvergenceError,
    ConvexOrderError,
    InvalidInputError,
    MarkovFlowError,
    MonotonicityError,
    OneSidedMassError,
    ProbabilityError,
    SolverInstabilityError,
)
from .grids import (
    DensitySlice,
    FlowSlice,
    Grid,
    MonotoneCdf,
    build_uniform_grid,
    cdf_from_density,
    compose_quantile_cdf,
    quantile,
)
from .marginals import (
    ConvexOrderReport,
    DoubleExponentialMarginal,
    LognormalMarginal,
    Marginal,
    MarginalSet,
    MixedLognormalMarginal,
    MlnParams,
    NormalMarginal,
    TabulatedMarginal,
    check_convex_order,
    marginal_set_from_json,
    marginal_set_to_json,
)

__all__ = [name for name in dir() if not name.startswith("_")]
