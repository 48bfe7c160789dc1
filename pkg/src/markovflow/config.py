"""Run configuration shared by the CLI and the calibration engine."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

from .errors import InvalidInputError

SCHEMES = ("bass-chl", "homogeneous", "continuous")
RULES = ("inverse-sqrt", "log-linear")


@dataclass(frozen=True)
class RunConfig:
    n_t: int = 100
    n_x: int = 500
    y_max: float = 7.0
    tol: float = 1e-7
    tol_brownian: float = 1e-9
    max_iter: int = 500
    scheme: str = "homogeneous"
    rule: str = "inverse-sqrt"
    fp_scheme: str = "crank-nicolson"
    mean_zero: bool = True
    mu_max: float = 50.0
    seed: int = 0
    paths: int = 100_000
    steps_per_period: int = 32
    window_lo: int | None = None
    window_hi: int | None = None

    def __post_init__(self):
        if self.n_t < 1 or self.n_x < 3 or self.max_iter < 1 or self.paths < 1:
            raise InvalidInputError("grid sizes, iterations and paths must be positive")
        if self.y_max <= 0.0 or self.tol < 0.0 or self.tol_brownian < 0.0:
            raise InvalidInputError("y_max must be positive and tolerances nonnegative")
        if self.scheme not in SCHEMES:
            raise InvalidInputError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.rule not in RULES:
            raise InvalidInputError(f"rule must be one of {RULES}, got {self.rule!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Short hash of the full configuration, stamped into output files."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def rate_window(self, period_index: int) -> tuple[int, int]:
        """Iteration window for rate estimation; first period uses 50-100."""
        if self.window_lo is not None and self.window_hi is not None:
            return self.window_lo, self.window_hi
        return (50, 100) if period_index == 0 else (100, 500)
