"""Regression machinery for transfer performance models.

Transfer time for N files totaling B bytes at concurrency one is modeled
as T = N*t0 + B/R + S0, with t0 the fixed per-file overhead, R the
end-to-end throughput, and S0 the one-time startup cost. Sweeping N at
fixed B makes this a straight line in N, so ordinary least squares on
(N, T) pairs recovers t0 as the slope and the composite B/R + S0 as the
intercept. A single-file size sweep (T = B*t_u + S0) separates S0 the
same way. Pearson correlation quantifies how linear a sweep actually was.

All functions are pure and use closed-form normal equations in double
precision; byte counts convert to floats only at the boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

GB = 1_000_000_000  # decimal gigabyte, matching storage-vendor sizing


class DegenerateX(ValueError):
    """All x values equal: the slope is unidentifiable."""


class ZeroVariance(ValueError):
    """A variable is constant: correlation is undefined."""


class NonpositiveR(ValueError):
    """Throughput must be positive to predict a transfer time."""


@dataclass(frozen=True)
class FitResult:
    """Ordinary least-squares fit of y = alpha + beta*x."""

    alpha: float
    beta: float
    residuals: list[float]
    r_squared: float

    def predict(self, x: float) -> float:
        return self.alpha + self.beta * x


@dataclass(frozen=True)
class CorrelationResult:
    rho: float
    n: int


@dataclass(frozen=True)
class TransferModel:
    """Forward model inputs: T = N*t0 + B/R + S0."""

    t0: float  # seconds per file
    R: float  # bytes/second
    S0: float  # seconds
    B: int  # total bytes
    N: int  # file count


@dataclass(frozen=True)
class StartupModel:
    """Single-file size-sweep model: T = B_gb * t_u + S0."""

    t_u: float  # seconds per GB
    S0: float  # seconds
    fit: FitResult
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class TransferFit:
    """File-count-sweep fit: slope is t0, intercept is the composite B/R + S0."""

    t0: float
    alpha: float
    fit: FitResult
    flags: tuple[str, ...] = ()


def linfit(pairs: list[tuple[float, float]]) -> FitResult:
    """Least-squares line through (x, y) pairs via the normal equations.

    Requires at least two distinct x values; raises DegenerateX otherwise.
    """
    n = len(pairs)
    if n < 2:
        raise DegenerateX(f"need >= 2 points, got {n}")
    xs = [float(x) for x, _ in pairs]
    ys = [float(y) for _, y in pairs]
    x_mean = math.fsum(xs) / n
    y_mean = math.fsum(ys) / n
    sxx = math.fsum((x - x_mean) ** 2 for x in xs)
    if sxx == 0.0:
        raise DegenerateX("all x values are equal")
    sxy = math.fsum((x - x_mean) * (y - y_mean) for x, y in zip(xs, ys))
    beta = sxy / sxx
    alpha = y_mean - beta * x_mean
    residuals = [y - (alpha + beta * x) for x, y in zip(xs, ys)]
    ss_res = math.fsum(r * r for r in residuals)
    ss_tot = math.fsum((y - y_mean) ** 2 for y in ys)
    if ss_tot == 0.0:
        r_squared = 1.0 if ss_res == 0.0 else 0.0
    else:
        r_squared = 1.0 - ss_res / ss_tot
    return FitResult(alpha=alpha, beta=beta, residuals=residuals, r_squared=r_squared)


def pearson(x: list[float], y: list[float]) -> CorrelationResult:
    """Correlation coefficient: covariance over the product of standard deviations."""
    if len(x) != len(y):
        raise ValueError(f"length mismatch: {len(x)} vs {len(y)}")
    n = len(x)
    if n < 2:
        raise ValueError(f"need >= 2 samples, got {n}")
    x_mean = math.fsum(x) / n
    y_mean = math.fsum(y) / n
    sxx = math.fsum((a - x_mean) ** 2 for a in x)
    syy = math.fsum((b - y_mean) ** 2 for b in y)
    if sxx == 0.0 or syy == 0.0:
        raise ZeroVariance("constant variable has no defined correlation")
    sxy = math.fsum((a - x_mean) * (b - y_mean) for a, b in zip(x, y))
    return CorrelationResult(rho=sxy / math.sqrt(sxx * syy), n=n)


def predict_time(model: TransferModel) -> float:
    """Seconds to move N files totaling B bytes at concurrency one."""
    if model.R <= 0:
        raise NonpositiveR(f"R must be positive, got {model.R}")
    return model.N * model.t0 + model.B / model.R + model.S0


def fit_transfer_model(runs: list[tuple[float, float]], B: int) -> TransferFit:
    """Recover t0 (and the composite intercept) from (N, T_seconds) runs.

    R and S0 are not separable from a file-count sweep alone; the intercept
    alpha = B/R + S0 is reported as-is. A negative fitted t0 (possible
    under noise) is flagged, not clamped.
    """
    distinct = {n for n, _ in runs}
    if len(distinct) < 3:
        raise DegenerateX(f"need >= 3 distinct file counts, got {len(distinct)}")
    fit = linfit([(float(n), float(t)) for n, t in runs])
    flags = []
    if fit.beta < 0:
        flags.append("negative-t0")
    if fit.alpha < 0:
        flags.append("negative-intercept")
    return TransferFit(t0=fit.beta, alpha=fit.alpha, fit=fit, flags=tuple(flags))


def fit_startup_model(runs: list[tuple[int, float]]) -> StartupModel:
    """Recover startup cost S0 from single-file (B_bytes, T_seconds) runs.

    The slope is rescaled to seconds per GB; the intercept is S0.
    """
    distinct = {b for b, _ in runs}
    if len(distinct) < 3:
        raise DegenerateX(f"need >= 3 distinct sizes, got {len(distinct)}")
    fit = linfit([(b / GB, float(t)) for b, t in runs])
    flags = []
    if fit.alpha < 0:
        flags.append("negative-s0")
    if fit.beta <= 0:
        flags.append("nonpositive-tu")
    return StartupModel(t_u=fit.beta, S0=fit.alpha, fit=fit, flags=tuple(flags))
