"""Result records for estimate checks and convergence studies."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# slack conventions: exact operator identities are allowed rounding-level
# slack; genuine one-sided estimates must hold as computed.
IDENTITY_SLACK = 1e-9
INEQUALITY_SLACK = 0.0


@dataclass
class EstimateCheck:
    """Two sides of one inequality, with the run parameters that produced it."""

    name: str
    lhs: float
    rhs: float
    margin: float
    passed: bool
    slack: float
    context: dict = field(default_factory=dict)

    @classmethod
    def compare(cls, name: str, lhs: float, rhs: float,
                slack: float = INEQUALITY_SLACK, context: dict | None = None) -> "EstimateCheck":
        lhs = float(lhs)
        rhs = float(rhs)
        passed = lhs <= rhs * (1.0 + slack) if rhs >= 0 else lhs <= rhs * (1.0 - slack)
        return cls(name=name, lhs=lhs, rhs=rhs, margin=rhs - lhs,
                   passed=bool(passed), slack=slack, context=dict(context or {}))

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return f"{self.name}: {status} lhs={self.lhs:.6e} rhs={self.rhs:.6e} margin={self.margin:.6e}"


def loglog_slope(params, values) -> float:
    """Least-squares slope of log(value) against log(param).

    Only strictly positive entries participate; with fewer than two of
    them the decay is below resolution and the slope is reported as +inf.
    """
    p = np.asarray(params, dtype=float)
    v = np.asarray(values, dtype=float)
    keep = (v > 0) & (p > 0)
    if keep.sum() < 2:
        return float("inf")
    coeffs = np.polyfit(np.log(p[keep]), np.log(v[keep]), 1)
    return float(coeffs[0])


def is_monotone_decreasing(values, *, strict: bool = False, floor: float = 0.0) -> bool:
    """Nonincreasing sequence check; entries at or below `floor` are ties."""
    v = list(map(float, values))
    for a, b in zip(v, v[1:]):
        if strict and b >= a and a > floor:
            return False
        if not strict and b > a * (1 + 1e-12) and b > floor:
            return False
    return True


@dataclass
class ConvergenceStudy:
    """Error ladder over one parameter with its fitted log-log slope."""

    name: str
    parameters: list
    errors: list
    slope: float
    monotone: bool
    degenerate: bool = False
    context: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_ladder(cls, name: str, parameters, errors, *,
                    strict: bool = False, floor: float = 0.0,
                    context: dict | None = None, extra: dict | None = None) -> "ConvergenceStudy":
        parameters = [float(p) for p in parameters]
        errors = [float(e) for e in errors]
        if len(parameters) < 4:
            raise ValueError("a convergence study needs at least 4 parameter values")
        if not all(np.isfinite(errors)):
            raise ValueError(f"{name}: non-finite errors in ladder")
        degenerate = all(e <= floor for e in errors)
        return cls(
            name=name,
            parameters=parameters,
            errors=errors,
            slope=loglog_slope(parameters, errors),
            monotone=is_monotone_decreasing(errors, strict=strict, floor=floor),
            degenerate=degenerate,
            context=dict(context or {}),
            extra=dict(extra or {}),
        )
