"""Mapping raw tool outputs onto the shared 1..5 quality scale.

Every registered tool either ships a fitted five-parameter logistic curve
or falls back to a linear rescale of its native output range. The fitter
for new tools is a damped Gauss-Newton loop with an analytic Jacobian and
a deterministic multi-start grid, so refitting the same pairs always lands
on the same curve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

FORM_STANDARD = "standard"
FORM_AS_PRINTED = "as_printed"

_FORMS = (FORM_STANDARD, FORM_AS_PRINTED)

# Exponent clip keeping exp() finite while leaving the curve effectively
# saturated; results only differ from the unclipped value below 1e-200.
_EXP_LIMIT = 500.0

SCALE_MIN = 1.0
SCALE_MAX = 5.0


class NonFiniteInputError(ValueError):
    """A raw score was NaN or infinite."""


class DegenerateDataError(ValueError):
    """Calibration pairs are unusable (too few, constant, or non-finite)."""


class NoConvergenceError(RuntimeError):
    """No start of the fit met the convergence tolerance within the budget."""


class UnknownToolError(KeyError):
    """The registry has no descriptor under the requested name."""


@dataclass(frozen=True)
class LogisticParams:
    """Parameters of the monotone five-parameter logistic mapping.

    ``form`` selects between the standard curve, whose sigmoid term is
    1/(1 + exp(b2*(x - b3))), and the as-printed variant using
    1/exp(b2*(x - b3)). With beta1 = 0 both collapse to the same affine map
    beta4 * x + beta5 exactly.
    """

    beta: tuple[float, float, float, float, float]
    form: str = FORM_STANDARD
    clamp: bool = True

    def __post_init__(self) -> None:
        if len(self.beta) != 5:
            raise ValueError(f"expected 5 parameters, got {len(self.beta)}")
        if self.form not in _FORMS:
            raise ValueError(f"unknown logistic form: {self.form!r}")

    def to_json_dict(self) -> dict:
        return {"beta": list(self.beta), "form": self.form, "clamp": self.clamp}

    @classmethod
    def from_json_dict(cls, data: dict) -> "LogisticParams":
        return cls(
            beta=tuple(float(b) for b in data["beta"]),
            form=data.get("form", FORM_STANDARD),
            clamp=bool(data.get("clamp", True)),
        )


@dataclass(frozen=True)
class CalibrationDetail:
    """A calibrated value plus what clamping did to it."""

    value: float
    pre_clamp: float
    clamped: bool


def _sigmoid_term(x: np.ndarray, b2: float, b3: float, form: str) -> np.ndarray:
    u = np.clip(b2 * (x - b3), -_EXP_LIMIT, _EXP_LIMIT)
    if form == FORM_STANDARD:
        return 0.5 - 1.0 / (1.0 + np.exp(u))
    return 0.5 - np.exp(-u)


def _evaluate(x: np.ndarray, beta: Sequence[float], form: str) -> np.ndarray:
    b1, b2, b3, b4, b5 = beta
    if b1 == 0.0:
        # Keep the affine special case exact: no sigmoid evaluation at all.
        return b4 * x + b5
    return b1 * _sigmoid_term(x, b2, b3, form) + b4 * x + b5


def logistic_map_full(raw: float, params: LogisticParams) -> CalibrationDetail:
    """Apply the logistic mapping, reporting the pre-clamp value as well."""
    if not math.isfinite(raw):
        raise NonFiniteInputError(f"raw score must be finite, got {raw!r}")
    pre = float(_evaluate(np.asarray([raw], dtype=np.float64), params.beta, params.form)[0])
    if not params.clamp:
        return CalibrationDetail(value=pre, pre_clamp=pre, clamped=False)
    value = min(max(pre, SCALE_MIN), SCALE_MAX)
    return CalibrationDetail(value=value, pre_clamp=pre, clamped=(value != pre))


def logistic_map(raw: float, params: LogisticParams) -> float:
    return logistic_map_full(raw, params).value


def default_params(tool_name: str, registry, form: str = FORM_STANDARD) -> LogisticParams:
    """Calibration parameters for a registered tool.

    Tools with a fitted curve use it; tools without one get a linear rescale
    of their declared native range onto [1, 5] (direction follows the
    higher-is-better flag), encoded as a logistic with beta1 = 0 so the map
    is exactly affine. Tools with neither are assumed to emit 1..5 already.
    """
    descriptor = registry.get(tool_name)
    if descriptor.beta is not None:
        return LogisticParams(beta=tuple(descriptor.beta), form=form, clamp=True)
    if descriptor.native_range is not None:
        lo, hi = descriptor.native_range
        if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
            raise ValueError(f"bad native_range for {tool_name}: {descriptor.native_range!r}")
        slope = (SCALE_MAX - SCALE_MIN) / (hi - lo)
        if descriptor.higher_better:
            return LogisticParams(beta=(0.0, 0.0, 0.0, slope, SCALE_MIN - slope * lo), form=form)
        return LogisticParams(beta=(0.0, 0.0, 0.0, -slope, SCALE_MAX + slope * lo), form=form)
    return LogisticParams(beta=(0.0, 0.0, 0.0, 1.0, 0.0), form=form)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


@dataclass
class FitReport:
    """Diagnostics from one fit: final loss, effort, and the descent log."""

    rss: float
    iterations: int
    plcc: float
    converged: bool
    form: str
    rss_trace: list = field(default_factory=list)
    start_index: int = 0

    def to_json_dict(self) -> dict:
        return {
            "rss": self.rss,
            "iterations": self.iterations,
            "plcc": self.plcc,
            "converged": self.converged,
            "form": self.form,
            "rss_trace": list(self.rss_trace),
            "start_index": self.start_index,
        }


_MAX_ITERATIONS = 500
_REL_TOL = 1e-10
_DAMPING_INIT = 1e-3
_DAMPING_MIN = 1e-12
_DAMPING_MAX = 1e14


def _jacobian(x: np.ndarray, beta: np.ndarray, form: str) -> np.ndarray:
    b1, b2, b3, _, _ = beta
    u = np.clip(b2 * (x - b3), -_EXP_LIMIT, _EXP_LIMIT)
    J = np.empty((x.size, 5), dtype=np.float64)
    if form == FORM_STANDARD:
        s = 1.0 / (1.0 + np.exp(u))
        J[:, 0] = 0.5 - s
        J[:, 1] = b1 * s * (1.0 - s) * (x - b3)
        J[:, 2] = -b1 * s * (1.0 - s) * b2
    else:
        t = np.exp(-u)
        J[:, 0] = 0.5 - t
        J[:, 1] = b1 * t * (x - b3)
        J[:, 2] = -b1 * t * b2
    J[:, 3] = x
    J[:, 4] = 1.0
    return J


def _starts(x: np.ndarray, y: np.ndarray, form: str) -> list:
    sx = float(np.std(x))
    b1 = float(np.max(y) - np.min(y))
    b5 = float(np.mean(y))
    var_x = float(np.var(x))
    starts = []
    for b3 in (float(np.min(x)), float(np.median(x)), float(np.max(x))):
        for b2 in (1.0 / sx, -1.0 / sx):
            term = _sigmoid_term(x, b2, b3, form)
            residual = y - b1 * term
            b4 = float(np.mean((x - np.mean(x)) * (residual - np.mean(residual))) / var_x)
            starts.append(np.array([b1, b2, b3, b4, b5], dtype=np.float64))
    return starts


def _run_start(x: np.ndarray, y: np.ndarray, beta0: np.ndarray, form: str):
    beta = beta0.copy()
    damping = _DAMPING_INIT
    rss = float(np.sum((_evaluate(x, beta, form) - y) ** 2))
    trace = [rss]
    converged = False
    iterations = 0
    for iterations in range(1, _MAX_ITERATIONS + 1):
        residual = _evaluate(x, beta, form) - y
        J = _jacobian(x, beta, form)
        jtj = J.T @ J
        gradient = J.T @ residual
        scale = np.diag(jtj).copy()
        scale[scale <= 0] = 1.0
        try:
            step = np.linalg.solve(jtj + damping * np.diag(scale), -gradient)
        except np.linalg.LinAlgError:
            step, *_ = np.linalg.lstsq(jtj + damping * np.diag(scale), -gradient, rcond=None)
        candidate = beta + step
        # Trial steps may shoot into overflow territory; they come back as
        # inf and are rejected below, so the arithmetic warning is noise.
        with np.errstate(over="ignore"):
            candidate_rss = float(np.sum((_evaluate(x, candidate, form) - y) ** 2))
        if math.isfinite(candidate_rss) and candidate_rss < rss:
            relative_drop = (rss - candidate_rss) / max(rss, 1e-300)
            beta = candidate
            rss = candidate_rss
            trace.append(rss)
            damping = max(damping / 10.0, _DAMPING_MIN)
            if relative_drop < _REL_TOL:
                converged = True
                break
        else:
            damping = damping * 10.0
            if damping > _DAMPING_MAX:
                # No step improves even under maximal damping: the loop is at
                # a stationary point, which is as converged as it gets.
                converged = True
                break
    return beta, rss, trace, converged, iterations


def fit_logistic(
    raw: Sequence[float],
    mos: Sequence[float],
    form: str = FORM_STANDARD,
    clamp: bool = True,
) -> tuple[LogisticParams, FitReport]:
    """Fit the five-parameter curve to (raw score, subjective score) pairs.

    Deterministic: a fixed six-point start grid (three knee positions by two
    slope signs, slope/offset seeded by least squares), damping multiplied by
    ten on every rejected step and divided by ten on every accepted one.
    Needs at least ten pairs with variation in both coordinates.
    """
    if form not in _FORMS:
        raise ValueError(f"unknown logistic form: {form!r}")
    x = np.asarray(raw, dtype=np.float64)
    y = np.asarray(mos, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DegenerateDataError("raw and mos must be equal-length 1-D sequences")
    if x.size < 10:
        raise DegenerateDataError(f"need at least 10 pairs, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DegenerateDataError("calibration pairs must be finite")
    if float(np.std(x)) == 0.0 or float(np.std(y)) == 0.0:
        raise DegenerateDataError("constant raw or mos values cannot be fitted")

    best = None
    any_converged = False
    for index, beta0 in enumerate(_starts(x, y, form)):
        beta, rss, trace, converged, iterations = _run_start(x, y, beta0, form)
        any_converged = any_converged or converged
        if best is None or rss < best[1]:
            best = (beta, rss, trace, converged, iterations, index)
    if not any_converged:
        raise NoConvergenceError(
            f"no start met the tolerance within {_MAX_ITERATIONS} iterations"
        )
    beta, rss, trace, converged, iterations, index = best

    fitted = _evaluate(x, beta, form)
    plcc = _pearson(fitted, y)
    params = LogisticParams(beta=tuple(float(b) for b in beta), form=form, clamp=clamp)
    report = FitReport(
        rss=rss,
        iterations=iterations,
        plcc=plcc,
        converged=converged,
        form=form,
        rss_trace=trace,
        start_index=index,
    )
    return params, report


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    da = a - np.mean(a)
    db = b - np.mean(b)
    denom = math.sqrt(float(np.sum(da * da)) * float(np.sum(db * db)))
    if denom == 0.0:
        return 0.0
    return float(np.sum(da * db)) / denom
