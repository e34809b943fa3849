"""Unimodal performance-epoch curve models.

Validation accuracy observed after each training epoch is modeled as a
unimodal function of the epoch index: an increasing, bounded "convergence"
term plus a concave quadratic "overfitting" term. Four interchangeable
families are provided (power / multi-power / exponential / multi-exponential),
each with sign constraints that guarantee a strictly decreasing first
derivative, hence a unique maximum (the knee point).

Fitting is bounded nonlinear least squares (trust-region reflective) with a
deterministic multi-start schedule.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.optimize import brentq, least_squares

# Strict negativity is enforced as a closed bound at -NEG_EPS because the
# solver needs a closed feasible set.
NEG_EPS = 1e-8

FIT_FTOL = 1e-10
FIT_XTOL = 1e-10
FIT_MAX_ITER = 500


class CurveFitError(Exception):
    """Base class for curve-fitting failures."""


class InsufficientData(CurveFitError):
    """Series has too few points to identify the requested family."""


class FitFailure(CurveFitError):
    """No start of the multi-start schedule produced a usable solution."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CurveFamily(enum.Enum):
    """The four fitting families and their per-parameter sign constraints."""

    POWER = "power"
    MULTI_POWER = "multi-power"
    EXPONENTIAL = "exponential"
    MULTI_EXPONENTIAL = "multi-exponential"

    @property
    def n_params(self) -> int:
        return _N_PARAMS[self]

    @property
    def negative_indices(self) -> tuple[int, ...]:
        """0-based indices of parameters constrained to be strictly negative."""
        return _NEGATIVE_IDX[self]

    @classmethod
    def from_tag(cls, tag: str) -> "CurveFamily":
        for fam in cls:
            if fam.value == tag:
                return fam
        raise ValueError(f"unknown curve family tag: {tag!r}")


_N_PARAMS = {
    CurveFamily.POWER: 5,
    CurveFamily.MULTI_POWER: 7,
    CurveFamily.EXPONENTIAL: 5,
    CurveFamily.MULTI_EXPONENTIAL: 7,
}

# power:             a1 + a2*(t+1)^a3 + a4*t + a5*t^2          a2, a3, a5 < 0
# multi-power:       a1 + a2*(t+1)^a3 + a4*(t+1)^a5 + a6*t + a7*t^2
#                                                              a2, a3, a4, a5, a7 < 0
# exponential:       a1 + a2*e^(a3*t) + a4*t + a5*t^2          a2, a3, a5 < 0
# multi-exponential: a1 + a2*e^(a3*t) + a4*e^(a5*t) + a6*t + a7*t^2
#                                                              a2, a3, a4, a5, a7 < 0
_NEGATIVE_IDX = {
    CurveFamily.POWER: (1, 2, 4),
    CurveFamily.MULTI_POWER: (1, 2, 3, 4, 6),
    CurveFamily.EXPONENTIAL: (1, 2, 4),
    CurveFamily.MULTI_EXPONENTIAL: (1, 2, 3, 4, 6),
}


def _check_alpha(family: CurveFamily, alpha: Sequence[float]) -> np.ndarray:
    a = np.asarray(alpha, dtype=float)
    if a.shape != (family.n_params,):
        raise ValueError(
            f"{family.value} expects {family.n_params} parameters, got shape {a.shape}"
        )
    return a


def evaluate(family: CurveFamily, alpha: Sequence[float], t):
    """Evaluate f_alpha(t). Accepts a scalar or an array of epochs t >= 0."""
    a = _check_alpha(family, alpha)
    t = np.asarray(t, dtype=float)
    if family is CurveFamily.POWER:
        val = a[0] + a[1] * (t + 1.0) ** a[2] + a[3] * t + a[4] * t * t
    elif family is CurveFamily.MULTI_POWER:
        val = (
            a[0]
            + a[1] * (t + 1.0) ** a[2]
            + a[3] * (t + 1.0) ** a[4]
            + a[5] * t
            + a[6] * t * t
        )
    elif family is CurveFamily.EXPONENTIAL:
        val = a[0] + a[1] * np.exp(a[2] * t) + a[3] * t + a[4] * t * t
    else:
        val = (
            a[0]
            + a[1] * np.exp(a[2] * t)
            + a[3] * np.exp(a[4] * t)
            + a[5] * t
            + a[6] * t * t
        )
    return val if val.ndim else float(val)


def derivative(family: CurveFamily, alpha: Sequence[float], t):
    """First derivative of f_alpha. Strictly decreasing on the feasible set."""
    a = _check_alpha(family, alpha)
    t = np.asarray(t, dtype=float)
    if family is CurveFamily.POWER:
        val = a[1] * a[2] * (t + 1.0) ** (a[2] - 1.0) + a[3] + 2.0 * a[4] * t
    elif family is CurveFamily.MULTI_POWER:
        val = (
            a[1] * a[2] * (t + 1.0) ** (a[2] - 1.0)
            + a[3] * a[4] * (t + 1.0) ** (a[4] - 1.0)
            + a[5]
            + 2.0 * a[6] * t
        )
    elif family is CurveFamily.EXPONENTIAL:
        val = a[1] * a[2] * np.exp(a[2] * t) + a[3] + 2.0 * a[4] * t
    else:
        val = (
            a[1] * a[2] * np.exp(a[2] * t)
            + a[3] * a[4] * np.exp(a[4] * t)
            + a[5]
            + 2.0 * a[6] * t
        )
    return val if val.ndim else float(val)


def _jacobian(family: CurveFamily, alpha: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Analytic Jacobian d f / d alpha, one row per sample."""
    a = alpha
    cols = []
    ones = np.ones_like(t)
    if family in (CurveFamily.POWER, CurveFamily.MULTI_POWER):
        u = t + 1.0
        logu = np.log(u)
        p1 = u ** a[2]
        cols = [ones, p1, a[1] * p1 * logu]
        if family is CurveFamily.MULTI_POWER:
            p2 = u ** a[4]
            cols += [p2, a[3] * p2 * logu]
    else:
        e1 = np.exp(a[2] * t)
        cols = [ones, e1, a[1] * t * e1]
        if family is CurveFamily.MULTI_EXPONENTIAL:
            e2 = np.exp(a[4] * t)
            cols += [e2, a[3] * t * e2]
    cols += [t, t * t]
    return np.stack(cols, axis=1)


@dataclass(frozen=True)
class ObservationSeries:
    """Per-epoch validation metric observations (epochs strictly increasing)."""

    epochs: tuple[int, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.epochs) != len(self.values):
            raise ValueError("epochs and values must have equal length")
        if len(self.epochs) < 1:
            raise ValueError("series needs at least one point")
        if any(e < 0 for e in self.epochs):
            raise ValueError("epochs must be non-negative")
        if any(b <= a for a, b in zip(self.epochs, self.epochs[1:])):
            raise ValueError("epochs must be strictly increasing")

    @classmethod
    def from_points(cls, points: Iterable[tuple[int, float]]) -> "ObservationSeries":
        pts = list(points)
        return cls(tuple(int(e) for e, _ in pts), tuple(float(v) for _, v in pts))

    @property
    def points(self) -> list[tuple[int, float]]:
        return list(zip(self.epochs, self.values))

    def __len__(self) -> int:
        return len(self.epochs)


@dataclass(frozen=True)
class CurveFit:
    """A fitted curve: family, parameters, diagnostics and knee point."""

    family: CurveFamily
    alpha: tuple[float, ...]
    rmse: float
    r_square: float  # NaN when the series is constant (undefined)
    knee: float
    horizon: float

    def value_at(self, t):
        return evaluate(self.family, self.alpha, t)

    def to_record(self) -> dict:
        r2 = None if math.isnan(self.r_square) else self.r_square
        return {
            "family": self.family.value,
            "alpha": list(self.alpha),
            "rmse": self.rmse,
            "r_square": r2,
            "knee": self.knee,
            "horizon": self.horizon,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "CurveFit":
        r2 = rec["r_square"]
        return cls(
            family=CurveFamily.from_tag(rec["family"]),
            alpha=tuple(float(v) for v in rec["alpha"]),
            rmse=float(rec["rmse"]),
            r_square=math.nan if r2 is None else float(r2),
            knee=float(rec["knee"]),
            horizon=float(rec["horizon"]),
        )


def knee_point(family: CurveFamily, alpha: Sequence[float], horizon: float) -> float:
    """Argmax of f_alpha on [0, horizon].

    The sign constraints make f' strictly decreasing, so the maximizer is the
    unique root of f' when one exists inside the interval, else a boundary.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    a = _check_alpha(family, alpha)
    d0 = derivative(family, a, 0.0)
    if d0 <= 0.0:
        return 0.0
    dh = derivative(family, a, horizon)
    if dh >= 0.0:
        return float(horizon)
    return float(brentq(lambda t: derivative(family, a, t), 0.0, horizon, xtol=1e-10))


def _bounds(family: CurveFamily) -> tuple[np.ndarray, np.ndarray]:
    n = family.n_params
    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    for i in family.negative_indices:
        ub[i] = -NEG_EPS
    return lb, ub


def _clip_to_bounds(x: np.ndarray, family: CurveFamily) -> np.ndarray:
    x = np.array(x, dtype=float)
    for i in family.negative_indices:
        x[i] = min(x[i], -NEG_EPS)
    return x


def initial_guesses(
    family: CurveFamily,
    t: np.ndarray,
    y: np.ndarray,
    n_starts: int = 5,
    seed: int = 0,
) -> list[np.ndarray]:
    """Deterministic multi-start schedule.

    Start 1 anchors the asymptote at max(y) and the depth at y[0]-max(y);
    the remaining starts jitter the rate parameter(s) across log scales and
    the depth coefficient(s) across magnitudes.
    """
    y_max = float(np.max(y))
    depth = float(y[0]) - y_max - NEG_EPS
    base_rate = -5.0 / (float(t[-1]) + 1.0)
    rng = np.random.default_rng(seed)

    def assemble(coeff: float, rate: float, rate2_scale: float = 8.0) -> np.ndarray:
        if family in (CurveFamily.POWER, CurveFamily.EXPONENTIAL):
            x = np.array([y_max, coeff, rate, 0.0, -NEG_EPS])
        else:
            # split the depth between the two convergence terms, with the
            # second term decaying on a different scale
            x = np.array(
                [y_max, coeff / 2.0, rate, coeff / 2.0, rate * rate2_scale, 0.0, -NEG_EPS]
            )
        return _clip_to_bounds(x, family)

    starts = [assemble(depth, base_rate)]
    while len(starts) < n_starts:
        rate_factor = 10.0 ** rng.uniform(-1.0, 1.5)
        coeff_factor = 10.0 ** rng.uniform(-0.5, 0.5)
        rate2_scale = 10.0 ** rng.uniform(0.3, 1.5)
        starts.append(assemble(depth * coeff_factor, base_rate * rate_factor, rate2_scale))
    return starts


def fit(
    series: ObservationSeries,
    family: CurveFamily,
    *,
    n_starts: int = 5,
    seed: int = 0,
    warm_start: Sequence[float] | None = None,
) -> CurveFit:
    """Fit the family to the series by multi-start bounded least squares.

    Returns the best solution across starts. A warm start, when given, is
    prepended to the schedule. Raises InsufficientData when the series cannot
    identify the family, FitFailure when every start fails.
    """
    if len(series) < family.n_params + 1:
        raise InsufficientData(
            f"{family.value} needs at least {family.n_params + 1} points, "
            f"got {len(series)}"
        )
    t = np.asarray(series.epochs, dtype=float)
    y = np.asarray(series.values, dtype=float)
    lb, ub = _bounds(family)

    def residual(a: np.ndarray) -> np.ndarray:
        return evaluate(family, a, t) - y

    def jac(a: np.ndarray) -> np.ndarray:
        return _jacobian(family, a, t)

    starts = initial_guesses(family, t, y, n_starts=n_starts, seed=seed)
    if warm_start is not None:
        ws = _clip_to_bounds(np.asarray(warm_start, dtype=float), family)
        if ws.shape == (family.n_params,) and np.all(np.isfinite(ws)):
            starts.insert(0, ws)

    best = None
    errors: list[str] = []
    for x0 in starts:
        try:
            res = least_squares(
                residual,
                x0,
                jac=jac,
                bounds=(lb, ub),
                method="trf",
                ftol=FIT_FTOL,
                xtol=FIT_XTOL,
                max_nfev=FIT_MAX_ITER,
            )
        except Exception as exc:  # solver blow-up on a bad start
            errors.append(f"{type(exc).__name__}: {exc}")
            continue
        if not np.all(np.isfinite(res.x)) or not np.isfinite(res.cost):
            errors.append("non-finite solution")
            continue
        if best is None or res.cost < best.cost:
            best = res
    if best is None:
        raise FitFailure(
            "all starts failed", diagnostics={"n_starts": len(starts), "errors": errors}
        )

    alpha = tuple(float(v) for v in best.x)
    horizon = float(t[-1])
    rmse, r_square = _diagnostics_arrays(y, evaluate(family, best.x, t))
    knee = knee_point(family, alpha, horizon) if horizon > 0 else 0.0
    return CurveFit(
        family=family,
        alpha=alpha,
        rmse=rmse,
        r_square=r_square,
        knee=knee,
        horizon=horizon,
    )


def _diagnostics_arrays(y: np.ndarray, y_hat: np.ndarray) -> tuple[float, float]:
    resid = y_hat - y
    rmse = float(np.sqrt(np.mean(resid * resid)))
    ss_res = float(np.sum(resid * resid))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    if ss_tot == 0.0:
        return rmse, math.nan
    return rmse, 1.0 - ss_res / ss_tot


def diagnostics(series: ObservationSeries, fit_result: CurveFit) -> tuple[float, float]:
    """RMSE and R-square of a fit against the series it was produced from.

    R-square is NaN for a constant series (total sum of squares is zero).
    """
    y = np.asarray(series.values, dtype=float)
    y_hat = evaluate(fit_result.family, fit_result.alpha, np.asarray(series.epochs, float))
    return _diagnostics_arrays(y, np.asarray(y_hat, dtype=float))


# --- corpus I/O -------------------------------------------------------------
#
# A corpus is a line-delimited JSON file, one series per line:
#   {"id": "curve-7", "points": [[0, 0.41], [1, 0.47], ...]}
# Fit reports mirror it, one record per fitted series.


def parse_corpus_line(line: str) -> tuple[str, ObservationSeries]:
    rec = json.loads(line)
    series_id = str(rec["id"])
    series = ObservationSeries.from_points((int(e), float(v)) for e, v in rec["points"])
    return series_id, series


def load_corpus(path) -> Iterator[tuple[int, str, "ObservationSeries | None", str]]:
    """Yield (line_no, series_id, series, error) per non-blank corpus line.

    Malformed lines yield series=None with the parse error message so callers
    can warn and skip.
    """
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                series_id, series = parse_corpus_line(line)
            except Exception as exc:
                yield line_no, "", None, f"{type(exc).__name__}: {exc}"
                continue
            yield line_no, series_id, series, ""


def fit_report_record(series_id: str, fit_result: CurveFit) -> dict:
    rec = {"id": series_id}
    rec.update(fit_result.to_record())
    return rec


def dump_record(rec: dict) -> str:
    """Canonical one-line JSON encoding (sorted keys, compact separators)."""
    return json.dumps(rec, sort_keys=True, separators=(",", ":"), allow_nan=False)
