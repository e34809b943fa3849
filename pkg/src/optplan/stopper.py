"""Streaming early-stopping controller for one state transition.

After every observed epoch the controller refits the performance-epoch curve,
estimates the knee point, and stops once the current epoch has run a fixed
number of delay epochs past that estimate (or the epoch budget is exhausted).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable

from . import curvefit
from .curvefit import CurveFamily, CurveFit, FitFailure, ObservationSeries


class Verdict(enum.Enum):
    CONTINUE = "continue"
    STOP = "stop"


class StopReason(enum.Enum):
    KNEE = "knee"  # epoch ran delay_epochs past the knee estimate
    BUDGET = "budget"  # epoch budget exhausted before the curve plateaued


@dataclass(frozen=True)
class StopperConfig:
    delay_epochs: int = 10
    family: CurveFamily = CurveFamily.EXPONENTIAL
    min_points: int | None = None  # default: max(6, n_params + 1)
    horizon_cap: int = 200
    fit_seed: int = 0
    # Streaming refits run every epoch with the previous solution as a warm
    # start plus the fresh anchor start, so the cold schedule stays minimal
    # here; standalone fits default to the full 5-start schedule.
    n_starts: int = 1

    def __post_init__(self):
        if self.delay_epochs < 1:
            raise ValueError("delay_epochs must be >= 1")
        if self.horizon_cap < 1:
            raise ValueError("horizon_cap must be >= 1")
        floor = self.family.n_params + 1
        if self.min_points is None:
            object.__setattr__(self, "min_points", max(6, floor))
        elif self.min_points < floor:
            raise ValueError(
                f"min_points must be >= {floor} for {self.family.value}"
            )


@dataclass(frozen=True)
class StopDecision:
    verdict: Verdict
    epoch: int
    best_epoch: int | None = None  # set iff verdict is STOP
    knee_estimate: float | None = None
    fit: CurveFit | None = None
    reason: StopReason | None = None
    fit_failed: bool = False

    @property
    def should_stop(self) -> bool:
        return self.verdict is Verdict.STOP


class KneeStopper:
    """Single-writer controller; one instance per transition.

    Epochs must arrive densely starting at 0. Decisions are a pure function
    of the observation stream and the config, so replaying a recorded stream
    reproduces the recorded decisions exactly.
    """

    def __init__(self, config: StopperConfig):
        self.config = config
        self._epochs: list[int] = []
        self._values: list[float] = []
        self._last_alpha: tuple[float, ...] | None = None

    @property
    def series(self) -> ObservationSeries:
        return ObservationSeries(tuple(self._epochs), tuple(self._values))

    def observe(self, epoch: int, metric: float) -> StopDecision:
        if epoch != len(self._epochs):
            raise ValueError(
                f"out-of-order observation: expected epoch {len(self._epochs)}, got {epoch}"
            )
        if not (0.0 <= metric <= 1.0) or not math.isfinite(metric):
            raise ValueError(f"metric must lie in [0, 1], got {metric}")
        self._epochs.append(epoch)
        self._values.append(float(metric))

        cfg = self.config
        fit_result: CurveFit | None = None
        fit_failed = False
        knee: float | None = None
        if len(self._epochs) >= cfg.min_points:
            try:
                fit_result = curvefit.fit(
                    self.series,
                    cfg.family,
                    n_starts=cfg.n_starts,
                    seed=cfg.fit_seed,
                    warm_start=self._last_alpha,
                )
            except FitFailure:
                fit_failed = True
            if fit_result is not None:
                self._last_alpha = fit_result.alpha
                # The stop test never extrapolates past observed data: the
                # knee is taken over [0, current epoch].
                knee = curvefit.knee_point(cfg.family, fit_result.alpha, float(epoch))

        if knee is not None and epoch > knee + cfg.delay_epochs:
            best = min(max(int(math.floor(knee + 0.5)), 0), epoch)
            return StopDecision(
                verdict=Verdict.STOP,
                epoch=epoch,
                best_epoch=best,
                knee_estimate=knee,
                fit=fit_result,
                reason=StopReason.KNEE,
            )
        if epoch >= cfg.horizon_cap:
            # Never plateaued within budget: fall back to the observed argmax.
            best = max(range(len(self._values)), key=lambda i: (self._values[i], -i))
            return StopDecision(
                verdict=Verdict.STOP,
                epoch=epoch,
                best_epoch=self._epochs[best],
                knee_estimate=knee,
                fit=fit_result,
                reason=StopReason.BUDGET,
                fit_failed=fit_failed,
            )
        return StopDecision(
            verdict=Verdict.CONTINUE,
            epoch=epoch,
            knee_estimate=knee,
            fit=fit_result,
            fit_failed=fit_failed,
        )

    def replay(self, stream: Iterable[tuple[int, float]]) -> list[StopDecision]:
        """Feed a recorded stream; returns the decision per observation."""
        return [self.observe(epoch, metric) for epoch, metric in stream]
