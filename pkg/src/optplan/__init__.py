"""Staged-training optimization planner.

Plans hyper-parameter schedules for iterative learners: candidate schedules
form a DAG of training states, each state transition is trained until a
knee-point stopper calls it, and the best path is extracted by dynamic
programming. Trainers are external processes speaking a line-delimited JSON
protocol; a synthetic trainer with known dynamics ships for testing.
"""

__version__ = "0.1.0"

from .curvefit import (
    CurveFamily,
    CurveFit,
    FitFailure,
    InsufficientData,
    ObservationSeries,
    evaluate,
    fit,
    knee_point,
)
from .graph import (
    GraphValidationError,
    HyperParams,
    SamplingStrategy,
    StateKind,
    TrainingState,
    TransitionGraph,
    build_graph,
    final_states,
    topological_order,
)
from .stopper import KneeStopper, StopDecision, StopperConfig

__all__ = [
    "CurveFamily",
    "CurveFit",
    "FitFailure",
    "GraphValidationError",
    "HyperParams",
    "InsufficientData",
    "KneeStopper",
    "ObservationSeries",
    "SamplingStrategy",
    "StateKind",
    "StopDecision",
    "StopperConfig",
    "TrainingState",
    "TransitionGraph",
    "build_graph",
    "evaluate",
    "final_states",
    "fit",
    "knee_point",
    "topological_order",
]
