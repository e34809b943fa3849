"""Shared fixtures and independent oracles.

The oracles here are deliberately written without reusing the library's
construction paths: edge sets are enumerated literally from the transition
principles, knee points come from dense-grid argmax, and expected plan values
from exhaustive path walks.
"""

from __future__ import annotations

import numpy as np
import pytest

from optplan.curvefit import CurveFamily, evaluate
from optplan.graph import GraphMode, SamplingStrategy
from optplan.protocol import InProcessConnection
from optplan.simtrainer import Scenario, SimTrainer

# --- synthetic curve generation ----------------------------------------------


def bounded_exponential_curve(rng: np.random.Generator, knee: float) -> tuple[float, ...]:
    """Constraint-satisfying exponential-family parameters whose maximum sits
    at the requested knee, with values inside (0, 1) throughout the window a
    stopper would ever observe (up to knee + 25 epochs)."""
    s0 = rng.uniform(0.30, 0.45)
    peak = rng.uniform(0.78, 0.92)
    rise = peak - s0
    a3 = rng.uniform(-0.35, -0.12)
    a5 = -rng.uniform(0.6, 1.0) * 0.55 * rise / knee**2
    shape = np.exp(a3 * knee) - 1.0 - a3 * knee * np.exp(a3 * knee)
    a2 = (rise + a5 * knee**2) / shape
    a4 = -a2 * a3 * np.exp(a3 * knee) - 2 * a5 * knee
    a1 = s0 - a2
    return (a1, a2, a3, a4, a5)


def grid_argmax(family: CurveFamily, alpha, t_max: float, step: float = 0.01) -> float:
    """Dense-grid argmax oracle, independent of the root-finding knee solver."""
    grid = np.arange(0.0, t_max + step, step)
    return float(grid[np.argmax(evaluate(family, alpha, grid))])


def random_constrained_alpha(rng: np.random.Generator, family: CurveFamily) -> np.ndarray:
    """Random draw satisfying the family's sign constraints."""
    n = family.n_params
    alpha = np.empty(n)
    alpha[0] = rng.uniform(-1.0, 2.0)
    # indices of the convergence-term coefficient/rate pairs, then (linear, quad)
    if n == 5:
        pairs = [(1, 2)]
        lin, quad = 3, 4
    else:
        pairs = [(1, 2), (3, 4)]
        lin, quad = 5, 6
    for coeff_i, rate_i in pairs:
        alpha[coeff_i] = -(10.0 ** rng.uniform(-3.0, 0.5))
        alpha[rate_i] = -(10.0 ** rng.uniform(-3.0, 1.0))
    alpha[lin] = rng.uniform(-0.05, 0.05)
    alpha[quad] = -(10.0 ** rng.uniform(-6.0, -2.0))
    return alpha


# --- brute-force edge enumeration oracle --------------------------------------


def brute_force_edges(
    n_l: int,
    n_r: int,
    strategies: list[SamplingStrategy],
    mode: GraphMode,
) -> set[tuple[int, int]]:
    """Enumerate every principle-satisfying ordered state pair literally.

    Uses only the documented deterministic id convention (0 = entry, then
    strategy-major / clip-major / rate-minor), not the library's builder.
    """
    order = [s for s in (SamplingStrategy.CONSECUTIVE, SamplingStrategy.UNIFORM) if s in strategies]
    ids: dict[tuple[str, int, int], int] = {}
    next_id = 1
    for strat in order:
        for c in range(n_l):
            for r in range(n_r):
                ids[(strat.value, c, r)] = next_id
                next_id += 1

    edges: set[tuple[int, int]] = set()
    for strat in order:
        # training enters at the shortest clip and highest rate
        edges.add((0, ids[(strat.value, 0, 0)]))
    for (s1, c1, r1), u in ids.items():
        for (s2, c2, r2), v in ids.items():
            if u == v or s1 != s2:
                continue  # transitions never cross sampling strategies
            clip_up = c2 > c1
            rate_down = r2 > r1
            if c2 < c1 or r2 < r1:
                continue  # clip never shrinks, rate never rises
            if mode is GraphMode.BASIC:
                if clip_up != rate_down:
                    edges.add((u, v))
            else:
                if clip_up or rate_down:
                    edges.add((u, v))
    return edges


# --- simulator scenarios -------------------------------------------------------


def make_scenario(
    *,
    cons: list[list[float]] | None = None,
    unif: list[list[float]] | None = None,
    sigma: float = 0.0,
    rate_decay: list[float] = (-0.3, -0.15, -0.08),
    curvature: list[float] = (-8e-4, -5e-4, -3e-4),
    drift: float = 5e-4,
    initial_metric: float = 0.05,
    start_fraction: float = 0.9,
    name: str = "test",
) -> Scenario:
    tables = {}
    if cons is not None:
        tables["consecutive"] = tuple(tuple(row) for row in cons)
    if unif is not None:
        tables["uniform"] = tuple(tuple(row) for row in unif)
    return Scenario(
        name=name,
        sigma=sigma,
        initial_metric=initial_metric,
        start_fraction=start_fraction,
        asymptote=tables,
        rate_decay=tuple(rate_decay),
        curvature=tuple(curvature),
        drift=drift,
    )


DEFAULT_CONS_TABLE = [
    [0.55, 0.60, 0.63],
    [0.62, 0.68, 0.72],
    [0.66, 0.73, 0.78],
]
DEFAULT_UNIF_TABLE = [
    [0.51, 0.56, 0.59],
    [0.58, 0.64, 0.68],
    [0.62, 0.69, 0.74],
]


@pytest.fixture
def sim_scenario() -> Scenario:
    return make_scenario(cons=DEFAULT_CONS_TABLE, unif=DEFAULT_UNIF_TABLE, sigma=1e-3)


def engine_factory(scenario: Scenario):
    """Connection factory for in-process planning against the simulator."""

    def factory():
        return InProcessConnection(SimTrainer(scenario))

    return factory
