"""Training states and the candidate transition graph.

A training state is a fixed hyper-parameter assignment (sampling strategy,
clip length, learning rate). States form a DAG whose edges are the permitted
hyper-parameter changes:

  * transitions never cross sampling strategies,
  * training enters the grid at the shortest clip and highest rate,
  * along an edge the clip length never shrinks and the learning rate never
    rises; basic graphs change exactly one dimension per edge, extended
    graphs additionally allow changing both at once.

Graphs are immutable after construction and safe to share across workers.
"""

from __future__ import annotations

import enum
import heapq
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence


class GraphValidationError(ValueError):
    """Raised when inputs or a constructed graph violate an invariant."""


class SamplingStrategy(enum.Enum):
    CONSECUTIVE = "consecutive"
    UNIFORM = "uniform"


# Deterministic ordering used for state id assignment.
_STRATEGY_ORDER = (SamplingStrategy.CONSECUTIVE, SamplingStrategy.UNIFORM)


class StateKind(enum.Enum):
    INITIAL = "initial"
    INTERMEDIATE = "intermediate"
    FINAL = "final"


class GraphMode(enum.Enum):
    BASIC = "basic"
    EXTENDED = "extended"


@dataclass(frozen=True)
class HyperParams:
    """One state's hyper-parameters; indices point into the candidate lists."""

    sampling: SamplingStrategy
    clip_len_idx: int
    lr_idx: int
    extra: Mapping[str, object] = field(default_factory=dict)

    def wire_payload(
        self, clip_lengths: Sequence[int], learning_rates: Sequence[float]
    ) -> dict:
        """Resolved values plus indices, as sent to trainers."""
        return {
            "sampling": self.sampling.value,
            "clip_len": clip_lengths[self.clip_len_idx],
            "clip_len_idx": self.clip_len_idx,
            "lr": learning_rates[self.lr_idx],
            "lr_idx": self.lr_idx,
            "extra": dict(self.extra),
        }


@dataclass(frozen=True)
class TrainingState:
    id: int
    kind: StateKind
    params: HyperParams | None  # None iff kind is INITIAL

    def label(self) -> str:
        if self.params is None:
            return "start"
        p = self.params
        return f"{p.sampling.value[:4]}-l{p.clip_len_idx}-r{p.lr_idx}"


@dataclass(frozen=True)
class TransitionGraph:
    states: tuple[TrainingState, ...]
    edges: tuple[tuple[int, int], ...]
    clip_lengths: tuple[int, ...]
    learning_rates: tuple[float, ...]
    strategies: tuple[SamplingStrategy, ...]
    mode: GraphMode

    @property
    def n_l(self) -> int:
        return len(self.clip_lengths)

    @property
    def n_r(self) -> int:
        return len(self.learning_rates)

    def state(self, state_id: int) -> TrainingState:
        st = self._by_id().get(state_id)
        if st is None:
            raise KeyError(f"no state with id {state_id}")
        return st

    def _by_id(self) -> dict[int, TrainingState]:
        return {s.id: s for s in self.states}

    def out_edges(self, state_id: int) -> list[tuple[int, int]]:
        return [e for e in self.edges if e[0] == state_id]

    def in_edges(self, state_id: int) -> list[tuple[int, int]]:
        return [e for e in self.edges if e[1] == state_id]

    @property
    def initial_id(self) -> int:
        for s in self.states:
            if s.kind is StateKind.INITIAL:
                return s.id
        raise GraphValidationError("graph has no initial state")

    def to_json(self) -> str:
        """Deterministic serialization; byte-identical for identical inputs."""
        doc = {
            "mode": self.mode.value,
            "clip_lengths": list(self.clip_lengths),
            "learning_rates": list(self.learning_rates),
            "strategies": [s.value for s in self.strategies],
            "states": [
                {
                    "id": s.id,
                    "kind": s.kind.value,
                    "params": None
                    if s.params is None
                    else {
                        "sampling": s.params.sampling.value,
                        "clip_len_idx": s.params.clip_len_idx,
                        "lr_idx": s.params.lr_idx,
                        "extra": dict(sorted(s.params.extra.items())),
                    },
                }
                for s in self.states
            ],
            "edges": [list(e) for e in self.edges],
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TransitionGraph":
        doc = json.loads(text)
        states = []
        for s in doc["states"]:
            params = None
            if s["params"] is not None:
                p = s["params"]
                params = HyperParams(
                    sampling=SamplingStrategy(p["sampling"]),
                    clip_len_idx=int(p["clip_len_idx"]),
                    lr_idx=int(p["lr_idx"]),
                    extra=dict(p.get("extra", {})),
                )
            states.append(
                TrainingState(id=int(s["id"]), kind=StateKind(s["kind"]), params=params)
            )
        graph = cls(
            states=tuple(states),
            edges=tuple((int(u), int(v)) for u, v in doc["edges"]),
            clip_lengths=tuple(int(v) for v in doc["clip_lengths"]),
            learning_rates=tuple(float(v) for v in doc["learning_rates"]),
            strategies=tuple(SamplingStrategy(s) for s in doc["strategies"]),
            mode=GraphMode(doc["mode"]),
        )
        validate(graph)
        return graph


def _check_candidates(
    clip_lengths: Sequence[int], learning_rates: Sequence[float]
) -> None:
    if not clip_lengths:
        raise GraphValidationError("clip length candidates must be non-empty")
    if not learning_rates:
        raise GraphValidationError("learning rate candidates must be non-empty")
    if any(b <= a for a, b in zip(clip_lengths, clip_lengths[1:])):
        raise GraphValidationError("clip lengths must be strictly increasing")
    if any(b >= a for a, b in zip(learning_rates, learning_rates[1:])):
        raise GraphValidationError("learning rates must be strictly decreasing")


def build_graph(
    clip_lengths: Sequence[int],
    learning_rates: Sequence[float],
    strategies: Iterable[SamplingStrategy],
    mode: GraphMode,
    extra: Mapping[str, object] | None = None,
) -> TransitionGraph:
    """Construct the candidate transition graph over the given grids.

    State ids are deterministic: 0 is the entry state, then strategy-major,
    clip-length-major, rate-minor, so the final state of each strategy is the
    last id of its block.
    """
    _check_candidates(clip_lengths, learning_rates)
    strategy_set = set(strategies)
    if not strategy_set:
        raise GraphValidationError("at least one sampling strategy is required")
    ordered = tuple(s for s in _STRATEGY_ORDER if s in strategy_set)
    extra = dict(extra or {})

    n_l, n_r = len(clip_lengths), len(learning_rates)
    states: list[TrainingState] = [
        TrainingState(id=0, kind=StateKind.INITIAL, params=None)
    ]
    index_of: dict[tuple[SamplingStrategy, int, int], int] = {}
    next_id = 1
    for strat in ordered:
        for c in range(n_l):
            for r in range(n_r):
                kind = (
                    StateKind.FINAL
                    if (c == n_l - 1 and r == n_r - 1)
                    else StateKind.INTERMEDIATE
                )
                states.append(
                    TrainingState(
                        id=next_id,
                        kind=kind,
                        params=HyperParams(strat, c, r, extra),
                    )
                )
                index_of[(strat, c, r)] = next_id
                next_id += 1

    edges: list[tuple[int, int]] = []
    for strat in ordered:
        edges.append((0, index_of[(strat, 0, 0)]))
        for c1 in range(n_l):
            for r1 in range(n_r):
                for c2 in range(n_l):
                    for r2 in range(n_r):
                        if _edge_allowed(c1, r1, c2, r2, mode):
                            edges.append(
                                (index_of[(strat, c1, r1)], index_of[(strat, c2, r2)])
                            )
    edges.sort()

    graph = TransitionGraph(
        states=tuple(states),
        edges=tuple(edges),
        clip_lengths=tuple(int(v) for v in clip_lengths),
        learning_rates=tuple(float(v) for v in learning_rates),
        strategies=ordered,
        mode=mode,
    )
    validate(graph)
    return graph


def _edge_allowed(c1: int, r1: int, c2: int, r2: int, mode: GraphMode) -> bool:
    clip_up = c2 > c1
    rate_down = r2 > r1  # higher index = lower rate
    if c2 < c1 or r2 < r1:
        return False
    if mode is GraphMode.BASIC:
        return clip_up != rate_down  # exactly one dimension moves
    return clip_up or rate_down


def topological_order(graph: TransitionGraph) -> list[int]:
    """Kahn's algorithm with ties broken by ascending state id."""
    indeg = {s.id: 0 for s in graph.states}
    succ: dict[int, list[int]] = {s.id: [] for s in graph.states}
    for u, v in graph.edges:
        indeg[v] += 1
        succ[u].append(v)
    ready = [sid for sid, d in sorted(indeg.items()) if d == 0]
    heapq.heapify(ready)
    order: list[int] = []
    while ready:
        u = heapq.heappop(ready)
        order.append(u)
        for v in succ[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(ready, v)
    if len(order) != len(graph.states):
        raise GraphValidationError("transition graph contains a cycle")
    return order


def final_states(graph: TransitionGraph) -> list[int]:
    return [s.id for s in graph.states if s.kind is StateKind.FINAL]


def _reachable_from(graph: TransitionGraph, root: int) -> set[int]:
    succ: dict[int, list[int]] = {s.id: [] for s in graph.states}
    for u, v in graph.edges:
        succ[u].append(v)
    seen = {root}
    stack = [root]
    while stack:
        u = stack.pop()
        for v in succ[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return seen


def validate(graph: TransitionGraph) -> None:
    """Check every structural invariant; raises GraphValidationError."""
    _check_candidates(graph.clip_lengths, graph.learning_rates)
    ids = [s.id for s in graph.states]
    if len(set(ids)) != len(ids):
        raise GraphValidationError("duplicate state ids")
    if len(set(graph.edges)) != len(graph.edges):
        raise GraphValidationError("duplicate edges")
    by_id = {s.id: s for s in graph.states}

    initials = [s for s in graph.states if s.kind is StateKind.INITIAL]
    if len(initials) != 1:
        raise GraphValidationError(f"expected exactly one initial state, got {len(initials)}")
    initial = initials[0]
    if initial.params is not None:
        raise GraphValidationError("initial state must carry no hyper-parameters")

    n_l, n_r = graph.n_l, graph.n_r
    finals_by_strategy: dict[SamplingStrategy, list[TrainingState]] = {}
    for s in graph.states:
        if s.kind is StateKind.INITIAL:
            continue
        if s.params is None:
            raise GraphValidationError(f"state {s.id} has no hyper-parameters")
        p = s.params
        if not (0 <= p.clip_len_idx < n_l and 0 <= p.lr_idx < n_r):
            raise GraphValidationError(f"state {s.id} indices out of range")
        if p.sampling not in graph.strategies:
            raise GraphValidationError(f"state {s.id} uses a disabled strategy")
        if s.kind is StateKind.FINAL:
            finals_by_strategy.setdefault(p.sampling, []).append(s)
            if p.clip_len_idx != n_l - 1 or p.lr_idx != n_r - 1:
                raise GraphValidationError(
                    f"final state {s.id} is not at maximal clip length / minimal rate"
                )
    for strat in graph.strategies:
        if len(finals_by_strategy.get(strat, [])) != 1:
            raise GraphValidationError(f"expected exactly one final state for {strat.value}")

    for u, v in graph.edges:
        if u not in by_id or v not in by_id:
            raise GraphValidationError(f"edge ({u}, {v}) references unknown state")
        src, dst = by_id[u], by_id[v]
        if dst.kind is StateKind.INITIAL:
            raise GraphValidationError("no edge may enter the initial state")
        if src.kind is StateKind.INITIAL:
            if dst.params.clip_len_idx != 0 or dst.params.lr_idx != 0:
                raise GraphValidationError(
                    "entry edges must target the shortest clip at the highest rate"
                )
            continue
        sp, dp = src.params, dst.params
        if sp.sampling is not dp.sampling:
            raise GraphValidationError(f"edge ({u}, {v}) crosses sampling strategies")
        if not _edge_allowed(sp.clip_len_idx, sp.lr_idx, dp.clip_len_idx, dp.lr_idx, graph.mode):
            raise GraphValidationError(f"edge ({u}, {v}) violates the transition rules")

    topological_order(graph)  # raises on cycles

    reachable = _reachable_from(graph, initial.id)
    for fid in final_states(graph):
        if fid not in reachable:
            raise GraphValidationError(f"final state {fid} unreachable from initial")
