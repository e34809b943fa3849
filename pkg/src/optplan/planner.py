"""Dynamic programming over the transition graph.

Every candidate transition is explored once, in topological order: fine-tune
from the source state's best checkpoint under the target state's
hyper-parameters until the knee stopper calls it, score the transition by the
validation metric at the chosen epoch, and keep, per state, the predecessor
whose transition scored highest. The plan is the back-traced predecessor
chain of the best final state.

Exploration outcomes stream into the run ledger; a resumed run replays the
ledger and only trains what is missing.
"""

from __future__ import annotations

import json
import logging
import threading
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from typing import Callable

from . import ledger as ledger_mod
from .curvefit import CurveFit, ObservationSeries
from .graph import SamplingStrategy, TransitionGraph, final_states, topological_order
from .ledger import LedgerError, LedgerWriter, PartialTransition
from .protocol import INIT_CHECKPOINT, ConnectionLost, ProtocolViolation, TrainerConnection
from .stopper import KneeStopper, StopDecision, StopperConfig, StopReason

log = logging.getLogger("optplan.planner")


class PlanningFailed(Exception):
    """No final state could be reached (or the ledger contradicts the run)."""


class TransitionFailed(Exception):
    """The trainer failed while exploring one transition."""

    def __init__(self, from_id: int, to_id: int, reason: str):
        super().__init__(f"transition {from_id}->{to_id} failed: {reason}")
        self.from_id = from_id
        self.to_id = to_id
        self.reason = reason


@dataclass(frozen=True)
class TransitionRecord:
    """Outcome of exploring one transition."""

    from_id: int
    to_id: int
    epochs_trained: int
    chosen_epoch: int
    value: float
    metric_trace: ObservationSeries
    fit: CurveFit | None
    checkpoint_ref: str
    stop_reason: StopReason

    def to_doc(self) -> dict:
        return {
            "from": self.from_id,
            "to": self.to_id,
            "epochs_trained": self.epochs_trained,
            "chosen_epoch": self.chosen_epoch,
            "value": self.value,
            "metric_trace": [[e, v] for e, v in self.metric_trace.points],
            "fit": None if self.fit is None else self.fit.to_record(),
            "checkpoint_ref": self.checkpoint_ref,
            "stop_reason": self.stop_reason.value,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "TransitionRecord":
        return cls(
            from_id=int(doc["from"]),
            to_id=int(doc["to"]),
            epochs_trained=int(doc["epochs_trained"]),
            chosen_epoch=int(doc["chosen_epoch"]),
            value=float(doc["value"]),
            metric_trace=ObservationSeries.from_points(
                (int(e), float(v)) for e, v in doc["metric_trace"]
            ),
            fit=None if doc["fit"] is None else CurveFit.from_record(doc["fit"]),
            checkpoint_ref=str(doc["checkpoint_ref"]),
            stop_reason=StopReason(doc["stop_reason"]),
        )


@dataclass(frozen=True)
class ResolvedState:
    """Best way to arrive at one state."""

    value: float
    predecessor: int
    chosen_epoch: int
    cumulative_epochs: int  # actual epochs kept along the whole chain
    checkpoint_ref: str


@dataclass
class PlanState:
    """Mutable planning blackboard: per-state best plus the explored map."""

    best: dict[int, ResolvedState] = field(default_factory=dict)
    explored: dict[tuple[int, int], TransitionRecord] = field(default_factory=dict)


@dataclass(frozen=True)
class OptimizationPlan:
    """The solved path with its per-hop chosen epochs."""

    run_id: str
    path: tuple[int, ...]
    epochs: tuple[int, ...]
    final_value: float
    winning_strategy: SamplingStrategy
    cumulative_epochs: int

    def to_doc(self, graph: TransitionGraph | None = None) -> dict:
        doc = {
            "run_id": self.run_id,
            "path": list(self.path),
            "epochs": list(self.epochs),
            "final_value": self.final_value,
            "winning_strategy": self.winning_strategy.value,
            "cumulative_epochs": self.cumulative_epochs,
        }
        if graph is not None:
            doc["path_labels"] = [graph.state(sid).label() for sid in self.path]
        return doc

    def to_json(self, graph: TransitionGraph | None = None) -> str:
        return json.dumps(self.to_doc(graph), sort_keys=True, indent=2) + "\n"


def explore_transition(
    conn: TrainerConnection,
    graph: TransitionGraph,
    from_id: int,
    to_id: int,
    source_ref: str,
    stopper_cfg: StopperConfig,
    ledger: LedgerWriter,
    resume_from: PartialTransition | None = None,
) -> TransitionRecord:
    """Train one transition until the stopper calls it; retains only the
    chosen epoch's checkpoint.

    When resume_from is given, its recorded epochs are replayed through a
    fresh stopper (reproducing the recorded decisions) before any new trainer
    work happens.
    """
    if (from_id, to_id) not in set(graph.edges):
        raise ValueError(f"({from_id}, {to_id}) is not an edge of the graph")
    hyperparams = graph.state(to_id).params.wire_payload(
        graph.clip_lengths, graph.learning_rates
    )
    stopper = KneeStopper(stopper_cfg)
    refs: list[str] = []
    values: list[float] = []
    decision: StopDecision | None = None

    if resume_from is None:
        ledger.append(
            "transition_started",
            {
                "from": from_id,
                "to": to_id,
                "source_ref": source_ref,
                "hyperparams": hyperparams,
                "from_label": graph.state(from_id).label(),
                "to_label": graph.state(to_id).label(),
            },
        )
    else:
        for epoch, metric, ref in resume_from.observed:
            decision = stopper.observe(epoch, metric)
            refs.append(ref)
            values.append(metric)
            if decision.should_stop:
                break

    while decision is None or not decision.should_stop:
        epoch = len(refs)
        prev_ref = refs[-1] if refs else source_ref
        resp = conn.train_epoch(prev_ref, hyperparams, epoch)
        if resp.type == "error":
            raise TransitionFailed(
                from_id, to_id, f"{resp.fields.get('code')}: {resp.fields.get('message')}"
            )
        if resp.type != "trained":
            raise TransitionFailed(from_id, to_id, f"unexpected response {resp.type!r}")
        metric = resp.fields["metric"]
        ref = resp.fields["checkpoint_ref"]
        decision = stopper.observe(epoch, metric)
        refs.append(ref)
        values.append(metric)
        ledger.append(
            "epoch_observed",
            {
                "from": from_id,
                "to": to_id,
                "epoch": epoch,
                "metric": metric,
                "checkpoint_ref": ref,
                "verdict": decision.verdict.value,
                "knee_estimate": decision.knee_estimate,
                "fit_failed": decision.fit_failed,
            },
        )

    chosen = decision.best_epoch
    for epoch, ref in enumerate(refs):
        if epoch != chosen:
            _release_quietly(conn, ref)
    record = TransitionRecord(
        from_id=from_id,
        to_id=to_id,
        epochs_trained=len(refs),
        chosen_epoch=chosen,
        value=values[chosen],
        metric_trace=ObservationSeries(tuple(range(len(values))), tuple(values)),
        fit=decision.fit,
        checkpoint_ref=refs[chosen],
        stop_reason=decision.reason,
    )
    ledger.append(
        "transition_stopped",
        {"from": from_id, "to": to_id, "record": record.to_doc()},
    )
    return record


def _release_quietly(conn: TrainerConnection, ref: str):
    try:
        resp = conn.release_checkpoint(ref)
        if resp.type == "error":
            log.debug("release of %s answered %s", ref, resp.fields.get("code"))
    except (ConnectionLost, ProtocolViolation) as exc:
        log.warning("release of %s failed: %s", ref, exc)


def extract_path(
    plan_state: PlanState,
    final_id: int,
    graph: TransitionGraph,
    run_id: str = "run",
) -> OptimizationPlan:
    """Back-trace the best-predecessor chain from a final state."""
    initial = graph.initial_id
    edge_set = set(graph.edges)
    path = [final_id]
    epochs: list[int] = []
    cursor = final_id
    while cursor != initial:
        resolved = plan_state.best.get(cursor)
        if resolved is None:
            raise PlanningFailed(f"broken predecessor chain at state {cursor}")
        if (resolved.predecessor, cursor) not in edge_set:
            raise PlanningFailed(
                f"recorded predecessor {resolved.predecessor}->{cursor} is not a graph edge"
            )
        epochs.append(resolved.chosen_epoch)
        cursor = resolved.predecessor
        path.append(cursor)
    path.reverse()
    epochs.reverse()
    final = plan_state.best[final_id]
    return OptimizationPlan(
        run_id=run_id,
        path=tuple(path),
        epochs=tuple(epochs),
        final_value=final.value,
        winning_strategy=graph.state(final_id).params.sampling,
        cumulative_epochs=final.cumulative_epochs,
    )


class _ConnectionPool:
    """Lazy pool of initialized trainer connections, one per borrower."""

    def __init__(self, factory: Callable[[], TrainerConnection], run_id: str, seed: int):
        self._factory = factory
        self._run_id = run_id
        self._seed = seed
        self._idle: list[TrainerConnection] = []
        self._all: list[TrainerConnection] = []
        self._lock = threading.Lock()

    def borrow(self) -> TrainerConnection:
        with self._lock:
            if self._idle:
                return self._idle.pop()
        conn = self._factory()
        conn.init(self._run_id, self._seed)
        with self._lock:
            self._all.append(conn)
        return conn

    def give_back(self, conn: TrainerConnection):
        with self._lock:
            self._idle.append(conn)

    def discard(self, conn: TrainerConnection):
        with self._lock:
            if conn in self._all:
                self._all.remove(conn)
        try:
            conn.close()
        except Exception:
            pass

    def close_all(self):
        with self._lock:
            conns, self._all, self._idle = self._all, [], []
        for conn in conns:
            try:
                conn.close()
            except Exception:
                pass


def plan(
    graph: TransitionGraph,
    connection_factory: Callable[[], TrainerConnection],
    stopper_cfg: StopperConfig,
    ledger_path,
    *,
    run_id: str = "run",
    seed: int = 0,
    workers: int = 1,
    resume: bool = False,
    retries: int = 0,
) -> OptimizationPlan:
    """Explore the whole graph and return the optimal plan.

    With resume=True an existing ledger is replayed first: completed
    transitions are reused verbatim, a partial transition continues from its
    last recorded epoch, and an already-extracted plan short-circuits without
    touching the trainer.
    """
    events, truncated = ledger_mod.read_events(ledger_path)
    if events and not resume:
        raise PlanningFailed(
            f"ledger {ledger_path} already has {len(events)} events; pass resume to continue"
        )
    if truncated:
        log.warning("ledger %s has a truncated trailing line; ignoring it", ledger_path)
    replay = ledger_mod.build_replay(events)
    if replay.run_id is not None and replay.run_id != run_id:
        raise PlanningFailed(
            f"ledger belongs to run {replay.run_id!r}, not {run_id!r}"
        )
    edge_set = set(graph.edges)
    for key in (*replay.completed, *replay.failed, *replay.partial):
        if key not in edge_set:
            raise LedgerError(
                f"ledger references transition {key} which is not an edge of "
                f"this graph; was the configuration changed mid-run?"
            )
        recorded = replay.hyperparams.get(key)
        expected = graph.state(key[1]).params.wire_payload(
            graph.clip_lengths, graph.learning_rates
        )
        if recorded is not None and recorded != expected:
            raise LedgerError(
                f"ledger's hyper-parameters for transition {key} do not match "
                f"this graph; was the configuration changed mid-run?"
            )

    plan_state = PlanState()
    if replay.plan is not None:
        # Completed run: reconstruct without any trainer work.
        return _plan_from_doc(replay.plan, graph)

    writer = LedgerWriter(ledger_path, run_id, start_seq=replay.n_events)
    pool = _ConnectionPool(connection_factory, run_id, seed)
    state_lock = threading.Lock()
    try:
        _run_dp(graph, stopper_cfg, writer, pool, replay, plan_state, state_lock,
                workers=workers, retries=retries)
        winner = _pick_final(graph, plan_state)
        result = extract_path(plan_state, winner, graph, run_id=run_id)
        writer.append("plan_extracted", {"plan": result.to_doc(graph)})
        return result
    finally:
        pool.close_all()
        writer.close()


def _plan_from_doc(doc: dict, graph: TransitionGraph) -> OptimizationPlan:
    return OptimizationPlan(
        run_id=str(doc["run_id"]),
        path=tuple(int(v) for v in doc["path"]),
        epochs=tuple(int(v) for v in doc["epochs"]),
        final_value=float(doc["final_value"]),
        winning_strategy=SamplingStrategy(doc["winning_strategy"]),
        cumulative_epochs=int(doc["cumulative_epochs"]),
    )


def _run_dp(graph, stopper_cfg, writer, pool, replay, plan_state, state_lock,
            workers: int, retries: int):
    topo = topological_order(graph)
    initial = graph.initial_id
    in_edges: dict[int, list[tuple[int, int]]] = {s.id: [] for s in graph.states}
    for u, v in graph.edges:
        in_edges[v].append((u, v))
    for edges in in_edges.values():
        edges.sort()

    settled: set[int] = {initial}
    pending = [sid for sid in topo if sid != initial]

    def task(state_id: int):
        _resolve_state(
            graph, state_id, in_edges[state_id], stopper_cfg, writer, pool,
            replay, plan_state, state_lock, retries,
        )
        return state_id

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        in_flight = {}
        while pending or in_flight:
            ready = [
                sid
                for sid in pending
                if all(src in settled for src, _ in in_edges[sid])
            ]
            for sid in ready:
                pending.remove(sid)
                in_flight[executor.submit(task, sid)] = sid
            if not in_flight:
                # DAG + topological order guarantee progress
                raise PlanningFailed("planning stalled; graph inconsistent")
            done, _ = wait(in_flight, return_when=FIRST_COMPLETED)
            for fut in done:
                sid = in_flight.pop(fut)
                fut.result()  # propagate unexpected errors
                settled.add(sid)


def _resolve_state(graph, state_id, edges, stopper_cfg, writer, pool, replay,
                   plan_state, state_lock, retries):
    initial = graph.initial_id
    candidates: list[tuple[TransitionRecord, int]] = []  # record, source chain epochs
    conn = None
    try:
        for src, dst in edges:
            with state_lock:
                src_best = plan_state.best.get(src)
            if src == initial:
                source_ref = INIT_CHECKPOINT
                src_cum = 0
            elif src_best is None:
                continue  # unreachable or failed source: edge is not explored
            else:
                source_ref = src_best.checkpoint_ref
                src_cum = src_best.cumulative_epochs

            key = (src, dst)
            if key in replay.completed:
                record = TransitionRecord.from_doc(replay.completed[key])
            elif key in replay.failed:
                continue
            else:
                if conn is None:
                    conn = pool.borrow()
                record = None
                attempt = 0
                while record is None:
                    try:
                        record = explore_transition(
                            conn, graph, src, dst, source_ref, stopper_cfg, writer,
                            resume_from=replay.partial.pop(key, None),
                        )
                    except TransitionFailed as exc:
                        log.warning("%s", exc)
                        if attempt >= retries:
                            writer.append(
                                "transition_failed",
                                {"from": src, "to": dst, "reason": exc.reason},
                            )
                            break
                        attempt += 1
                    except (ConnectionLost, ProtocolViolation) as exc:
                        log.warning("connection lost on %s->%s: %s", src, dst, exc)
                        pool.discard(conn)
                        conn = None
                        if attempt >= retries:
                            writer.append(
                                "transition_failed",
                                {"from": src, "to": dst, "reason": str(exc)},
                            )
                            break
                        attempt += 1
                        conn = pool.borrow()
                if record is None:
                    continue
            with state_lock:
                plan_state.explored[key] = record
            candidates.append((record, src_cum))

        if not candidates:
            return  # state unreachable; no best entry

        def rank(item):
            record, src_cum = item
            return (-record.value, src_cum + record.chosen_epoch + 1, record.from_id)

        record, src_cum = min(candidates, key=rank)
        resolved = ResolvedState(
            value=record.value,
            predecessor=record.from_id,
            chosen_epoch=record.chosen_epoch,
            cumulative_epochs=src_cum + record.chosen_epoch + 1,
            checkpoint_ref=record.checkpoint_ref,
        )
        with state_lock:
            plan_state.best[state_id] = resolved

        prior = replay.resolved.get(state_id)
        if prior is not None:
            if int(prior["predecessor"]) != resolved.predecessor or float(
                prior["value"]
            ) != resolved.value:
                raise LedgerError(
                    f"resolution of state {state_id} diverges from the ledger"
                )
            return  # already resolved in a previous run; no events, no releases
        writer.append(
            "state_resolved",
            {
                "state": state_id,
                "value": resolved.value,
                "predecessor": resolved.predecessor,
                "chosen_epoch": resolved.chosen_epoch,
                "cumulative_epochs": resolved.cumulative_epochs,
                "checkpoint_ref": resolved.checkpoint_ref,
            },
        )
        for other, _ in candidates:
            if other is not record:
                if conn is None:
                    conn = pool.borrow()
                _release_quietly(conn, other.checkpoint_ref)
    finally:
        if conn is not None:
            pool.give_back(conn)


def _pick_final(graph: TransitionGraph, plan_state: PlanState) -> int:
    reachable = [
        (fid, plan_state.best[fid])
        for fid in final_states(graph)
        if fid in plan_state.best
    ]
    if not reachable:
        raise PlanningFailed("no final state is reachable")
    reachable.sort(key=lambda item: (-item[1].value, item[1].cumulative_epochs, item[0]))
    return reachable[0][0]
