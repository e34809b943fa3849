"""Append-only run ledger.

One JSON object per line; every event carries the run id, a sequence number
and a timestamp. The ledger is the source of truth for resumption: completed
transitions are never re-run, and a partially recorded transition resumes
from its last observed epoch.
"""

from __future__ import annotations

import datetime
import json
import os
import threading
from dataclasses import dataclass, field

EVENT_TYPES = (
    "transition_started",
    "epoch_observed",
    "transition_stopped",
    "transition_failed",
    "state_resolved",
    "plan_extracted",
)


class LedgerError(Exception):
    """Ledger content is inconsistent with the requested run."""


class LedgerWriter:
    """Serialized appender; safe to share across planner workers."""

    def __init__(self, path, run_id: str, start_seq: int = 0):
        self.path = path
        self.run_id = run_id
        self._seq = start_seq
        self._lock = threading.Lock()
        parent = os.path.dirname(os.fspath(path))
        if parent:
            os.makedirs(parent, exist_ok=True)
        self._fh = open(path, "a", encoding="utf-8")

    def append(self, event: str, payload: dict) -> dict:
        if event not in EVENT_TYPES:
            raise ValueError(f"unknown ledger event {event!r}")
        with self._lock:
            rec = {
                "event": event,
                "seq": self._seq,
                "run_id": self.run_id,
                "ts": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            }
            rec.update(payload)
            self._fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
            self._fh.flush()
            os.fsync(self._fh.fileno())
            self._seq += 1
            return rec

    def close(self):
        with self._lock:
            self._fh.close()


def read_events(path) -> tuple[list[dict], bool]:
    """Read all events; returns (events, truncated).

    A trailing line that fails to parse marks the ledger as truncated (a run
    cut mid-write); everything before it is returned.
    """
    events: list[dict] = []
    truncated = False
    if not os.path.exists(path):
        return events, truncated
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                truncated = True
                break
            if not isinstance(rec, dict) or rec.get("event") not in EVENT_TYPES:
                truncated = True
                break
            events.append(rec)
    return events, truncated


@dataclass
class PartialTransition:
    """An in-flight transition reconstructed from the ledger."""

    source_ref: str
    observed: list[tuple[int, float, str]] = field(default_factory=list)  # epoch, metric, ref


@dataclass
class ReplayState:
    """Everything a resumed run needs to skip completed work."""

    run_id: str | None = None
    completed: dict[tuple[int, int], dict] = field(default_factory=dict)
    failed: set[tuple[int, int]] = field(default_factory=set)
    partial: dict[tuple[int, int], PartialTransition] = field(default_factory=dict)
    resolved: dict[int, dict] = field(default_factory=dict)
    hyperparams: dict[tuple[int, int], dict] = field(default_factory=dict)
    plan: dict | None = None
    n_events: int = 0


def build_replay(events: list[dict]) -> ReplayState:
    state = ReplayState(n_events=len(events))
    for rec in events:
        if state.run_id is None:
            state.run_id = rec.get("run_id")
        kind = rec["event"]
        if kind == "transition_started":
            key = (int(rec["from"]), int(rec["to"]))
            state.partial[key] = PartialTransition(source_ref=rec["source_ref"])
            state.hyperparams[key] = rec.get("hyperparams", {})
        elif kind == "epoch_observed":
            key = (int(rec["from"]), int(rec["to"]))
            part = state.partial.get(key)
            if part is None:
                raise LedgerError(f"epoch_observed without transition_started for {key}")
            part.observed.append(
                (int(rec["epoch"]), float(rec["metric"]), str(rec["checkpoint_ref"]))
            )
        elif kind == "transition_stopped":
            key = (int(rec["from"]), int(rec["to"]))
            state.completed[key] = rec["record"]
            state.partial.pop(key, None)
        elif kind == "transition_failed":
            key = (int(rec["from"]), int(rec["to"]))
            state.failed.add(key)
            state.partial.pop(key, None)
        elif kind == "state_resolved":
            state.resolved[int(rec["state"])] = rec
        elif kind == "plan_extracted":
            state.plan = rec["plan"]
    return state
