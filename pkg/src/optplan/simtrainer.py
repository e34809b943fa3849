"""Synthetic trainer with analytically known dynamics.

Serves the trainer protocol without training anything: each hyper-parameter
regime owns an exponential-family performance curve (constraint-satisfying,
so unimodal), and observed metrics are curve values plus seeded Gaussian
noise, clamped to [0, 1]. Entering a new regime restarts the curve's clock;
the new curve starts partway up, proportional to the metric inherited from
the source checkpoint (``start = start_fraction * inherited``).

Checkpoint refs are self-describing: they encode the full lineage of
(regime, epochs, start) segments, so any simulator process with the same
scenario and seed reproduces identical metrics. That makes refs portable
across planner restarts and across parallel worker connections, and it makes
the refs form a tree that mirrors the planner's exploration tree.

Scenario files are JSON documents defining the per-regime curve tables and
the noise level; see ``scenarios/`` for the shipped fixtures.
"""

from __future__ import annotations

import argparse
import base64
import hashlib
import json
import sys
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import protocol
from .curvefit import NEG_EPS, CurveFamily, evaluate
from .protocol import INIT_CHECKPOINT

_REF_PREFIX = "sim:"


class ScenarioError(ValueError):
    """Scenario file fails validation."""


@dataclass(frozen=True)
class Scenario:
    """Dynamics rule table: one exponential curve per regime."""

    name: str
    sigma: float
    initial_metric: float
    start_fraction: float
    # asymptote[sampling][clip_len_idx][lr_idx]
    asymptote: dict[str, tuple[tuple[float, ...], ...]]
    rate_decay: tuple[float, ...]  # convergence speed per lr index
    curvature: tuple[float, ...]  # overfit strength per lr index
    drift: float = 0.0005
    min_gap: float = 0.02  # minimal climb left when entering a regime

    def __post_init__(self):
        if self.sigma < 0:
            raise ScenarioError("sigma must be >= 0")
        if not (0.0 <= self.initial_metric < 1.0):
            raise ScenarioError("initial_metric must lie in [0, 1)")
        if not (0.0 < self.start_fraction <= 1.0):
            raise ScenarioError("start_fraction must lie in (0, 1]")
        if not self.asymptote:
            raise ScenarioError("at least one sampling strategy table is required")
        n_r = len(self.rate_decay)
        if len(self.curvature) != n_r:
            raise ScenarioError("curvature and rate_decay must have equal length")
        if any(v > -NEG_EPS for v in self.rate_decay):
            raise ScenarioError("rate_decay entries must be negative")
        if any(v > -NEG_EPS for v in self.curvature):
            raise ScenarioError("curvature entries must be negative")
        for strat, table in self.asymptote.items():
            if strat not in ("consecutive", "uniform"):
                raise ScenarioError(f"unknown sampling strategy {strat!r}")
            for row in table:
                if len(row) != n_r:
                    raise ScenarioError(f"{strat} table rows must have {n_r} entries")
                for v in row:
                    if not (0.0 < v < 1.0):
                        raise ScenarioError("asymptotes must lie in (0, 1)")

    def regime_alpha(
        self, sampling: str, clip_len_idx: int, lr_idx: int, start: float
    ) -> tuple[float, ...]:
        """Exponential-family parameters of one regime's true curve."""
        table = self.asymptote.get(sampling)
        if table is None:
            raise KeyError(f"scenario has no table for {sampling!r}")
        if not (0 <= clip_len_idx < len(table) and 0 <= lr_idx < len(self.rate_decay)):
            raise IndexError("hyper-parameter index outside scenario tables")
        a1 = table[clip_len_idx][lr_idx]
        a2 = min(start - a1, -self.min_gap)
        return (a1, a2, self.rate_decay[lr_idx], self.drift, self.curvature[lr_idx])


def scenario_from_dict(doc: dict) -> Scenario:
    try:
        tables = {
            strat: tuple(tuple(float(v) for v in row) for row in body["asymptote"])
            for strat, body in doc["strategies"].items()
        }
        return Scenario(
            name=str(doc.get("name", "unnamed")),
            sigma=float(doc["sigma"]),
            initial_metric=float(doc["initial_metric"]),
            start_fraction=float(doc["start_fraction"]),
            asymptote=tables,
            rate_decay=tuple(float(v) for v in doc["rate_decay"]),
            curvature=tuple(float(v) for v in doc["curvature"]),
            drift=float(doc.get("drift", 0.0005)),
            min_gap=float(doc.get("min_gap", 0.02)),
        )
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"malformed scenario document: {exc}") from None


def load_scenario(path) -> Scenario:
    """Load a scenario file; bare names resolve to the packaged fixtures.

    ``load_scenario("kinetics-like")`` finds the shipped scenario of that
    name; anything containing a path separator (or naming an existing file)
    is read as a regular path.
    """
    import os

    candidate = os.fspath(path)
    if not os.path.exists(candidate) and os.sep not in candidate and "/" not in candidate:
        name = candidate if candidate.endswith(".json") else candidate + ".json"
        packaged = os.path.join(os.path.dirname(__file__), "scenarios", name)
        if os.path.exists(packaged):
            candidate = packaged
    with open(candidate, "r", encoding="utf-8") as fh:
        return scenario_from_dict(json.load(fh))


# --- lineage refs -------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    """One regime stretch of a lineage: where it started and how long it ran."""

    sampling: str
    clip_len_idx: int
    lr_idx: int
    epochs: int
    start: float

    def regime(self) -> tuple[str, int, int]:
        return (self.sampling, self.clip_len_idx, self.lr_idx)

    def to_doc(self) -> dict:
        return {
            "sampling": self.sampling,
            "clip_len_idx": self.clip_len_idx,
            "lr_idx": self.lr_idx,
            "epochs": self.epochs,
            "start": self.start,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "Segment":
        return cls(
            sampling=str(doc["sampling"]),
            clip_len_idx=int(doc["clip_len_idx"]),
            lr_idx=int(doc["lr_idx"]),
            epochs=int(doc["epochs"]),
            start=float(doc["start"]),
        )


Lineage = tuple[Segment, ...]


def encode_ref(lineage: Lineage) -> str:
    if not lineage:
        return INIT_CHECKPOINT
    doc = json.dumps([s.to_doc() for s in lineage], sort_keys=True, separators=(",", ":"))
    packed = base64.urlsafe_b64encode(zlib.compress(doc.encode("utf-8"), 9))
    return _REF_PREFIX + packed.decode("ascii")


def decode_ref(ref: str) -> Lineage | None:
    """Returns the lineage, or None when the ref was never emitted by us."""
    if ref == INIT_CHECKPOINT:
        return ()
    if not isinstance(ref, str) or not ref.startswith(_REF_PREFIX):
        return None
    try:
        doc = zlib.decompress(base64.urlsafe_b64decode(ref[len(_REF_PREFIX):]))
        segments = tuple(Segment.from_doc(d) for d in json.loads(doc))
    except Exception:
        return None
    if any(s.epochs < 1 for s in segments):
        return None
    return segments


def _noise(seed: int, prefix: Lineage, regime: tuple[str, int, int], epoch: int, sigma: float) -> float:
    """Deterministic per-(transition, epoch) Gaussian draw.

    Keyed by the lineage prefix and regime rather than by process state, so a
    fresh simulator reproduces the stream exactly.
    """
    if sigma == 0.0:
        return 0.0
    key = json.dumps(
        {"prefix": [s.to_doc() for s in prefix], "regime": list(regime)},
        sort_keys=True,
        separators=(",", ":"),
    )
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 8], "big") for i in range(0, 32, 8)]
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, *words, epoch])
    return float(rng.standard_normal() * sigma)


def lineage_metric(scenario: Scenario, seed: int, lineage: Lineage) -> float:
    """Metric of the checkpoint at the end of a lineage."""
    if not lineage:
        return scenario.initial_metric
    last = lineage[-1]
    prefix = lineage[:-1]
    alpha = scenario.regime_alpha(*last.regime(), start=last.start)
    t_eff = last.epochs - 1
    raw = evaluate(CurveFamily.EXPONENTIAL, alpha, float(t_eff))
    raw += _noise(seed, prefix, last.regime(), t_eff, scenario.sigma)
    return float(min(max(raw, 0.0), 1.0))


def simulate_epoch(
    scenario: Scenario,
    seed: int,
    lineage: Lineage,
    sampling: str,
    clip_len_idx: int,
    lr_idx: int,
    epoch_index: int,
) -> tuple[float, Lineage]:
    """Train one epoch under the given regime; returns (metric, new lineage).

    epoch_index counts epochs within the current regime stretch and must be
    dense: 0 opens a new segment, k continues a segment that has run k epochs.
    """
    regime = (sampling, clip_len_idx, lr_idx)
    if lineage and lineage[-1].regime() == regime:
        seg = lineage[-1]
        if epoch_index != seg.epochs:
            raise ValueError(
                f"expected epoch_index {seg.epochs} to continue this lineage, got {epoch_index}"
            )
        prefix = lineage[:-1]
        new_seg = Segment(*regime, epochs=seg.epochs + 1, start=seg.start)
    else:
        if epoch_index != 0:
            raise ValueError(f"new regime must start at epoch_index 0, got {epoch_index}")
        inherited = lineage_metric(scenario, seed, lineage)
        start = scenario.start_fraction * inherited
        prefix = lineage
        new_seg = Segment(*regime, epochs=1, start=start)

    alpha = scenario.regime_alpha(*regime, start=new_seg.start)
    raw = evaluate(CurveFamily.EXPONENTIAL, alpha, float(epoch_index))
    raw += _noise(seed, prefix, regime, epoch_index, scenario.sigma)
    metric = float(min(max(raw, 0.0), 1.0))
    return metric, prefix + (new_seg,)


# --- protocol engine ----------------------------------------------------------


class SimTrainer:
    """Stateless-by-construction trainer engine; one instance per connection."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.seed = 0
        self.run_id = ""
        self._initialized = False
        self._released: set[str] = set()
        self.shutdown_requested = False

    def handle(self, wire: dict) -> dict:
        try:
            req = protocol.decode_request(json.dumps(wire))
        except protocol.ProtocolViolation as exc:
            rid = wire.get("id") if isinstance(wire, dict) else None
            if not isinstance(rid, int):
                rid = None
            return self._error(rid, "malformed_request", str(exc))
        handler = getattr(self, f"_on_{req.type}")
        return handler(req.id, req.fields)

    @staticmethod
    def _error(rid: int | None, code: str, message: str) -> dict:
        return {"id": rid, "type": "error", "code": code, "message": message}

    def _on_init(self, rid: int, fields: dict) -> dict:
        self.run_id = str(fields["run_id"])
        self.seed = int(fields["seed"])
        self._initialized = True
        self._released.clear()
        return {
            "id": rid,
            "type": "ready",
            "capabilities": {
                "trainer": "optplan-simtrainer",
                "scenario": self.scenario.name,
                "deterministic": True,
                "portable_checkpoints": True,
            },
        }

    def _require_init(self, rid: int) -> dict | None:
        if not self._initialized:
            return self._error(rid, "not_initialized", "send init first")
        return None

    def _on_train_epoch(self, rid: int, fields: dict) -> dict:
        gate = self._require_init(rid)
        if gate:
            return gate
        ref = fields["checkpoint_ref"]
        hp = fields["hyperparams"]
        if not isinstance(hp, dict):
            return self._error(rid, "bad_hyperparams", "hyperparams must be an object")
        try:
            sampling = str(hp["sampling"])
            clip_len_idx = int(hp["clip_len_idx"])
            lr_idx = int(hp["lr_idx"])
        except (KeyError, TypeError, ValueError) as exc:
            return self._error(rid, "bad_hyperparams", f"missing field: {exc}")
        if ref in self._released:
            return self._error(rid, "unknown_checkpoint", f"{ref!r} was released")
        lineage = decode_ref(ref)
        if lineage is None:
            return self._error(rid, "unknown_checkpoint", f"{ref!r} is not a checkpoint")
        try:
            metric, new_lineage = simulate_epoch(
                self.scenario,
                self.seed,
                lineage,
                sampling,
                clip_len_idx,
                lr_idx,
                int(fields["epoch_index"]),
            )
        except (KeyError, IndexError) as exc:
            return self._error(rid, "bad_hyperparams", str(exc))
        except ValueError as exc:
            return self._error(rid, "epoch_mismatch", str(exc))
        return {
            "id": rid,
            "type": "trained",
            "checkpoint_ref": encode_ref(new_lineage),
            "metric": metric,
        }

    def _on_evaluate(self, rid: int, fields: dict) -> dict:
        gate = self._require_init(rid)
        if gate:
            return gate
        ref = fields["checkpoint_ref"]
        if ref in self._released:
            return self._error(rid, "unknown_checkpoint", f"{ref!r} was released")
        lineage = decode_ref(ref)
        if lineage is None:
            return self._error(rid, "unknown_checkpoint", f"{ref!r} is not a checkpoint")
        return {
            "id": rid,
            "type": "evaluated",
            "metric": lineage_metric(self.scenario, self.seed, lineage),
        }

    def _on_release_checkpoint(self, rid: int, fields: dict) -> dict:
        gate = self._require_init(rid)
        if gate:
            return gate
        ref = fields["checkpoint_ref"]
        if ref == INIT_CHECKPOINT:
            return self._error(rid, "protected_checkpoint", "the fresh state is never released")
        if ref in self._released or decode_ref(ref) is None:
            return self._error(rid, "unknown_checkpoint", f"{ref!r} is not a checkpoint")
        self._released.add(ref)
        return {"id": rid, "type": "released"}

    def _on_shutdown(self, rid: int, fields: dict) -> dict:
        self.shutdown_requested = True
        return {"id": rid, "type": "released"}


def serve(scenario: Scenario, stdin=None, stdout=None) -> int:
    """Blocking request loop over line-delimited JSON."""
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    engine = SimTrainer(scenario)
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            wire = json.loads(line)
        except json.JSONDecodeError as exc:
            wire = None
            resp = SimTrainer._error(None, "malformed_request", f"invalid JSON: {exc}")
        else:
            resp = engine.handle(wire if isinstance(wire, dict) else {})
        stdout.write(json.dumps(resp, sort_keys=True, separators=(",", ":")) + "\n")
        stdout.flush()
        if engine.shutdown_requested:
            return 0
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="optplan-simtrainer",
        description="synthetic trainer speaking the line-delimited JSON protocol",
    )
    parser.add_argument("--scenario", required=True, help="path to a scenario JSON file")
    args = parser.parse_args(argv)
    return serve(load_scenario(args.scenario))


if __name__ == "__main__":
    sys.exit(main())
