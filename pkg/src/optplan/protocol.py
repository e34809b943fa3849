"""Line-delimited JSON trainer protocol.

The planner talks to a trainer process over its standard streams: one compact
JSON object per line, UTF-8, newline-terminated. Every request carries a
monotonically increasing ``id`` which the response must echo. Requests:

    {"id": 1, "type": "init", "run_id": "demo", "seed": 7}
    {"id": 2, "type": "train_epoch", "checkpoint_ref": "init",
     "hyperparams": {...}, "epoch_index": 0}
    {"id": 3, "type": "evaluate", "checkpoint_ref": "..."}
    {"id": 4, "type": "release_checkpoint", "checkpoint_ref": "..."}
    {"id": 5, "type": "shutdown"}

Responses: ``ready`` (capabilities), ``trained`` (checkpoint_ref, metric),
``evaluated`` (metric), ``released`` (generic empty acknowledgement, also
used for shutdown), and ``error`` (code, message). Metrics must lie in
[0, 1]. The reserved checkpoint ref ``"init"`` names the trainer's fresh
initialization and always exists.

Unknown fields are ignored on read and never emitted.
"""

from __future__ import annotations

import json
import queue
import shlex
import subprocess
import threading
from dataclasses import dataclass, field
from typing import Protocol, Sequence

INIT_CHECKPOINT = "init"
DEFAULT_TIMEOUT_S = 3600.0


class ProtocolViolation(Exception):
    """The peer sent something the protocol forbids."""


class ConnectionLost(Exception):
    """The trainer went away (EOF, exit, or timeout)."""


# --- messages ----------------------------------------------------------------


@dataclass(frozen=True)
class Request:
    id: int
    type: str
    fields: dict

    def to_wire(self) -> dict:
        wire = {"id": self.id, "type": self.type}
        wire.update(self.fields)
        return wire


@dataclass(frozen=True)
class Response:
    id: int | None
    type: str
    fields: dict

    def to_wire(self) -> dict:
        wire = {"id": self.id, "type": self.type}
        wire.update(self.fields)
        return wire


_REQUEST_FIELDS = {
    "init": ("run_id", "seed"),
    "train_epoch": ("checkpoint_ref", "hyperparams", "epoch_index"),
    "evaluate": ("checkpoint_ref",),
    "release_checkpoint": ("checkpoint_ref",),
    "shutdown": (),
}

_RESPONSE_FIELDS = {
    "ready": ("capabilities",),
    "trained": ("checkpoint_ref", "metric"),
    "evaluated": ("metric",),
    "released": (),
    "error": ("code", "message"),
}


def encode(message: Request | Response) -> str:
    """One canonical line per message: compact separators, sorted keys."""
    return json.dumps(message.to_wire(), sort_keys=True, separators=(",", ":"))


def decode_request(line: str) -> Request:
    obj = _parse_object(line)
    rtype = obj.get("type")
    if rtype not in _REQUEST_FIELDS:
        raise ProtocolViolation(f"unknown request type {rtype!r}")
    req_id = obj.get("id")
    if not isinstance(req_id, int):
        raise ProtocolViolation("request id must be an integer")
    fields = _pick_fields(obj, _REQUEST_FIELDS[rtype], f"request {rtype}")
    return Request(id=req_id, type=rtype, fields=fields)


def decode_response(line: str) -> Response:
    obj = _parse_object(line)
    rtype = obj.get("type")
    if rtype not in _RESPONSE_FIELDS:
        raise ProtocolViolation(f"unknown response type {rtype!r}")
    resp_id = obj.get("id")
    if resp_id is not None and not isinstance(resp_id, int):
        raise ProtocolViolation("response id must be an integer or null")
    if resp_id is None and rtype != "error":
        raise ProtocolViolation("only error responses may omit the request id")
    fields = _pick_fields(obj, _RESPONSE_FIELDS[rtype], f"response {rtype}")
    if rtype in ("trained", "evaluated"):
        metric = fields["metric"]
        if not isinstance(metric, (int, float)) or not (0.0 <= float(metric) <= 1.0):
            raise ProtocolViolation(f"metric out of range: {metric!r}")
        fields["metric"] = float(metric)
    return Response(id=resp_id, type=rtype, fields=fields)


def _parse_object(line: str) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolViolation(f"invalid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ProtocolViolation("message must be a JSON object")
    return obj


def _pick_fields(obj: dict, names: Sequence[str], what: str) -> dict:
    fields = {}
    for name in names:
        if name not in obj:
            raise ProtocolViolation(f"{what} missing field {name!r}")
        fields[name] = obj[name]
    return fields


# --- connections -------------------------------------------------------------


class TrainerConnection(Protocol):
    """Single-writer, single-reader conversation with one trainer."""

    def call(self, rtype: str, **fields) -> Response: ...

    def close(self) -> None: ...


class _BaseConnection:
    """Shared id bookkeeping and response checking."""

    def __init__(self):
        self._next_id = 1
        self._ready = False

    def _take_id(self) -> int:
        rid = self._next_id
        self._next_id += 1
        return rid

    def _check(self, req: Request, resp: Response) -> Response:
        if resp.type != "error" and resp.id != req.id:
            raise ProtocolViolation(
                f"response id {resp.id!r} does not match request id {req.id}"
            )
        return resp

    # convenience wrappers used by the planner

    def init(self, run_id: str, seed: int) -> Response:
        resp = self.call("init", run_id=run_id, seed=seed)
        if resp.type != "ready":
            raise ProtocolViolation(f"init answered with {resp.type!r}")
        self._ready = True
        return resp

    def train_epoch(self, checkpoint_ref: str, hyperparams: dict, epoch_index: int) -> Response:
        return self.call(
            "train_epoch",
            checkpoint_ref=checkpoint_ref,
            hyperparams=hyperparams,
            epoch_index=epoch_index,
        )

    def evaluate(self, checkpoint_ref: str) -> Response:
        return self.call("evaluate", checkpoint_ref=checkpoint_ref)

    def release_checkpoint(self, checkpoint_ref: str) -> Response:
        return self.call("release_checkpoint", checkpoint_ref=checkpoint_ref)


class SubprocessConnection(_BaseConnection):
    """Runs a trainer as a child process, framing over stdin/stdout."""

    def __init__(self, command: Sequence[str] | str, timeout_s: float = DEFAULT_TIMEOUT_S):
        super().__init__()
        if isinstance(command, str):
            command = shlex.split(command)
        self.command = list(command)
        self.timeout_s = timeout_s
        self._proc = subprocess.Popen(
            self.command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=None,  # trainer stderr passes through for debugging
            text=True,
            bufsize=1,
        )
        self._lines: queue.Queue[str | None] = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self):
        try:
            for line in self._proc.stdout:
                self._lines.put(line)
        finally:
            self._lines.put(None)

    def _read_line(self) -> str:
        try:
            line = self._lines.get(timeout=self.timeout_s)
        except queue.Empty:
            raise ConnectionLost(
                f"trainer did not answer within {self.timeout_s}s"
            ) from None
        if line is None:
            raise ConnectionLost("trainer closed its output stream")
        return line

    def call(self, rtype: str, **fields) -> Response:
        req = Request(id=self._take_id(), type=rtype, fields=fields)
        if self._proc.poll() is not None:
            raise ConnectionLost("trainer process has exited")
        try:
            self._proc.stdin.write(encode(req) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise ConnectionLost(f"cannot write to trainer: {exc}") from None
        return self._check(req, decode_response(self._read_line()))

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                self.call("shutdown")
            except (ConnectionLost, ProtocolViolation):
                pass
            try:
                self._proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
        if self._proc.stdin:
            self._proc.stdin.close()


class InProcessConnection(_BaseConnection):
    """Drives a trainer engine object directly; used by tests and oracles.

    The engine exposes ``handle(request_dict) -> response_dict`` with the
    exact wire semantics of a subprocess trainer.
    """

    def __init__(self, engine):
        super().__init__()
        self.engine = engine

    def call(self, rtype: str, **fields) -> Response:
        req = Request(id=self._take_id(), type=rtype, fields=fields)
        wire = self.engine.handle(req.to_wire())
        return self._check(req, decode_response(json.dumps(wire)))

    def close(self) -> None:
        pass


# --- conformance suite --------------------------------------------------------


@dataclass
class ConformanceCase:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ConformanceReport:
    cases: list[ConformanceCase] = field(default_factory=list)

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.cases)

    def add(self, name: str, passed: bool, detail: str = ""):
        self.cases.append(ConformanceCase(name, passed, detail))

    def lines(self) -> list[str]:
        out = []
        for c in self.cases:
            status = "PASS" if c.passed else "FAIL"
            suffix = f"  ({c.detail})" if c.detail else ""
            out.append(f"{status}  {c.name}{suffix}")
        return out


class _RawClient:
    """Minimal line client for the conformance suite; no convenience checks."""

    def __init__(self, command: Sequence[str] | str, timeout_s: float = 60.0):
        if isinstance(command, str):
            command = shlex.split(command)
        self.proc = subprocess.Popen(
            list(command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
            bufsize=1,
        )
        self.timeout_s = timeout_s
        self._lines: queue.Queue[str | None] = queue.Queue()
        threading.Thread(target=self._pump, daemon=True).start()

    def _pump(self):
        try:
            for line in self.proc.stdout:
                self._lines.put(line)
        finally:
            self._lines.put(None)

    def send_line(self, line: str):
        self.proc.stdin.write(line + "\n")
        self.proc.stdin.flush()

    def read_line(self) -> str | None:
        try:
            return self._lines.get(timeout=self.timeout_s)
        except queue.Empty:
            return None

    def round_trip(self, obj: dict) -> dict | None:
        self.send_line(json.dumps(obj, sort_keys=True, separators=(",", ":")))
        line = self.read_line()
        if line is None:
            return None
        try:
            parsed = json.loads(line)
        except json.JSONDecodeError:
            return None
        return parsed if isinstance(parsed, dict) else None

    def close(self):
        try:
            self.proc.stdin.close()
        except OSError:
            pass
        try:
            self.proc.wait(timeout=10)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            self.proc.wait()


_CONFORMANCE_HYPERPARAMS = {
    "sampling": "consecutive",
    "clip_len": 16,
    "clip_len_idx": 0,
    "lr": 0.01,
    "lr_idx": 0,
    "extra": {},
}


def conformance_suite(command: Sequence[str] | str, timeout_s: float = 60.0) -> ConformanceReport:
    """Run the golden transcript checks against a trainer launch command.

    Each case reports pass/fail; protocol violations are failures, never
    exceptions.
    """
    report = ConformanceReport()
    client = _RawClient(command, timeout_s=timeout_s)
    try:
        _run_conformance(client, report)
    finally:
        client.close()
    return report


def _expect(report, name, cond, detail=""):
    report.add(name, bool(cond), detail if not cond else "")
    return bool(cond)


def _run_conformance(client: _RawClient, report: ConformanceReport):
    # 1. handshake
    resp = client.round_trip({"id": 1, "type": "init", "run_id": "conformance", "seed": 7})
    ok = resp is not None and resp.get("type") == "ready" and resp.get("id") == 1
    if not _expect(report, "handshake", ok, f"got {resp!r}"):
        return

    # 2. train three epochs from the fresh initialization
    refs = [INIT_CHECKPOINT]
    metrics = []
    ok, detail = True, ""
    for epoch, rid in enumerate((2, 3, 4)):
        resp = client.round_trip(
            {
                "id": rid,
                "type": "train_epoch",
                "checkpoint_ref": refs[-1],
                "hyperparams": _CONFORMANCE_HYPERPARAMS,
                "epoch_index": epoch,
            }
        )
        if resp is None or resp.get("type") != "trained":
            ok, detail = False, f"epoch {epoch}: got {resp!r}"
            break
        if resp.get("id") != rid:
            ok, detail = False, f"epoch {epoch}: response id {resp.get('id')!r} != {rid}"
            break
        ref, metric = resp.get("checkpoint_ref"), resp.get("metric")
        if not isinstance(ref, str) or ref in refs:
            ok, detail = False, f"epoch {epoch}: stale or missing checkpoint ref {ref!r}"
            break
        if not isinstance(metric, (int, float)) or not (0.0 <= metric <= 1.0):
            ok, detail = False, f"epoch {epoch}: metric out of range: {metric!r}"
            break
        refs.append(ref)
        metrics.append(float(metric))
    _expect(report, "train-three-epochs", ok, detail)
    if not ok:
        return

    # 3. evaluate is deterministic and matches the trained metric
    r1 = client.round_trip({"id": 5, "type": "evaluate", "checkpoint_ref": refs[-1]})
    r2 = client.round_trip({"id": 6, "type": "evaluate", "checkpoint_ref": refs[-1]})
    ok = (
        r1 is not None
        and r2 is not None
        and r1.get("type") == "evaluated"
        and r2.get("type") == "evaluated"
        and r1.get("metric") == r2.get("metric")
        and r1.get("metric") == metrics[-1]
    )
    _expect(report, "evaluate-deterministic", ok, f"got {r1!r} / {r2!r}")

    # 4. release then reuse -> unknown_checkpoint
    resp = client.round_trip({"id": 7, "type": "release_checkpoint", "checkpoint_ref": refs[1]})
    ok = resp is not None and resp.get("type") == "released" and resp.get("id") == 7
    _expect(report, "release", ok, f"got {resp!r}")
    resp = client.round_trip(
        {
            "id": 8,
            "type": "train_epoch",
            "checkpoint_ref": refs[1],
            "hyperparams": _CONFORMANCE_HYPERPARAMS,
            "epoch_index": 1,
        }
    )
    ok = (
        resp is not None
        and resp.get("type") == "error"
        and resp.get("code") == "unknown_checkpoint"
    )
    _expect(report, "train-after-release-rejected", ok, f"got {resp!r}")

    # 5. releasing a ref that never existed
    resp = client.round_trip({"id": 9, "type": "release_checkpoint", "checkpoint_ref": "no-such-ref"})
    ok = (
        resp is not None
        and resp.get("type") == "error"
        and resp.get("code") == "unknown_checkpoint"
    )
    _expect(report, "release-unknown-rejected", ok, f"got {resp!r}")

    # 6. malformed input line -> error response, connection keeps serving
    client.send_line("this is not json")
    line = client.read_line()
    ok = False
    detail = f"got {line!r}"
    if line is not None:
        try:
            obj = json.loads(line)
            ok = isinstance(obj, dict) and obj.get("type") == "error"
        except json.JSONDecodeError:
            ok = False
    _expect(report, "malformed-line-answered", ok, detail)
    resp = client.round_trip({"id": 10, "type": "evaluate", "checkpoint_ref": refs[-1]})
    ok = resp is not None and resp.get("type") == "evaluated" and resp.get("id") == 10
    _expect(report, "serves-after-malformed-line", ok, f"got {resp!r}")

    # 7. shutdown acknowledged, process exits
    resp = client.round_trip({"id": 11, "type": "shutdown"})
    ok = resp is not None and resp.get("type") == "released" and resp.get("id") == 11
    _expect(report, "shutdown-acknowledged", ok, f"got {resp!r}")
    try:
        client.proc.wait(timeout=15)
        _expect(report, "exits-after-shutdown", client.proc.returncode == 0,
                f"exit code {client.proc.returncode}")
    except subprocess.TimeoutExpired:
        _expect(report, "exits-after-shutdown", False, "still running 15s after shutdown")
