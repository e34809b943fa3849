import json
import sys

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from optplan.protocol import (
    INIT_CHECKPOINT,
    ConnectionLost,
    InProcessConnection,
    ProtocolViolation,
    Request,
    Response,
    SubprocessConnection,
    conformance_suite,
    decode_request,
    decode_response,
    encode,
)
from optplan.simtrainer import SimTrainer

from conftest import DEFAULT_CONS_TABLE, DEFAULT_UNIF_TABLE, make_scenario

HP = {
    "sampling": "consecutive",
    "clip_len": 16,
    "clip_len_idx": 0,
    "lr": 0.04,
    "lr_idx": 0,
    "extra": {},
}


def scenario_path(tmp_path, sigma=0.0):
    scn = make_scenario(cons=DEFAULT_CONS_TABLE, unif=DEFAULT_UNIF_TABLE, sigma=sigma)
    doc = {
        "name": scn.name,
        "sigma": scn.sigma,
        "initial_metric": scn.initial_metric,
        "start_fraction": scn.start_fraction,
        "drift": scn.drift,
        "min_gap": scn.min_gap,
        "rate_decay": list(scn.rate_decay),
        "curvature": list(scn.curvature),
        "strategies": {k: {"asymptote": [list(r) for r in v]} for k, v in scn.asymptote.items()},
    }
    p = tmp_path / "scenario.json"
    p.write_text(json.dumps(doc))
    return str(p)


def sim_command(tmp_path, sigma=0.0):
    return [sys.executable, "-m", "optplan.simtrainer", "--scenario", scenario_path(tmp_path, sigma)]


# --- codec ---------------------------------------------------------------------


GOLDEN_LINES = [
    '{"id":1,"run_id":"demo","seed":7,"type":"init"}',
    '{"checkpoint_ref":"init","epoch_index":0,"hyperparams":{"clip_len":16,"clip_len_idx":0,"extra":{},"lr":0.04,"lr_idx":0,"sampling":"consecutive"},"id":2,"type":"train_epoch"}',
    '{"checkpoint_ref":"abc","id":3,"type":"evaluate"}',
    '{"checkpoint_ref":"abc","id":4,"type":"release_checkpoint"}',
    '{"id":5,"type":"shutdown"}',
]

GOLDEN_RESPONSES = [
    '{"capabilities":{"x":1},"id":1,"type":"ready"}',
    '{"checkpoint_ref":"c1","id":2,"metric":0.5,"type":"trained"}',
    '{"id":3,"metric":0.25,"type":"evaluated"}',
    '{"id":4,"type":"released"}',
    '{"code":"unknown_checkpoint","id":5,"message":"nope","type":"error"}',
    '{"code":"malformed_request","id":null,"message":"bad","type":"error"}',
]


@pytest.mark.parametrize("line", GOLDEN_LINES)
def test_request_codec_round_trips(line):
    assert encode(decode_request(line)) == line


@pytest.mark.parametrize("line", GOLDEN_RESPONSES)
def test_response_codec_round_trips(line):
    assert encode(decode_response(line)) == line


def test_unknown_fields_ignored_on_read_never_emitted():
    req = decode_request('{"id":9,"type":"shutdown","debug":"yes"}')
    assert encode(req) == '{"id":9,"type":"shutdown"}'


@pytest.mark.parametrize(
    "line",
    [
        "not json",
        '{"id":1}',
        '{"id":1,"type":"mystery"}',
        '{"id":"x","type":"shutdown"}',
        '{"id":1,"type":"init","run_id":"a"}',  # missing seed
    ],
)
def test_bad_requests_rejected(line):
    with pytest.raises(ProtocolViolation):
        decode_request(line)


@pytest.mark.parametrize(
    "line",
    [
        '{"id":1,"type":"trained","checkpoint_ref":"c","metric":1.2}',
        '{"id":1,"type":"trained","checkpoint_ref":"c","metric":-0.1}',
        '{"id":1,"type":"evaluated","metric":"high"}',
        '{"id":null,"type":"released"}',
    ],
)
def test_bad_responses_rejected(line):
    with pytest.raises(ProtocolViolation):
        decode_response(line)


@settings(max_examples=50, deadline=None)
@given(
    rid=st.integers(0, 10**9),
    ref=st.text(min_size=1, max_size=30).filter(lambda s: "\n" not in s),
    epoch=st.integers(0, 10**6),
)
def test_train_epoch_codec_property(rid, ref, epoch):
    req = Request(rid, "train_epoch", {"checkpoint_ref": ref, "hyperparams": HP, "epoch_index": epoch})
    assert decode_request(encode(req)) == req


@settings(max_examples=50, deadline=None)
@given(rid=st.integers(0, 10**9), metric=st.floats(0.0, 1.0, allow_nan=False))
def test_trained_codec_property(rid, metric):
    resp = Response(rid, "trained", {"checkpoint_ref": "c", "metric": metric})
    assert decode_response(encode(resp)) == resp


# --- subprocess connection -------------------------------------------------------


def test_subprocess_connection_full_cycle(tmp_path):
    conn = SubprocessConnection(sim_command(tmp_path), timeout_s=30)
    try:
        ready = conn.init("t", 1)
        assert ready.fields["capabilities"]["deterministic"] is True
        r1 = conn.train_epoch(INIT_CHECKPOINT, HP, 0)
        assert r1.type == "trained"
        assert r1.fields["checkpoint_ref"] != INIT_CHECKPOINT
        r2 = conn.evaluate(r1.fields["checkpoint_ref"])
        assert r2.type == "evaluated"
        assert r2.fields["metric"] == r1.fields["metric"]
        r3 = conn.release_checkpoint(r1.fields["checkpoint_ref"])
        assert r3.type == "released"
        r4 = conn.release_checkpoint(r1.fields["checkpoint_ref"])
        assert r4.type == "error" and r4.fields["code"] == "unknown_checkpoint"
    finally:
        conn.close()


def test_request_ids_increase_monotonically(tmp_path):
    engine = SimTrainer(make_scenario(cons=DEFAULT_CONS_TABLE))
    conn = InProcessConnection(engine)
    a = conn.init("t", 1)
    b = conn.evaluate(INIT_CHECKPOINT)
    c = conn.evaluate(INIT_CHECKPOINT)
    assert (a.id, b.id, c.id) == (1, 2, 3)


def test_timeout_raises_connection_lost():
    cmd = [sys.executable, "-c", "import sys,time\nsys.stdin.readline()\ntime.sleep(30)"]
    conn = SubprocessConnection(cmd, timeout_s=0.3)
    try:
        with pytest.raises(ConnectionLost):
            conn.call("init", run_id="t", seed=0)
    finally:
        conn._proc.kill()
        conn._proc.wait()


def test_trainer_exit_raises_connection_lost():
    conn = SubprocessConnection([sys.executable, "-c", "pass"], timeout_s=5)
    with pytest.raises(ConnectionLost):
        conn.call("init", run_id="t", seed=0)


def test_garbage_response_raises_protocol_violation():
    cmd = [sys.executable, "-c", "import sys\nsys.stdin.readline()\nprint('certainly not json')"]
    conn = SubprocessConnection(cmd, timeout_s=5)
    try:
        with pytest.raises(ProtocolViolation):
            conn.call("init", run_id="t", seed=0)
    finally:
        conn._proc.kill()
        conn._proc.wait()


def test_mismatched_response_id_raises(tmp_path):
    class SkewedEngine:
        def handle(self, wire):
            return {"id": 999, "type": "released"}

    conn = InProcessConnection(SkewedEngine())
    with pytest.raises(ProtocolViolation):
        conn.call("shutdown")


# --- conformance -------------------------------------------------------------------


def test_conformance_passes_for_simulator(tmp_path):
    report = conformance_suite(sim_command(tmp_path, sigma=1e-3), timeout_s=60)
    assert report.all_passed, "\n".join(report.lines())
    assert len(report.cases) == 10


ID_IGNORING_TRAINER = r"""
import json, sys
for line in sys.stdin:
    msg = json.loads(line)
    t = msg.get("type")
    if t == "init":
        out = {"id": 999, "type": "ready", "capabilities": {}}
    elif t == "train_epoch":
        out = {"id": 999, "type": "trained", "checkpoint_ref": "c", "metric": 0.5}
    else:
        out = {"id": 999, "type": "released"}
    print(json.dumps(out), flush=True)
"""

RANGE_VIOLATING_TRAINER = r"""
import json, sys
n = 0
for line in sys.stdin:
    msg = json.loads(line)
    t = msg.get("type")
    rid = msg.get("id")
    if t == "init":
        out = {"id": rid, "type": "ready", "capabilities": {}}
    elif t == "train_epoch":
        n += 1
        out = {"id": rid, "type": "trained", "checkpoint_ref": "c%d" % n, "metric": 1.2}
    else:
        out = {"id": rid, "type": "released"}
    print(json.dumps(out), flush=True)
"""


def test_conformance_flags_id_ignoring_trainer(tmp_path):
    script = tmp_path / "bad_ids.py"
    script.write_text(ID_IGNORING_TRAINER)
    report = conformance_suite([sys.executable, str(script)], timeout_s=30)
    assert not report.all_passed
    assert not report.cases[0].passed  # handshake already fails on the id echo


def test_conformance_flags_out_of_range_metric(tmp_path):
    script = tmp_path / "bad_metric.py"
    script.write_text(RANGE_VIOLATING_TRAINER)
    report = conformance_suite([sys.executable, str(script)], timeout_s=30)
    assert not report.all_passed
    by_name = {c.name: c for c in report.cases}
    assert not by_name["train-three-epochs"].passed
