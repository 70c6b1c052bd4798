"""Bus tests: delivery semantics, metering, interception, both transports."""

import hashlib

import pytest

from fedmask.bus import BusError, InProcessBus, SocketBus, make_bus
from fedmask.costmodel import CostLedger
from fedmask.wire import Frame, MsgType

SID = b"\x00\x00\x00\x07"


def echo_handler(frame, expects_reply):
    if not expects_reply:
        return None
    return Frame(MsgType.MPC_INPUT_RESPONSE, frame.session_id,
                 frame.round_no, frame.payload)


def silent_handler(frame, expects_reply):
    return None


@pytest.fixture(params=["bus", "socket"])
def bus(request):
    ledger = CostLedger()
    b = make_bus(request.param, ledger, "coordinator.myran.example.com")
    yield b
    b.close()


def test_request_round_trip(bus):
    bus.register("nf-a", echo_handler)
    frame = Frame(MsgType.MPC_INPUT_REQUEST, SID, 3, b"hello")
    reply = bus.request("nf-a", frame)
    assert reply.msg_type == MsgType.MPC_INPUT_RESPONSE
    assert reply.payload == b"hello"
    assert reply.round_no == 3


def test_notify_has_no_reply(bus):
    seen = []

    def handler(frame, expects_reply):
        seen.append((frame.payload, expects_reply))
        return echo_handler(frame, expects_reply)

    bus.register("nf-a", handler)
    bus.notify("nf-a", Frame(MsgType.GLOBAL_MODEL_UPDATE, SID, 0, b"m"))
    bus.request("nf-a", Frame(MsgType.MPC_INPUT_REQUEST, SID, 0, b""))
    assert seen[0] == (b"m", False)
    assert seen[1][1] is True


def test_unknown_destination(bus):
    with pytest.raises(BusError, match="unknown destination"):
        bus.request("nowhere", Frame(MsgType.MPC_INPUT_REQUEST, SID, 0, b""))


def test_missing_reply_is_an_error(bus):
    bus.register("nf-a", silent_handler)
    with pytest.raises(BusError, match="no reply"):
        bus.request("nf-a", Frame(MsgType.MPC_INPUT_REQUEST, SID, 0, b""))


def test_duplicate_registration(bus):
    bus.register("nf-a", echo_handler)
    with pytest.raises(BusError, match="duplicate"):
        bus.register("nf-a", echo_handler)


def test_metering_both_directions(bus):
    bus.register("nf-a", echo_handler)
    bus.set_context("aggregation", 2)
    frame = Frame(MsgType.MPC_INPUT_REQUEST, SID, 2, b"xyz")
    bus.request("nf-a", frame)
    rows = bus.ledger.rows
    assert len(rows) == 2
    down, up = rows
    assert down.direction == "downlink" and down.bytes == 17 + 3
    assert up.direction == "uplink" and up.bytes == 17 + 3
    assert {down.phase, up.phase} == {"aggregation"}
    assert {down.round_no, up.round_no} == {2}


def test_notify_meters_downlink_only(bus):
    bus.register("nf-a", echo_handler)
    bus.notify("nf-a", Frame(MsgType.ABORT, SID, 0, b"\x00"))
    rows = bus.ledger.rows
    assert len(rows) == 1
    assert rows[0].direction == "downlink"
    assert rows[0].bytes == 18


def test_transcript_records(bus):
    bus.register("nf-a", echo_handler)
    bus.set_context("init", 5)
    frame = Frame(MsgType.KEY_SETUP_REQUEST, SID, 5, b"abc")
    bus.request("nf-a", frame)
    entries = bus.transcript
    assert [e.seq for e in entries] == [0, 1]
    down = entries[0]
    assert down.src == "coordinator.myran.example.com"
    assert down.dst == "nf-a"
    assert down.digest == hashlib.sha256(frame.encoded).hexdigest()[:16]
    assert "type=0x01 t=5 bytes=20" in down.line()
    up = entries[1]
    assert up.src == "nf-a" and up.dst == "coordinator.myran.example.com"


def test_transcript_file(bus, tmp_path):
    bus.register("nf-a", echo_handler)
    bus.request("nf-a", Frame(MsgType.MPC_INPUT_REQUEST, SID, 0, b""))
    path = tmp_path / "transcript.log"
    bus.write_transcript(str(path))
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    assert lines[0].startswith("000000 init downlink")


def test_intercept_tamper(bus):
    bus.register("nf-a", echo_handler)

    def flip(direction, dst, frame):
        if direction == "downlink":
            mutated = bytes([frame.payload[0] ^ 0x01]) + frame.payload[1:]
            return Frame(frame.msg_type, frame.session_id, frame.round_no,
                         mutated)
        return frame

    bus.set_intercept(flip)
    reply = bus.request("nf-a", Frame(MsgType.MPC_INPUT_REQUEST, SID, 0,
                                      b"\x00\xff"))
    assert reply.payload == b"\x01\xff"


def test_intercept_withhold_reply(bus):
    bus.register("nf-a", echo_handler)
    bus.set_intercept(lambda direction, dst, frame:
                      None if direction == "uplink" else frame)
    with pytest.raises(BusError, match="withheld"):
        bus.request("nf-a", Frame(MsgType.MPC_INPUT_REQUEST, SID, 0, b""))
    # the request itself was still transmitted and metered
    assert bus.ledger.total(direction="downlink") == 17
    assert bus.ledger.total(direction="uplink") == 0


def test_many_destinations_sequential(bus):
    for i in range(10):
        bus.register(f"nf-{i}", echo_handler)
    for r in range(20):
        for i in range(10):
            reply = bus.request(
                f"nf-{i}",
                Frame(MsgType.MPC_INPUT_REQUEST, SID, r, bytes([i, r])))
            assert reply.payload == bytes([i, r])
    assert len(bus.transcript) == 400


def test_transports_meter_identically():
    def run(transport):
        ledger = CostLedger()
        bus = make_bus(transport, ledger, "coord")
        bus.register("nf-a", echo_handler)
        bus.register("nf-b", echo_handler)
        bus.set_context("init", 0)
        bus.request("nf-a", Frame(MsgType.KEY_SETUP_REQUEST, SID, 0, b"k"))
        bus.set_context("aggregation", 0)
        bus.request("nf-b", Frame(MsgType.MPC_INPUT_REQUEST, SID, 0, b""))
        bus.notify("nf-a", Frame(MsgType.GLOBAL_MODEL_UPDATE, SID, 0, b"gg"))
        transcript = [e.line() for e in bus.transcript]
        bus.close()
        return ledger.rows, transcript

    assert run("bus") == run("socket")


def test_socket_raw_bytes_reconcile():
    ledger = CostLedger()
    bus = SocketBus(ledger, "coord")
    bus.register("nf-a", echo_handler)
    bus.request("nf-a", Frame(MsgType.MPC_INPUT_REQUEST, SID, 0, b"abc"))
    bus.notify("nf-a", Frame(MsgType.GLOBAL_MODEL_UPDATE, SID, 0, b"d"))
    bus.close()
    # transport overhead: 1 kind byte per send, 4-byte count per reply
    overhead = 2 * 1 + 1 * 4
    assert bus.raw_bytes == ledger.total() + overhead


def test_make_bus_rejects_unknown_transport():
    with pytest.raises(BusError):
        make_bus("carrier-pigeon", CostLedger(), "coord")


def test_oversized_frame_rejected(bus):
    bus.register("nf-a", echo_handler)
    big = Frame(MsgType.MPC_INPUT_REQUEST, SID, 0, b"\x00" * ((1 << 26) + 1))
    with pytest.raises(BusError, match="exceeds"):
        bus.request("nf-a", big)
