"""Coordinator-centric message bus with byte metering.

All traffic in the simulation flows between the coordinator and one
network function; NFs never talk to each other directly.  The bus
therefore exposes exactly two verbs to the coordinator:

* ``request(dst, frame)``: deliver a frame and wait for exactly one
  reply frame.
* ``notify(dst, frame)``: deliver a frame, no reply expected.

Every frame that crosses the bus is metered into a ``CostLedger`` row
(direction ``downlink`` for coordinator-to-NF, ``uplink`` for replies)
and appended to an in-memory transcript.  Transport framing added by
the socket transport (a kind flag and a reply-count prefix) is not
message content and is excluded from the ledger, the same way the
HTTP/2 and TLS layers are excluded from the byte counts the ledger
models.

Two transports with identical observable behaviour:

* ``InProcessBus`` calls handlers directly.
* ``SocketBus`` serializes frames over a ``socketpair`` per NF, with a
  service thread on the NF side.  Useful to demonstrate the metering
  is transport-invariant.

A fault-injection hook can be installed via ``set_intercept``; it sees
every frame before delivery and may rewrite it or drop it (dropping a
reply surfaces as ``BusError`` at the requester).
"""

from __future__ import annotations

import hashlib
import socket
import struct
import threading
from typing import Callable, NamedTuple, Optional

from fedmask.costmodel import CostLedger
from fedmask.wire import HEADER_BYTES, Frame, WireError, decode_frame

# frames larger than this are assumed to be a bug, not a big model
MAX_FRAME_BYTES = 1 << 26

Handler = Callable[[Frame, bool], Optional[Frame]]
Intercept = Callable[[str, str, Frame], Optional[Frame]]


class BusError(Exception):
    pass


class TranscriptEntry(NamedTuple):
    seq: int
    phase: str
    direction: str
    src: str
    dst: str
    msg_type: int
    round_no: int
    nbytes: int
    digest: str

    def line(self) -> str:
        return (f"{self.seq:06d} {self.phase} {self.direction} "
                f"{self.src}->{self.dst} type=0x{self.msg_type:02X} "
                f"t={self.round_no} bytes={self.nbytes} sha256={self.digest}")


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]


class _BusCore:
    """Registration, metering, transcript, and interception; transport
    subclasses supply ``_deliver``."""

    def __init__(self, ledger: CostLedger, coordinator: str) -> None:
        self._ledger = ledger
        self._coordinator = coordinator
        self._handlers: dict[str, Handler] = {}
        self._transcript: list[TranscriptEntry] = []
        self._intercept: Optional[Intercept] = None
        self._phase = "init"
        self._round = 0
        self._lock = threading.Lock()

    @property
    def coordinator(self) -> str:
        return self._coordinator

    @property
    def ledger(self) -> CostLedger:
        return self._ledger

    @property
    def transcript(self) -> tuple[TranscriptEntry, ...]:
        return tuple(self._transcript)

    def register(self, hostname: str, handler: Handler) -> None:
        if hostname in self._handlers:
            raise BusError(f"duplicate registration for {hostname}")
        self._handlers[hostname] = handler

    def hostnames(self) -> tuple[str, ...]:
        return tuple(sorted(self._handlers))

    def set_context(self, phase: str, round_no: int) -> None:
        self._phase = phase
        self._round = round_no

    def set_intercept(self, hook: Optional[Intercept]) -> None:
        self._intercept = hook

    def write_transcript(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for entry in self._transcript:
                fh.write(entry.line() + "\n")

    def request(self, dst: str, frame: Frame) -> Frame:
        handler = self._handler_for(dst)
        sent = self._outbound(dst, frame)
        reply = self._deliver(dst, handler, sent, expects_reply=True)
        if reply is None:
            raise BusError(f"no reply from {dst} to request "
                           f"type=0x{frame.msg_type:02X}")
        reply = self._apply_intercept("uplink", dst, reply)
        if reply is None:
            raise BusError(f"reply from {dst} withheld in transit")
        self._meter("uplink", dst, reply)
        return reply

    def notify(self, dst: str, frame: Frame) -> None:
        handler = self._handler_for(dst)
        sent = self._outbound(dst, frame)
        if sent is None:
            return
        self._deliver(dst, handler, sent, expects_reply=False)

    def close(self) -> None:
        pass

    def _handler_for(self, dst: str) -> Handler:
        try:
            return self._handlers[dst]
        except KeyError:
            raise BusError(f"unknown destination {dst!r}") from None

    def _outbound(self, dst: str, frame: Frame) -> Optional[Frame]:
        """Meter the send, then apply in-transit interception."""
        self._meter("downlink", dst, frame)
        return self._apply_intercept("downlink", dst, frame)

    def _apply_intercept(self, direction: str, dst: str,
                         frame: Frame) -> Optional[Frame]:
        if self._intercept is None:
            return frame
        return self._intercept(direction, dst, frame)

    def _meter(self, direction: str, dst: str, frame: Frame) -> None:
        data = frame.encoded
        if len(data) > MAX_FRAME_BYTES:
            raise BusError(f"frame of {len(data)} bytes exceeds the "
                           f"{MAX_FRAME_BYTES} byte bus limit")
        with self._lock:
            self._ledger.add(self._round, self._phase, direction,
                             frame.msg_type, len(data))
            src, to = ((self._coordinator, dst) if direction == "downlink"
                       else (dst, self._coordinator))
            self._transcript.append(TranscriptEntry(
                seq=len(self._transcript), phase=self._phase,
                direction=direction, src=src, dst=to,
                msg_type=frame.msg_type, round_no=frame.round_no,
                nbytes=len(data), digest=_digest(data)))

    def _deliver(self, dst: str, handler: Handler, frame: Frame,
                 expects_reply: bool) -> Optional[Frame]:
        raise NotImplementedError


class InProcessBus(_BusCore):
    def _deliver(self, dst: str, handler: Handler, frame: Frame,
                 expects_reply: bool) -> Optional[Frame]:
        return handler(frame, expects_reply)


def _recv_exact(conn: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        piece = conn.recv(remaining)
        if not piece:
            raise BusError("connection closed mid-frame")
        chunks.append(piece)
        remaining -= len(piece)
    return b"".join(chunks)


def _recv_frame(conn: socket.socket) -> Frame:
    header = _recv_exact(conn, HEADER_BYTES)
    (length,) = struct.unpack(">I", header[13:17])
    if length > MAX_FRAME_BYTES:
        raise BusError(f"oversized frame announced: {length} bytes")
    payload = _recv_exact(conn, length) if length else b""
    try:
        return decode_frame(header + payload)
    except WireError as exc:
        raise BusError(f"undecodable frame on socket: {exc}") from exc


class SocketBus(_BusCore):
    """Same semantics as ``InProcessBus`` over a socketpair per NF.

    On-wire layout per message: 1 kind byte (1 = request, 0 = notify)
    followed by the frame; a request's reply comes back as a u32 count
    (0 or 1) followed by that many frames.  ``raw_bytes`` counts every
    byte written to any socket, so tests can reconcile it against the
    ledger plus the known per-message transport overhead.
    """

    def __init__(self, ledger: CostLedger, coordinator: str) -> None:
        super().__init__(ledger, coordinator)
        self._conns: dict[str, socket.socket] = {}
        self._threads: list[threading.Thread] = []
        self._raw = 0
        self._raw_lock = threading.Lock()
        self._closed = False

    @property
    def raw_bytes(self) -> int:
        return self._raw

    def register(self, hostname: str, handler: Handler) -> None:
        super().register(hostname, handler)
        near, far = socket.socketpair()
        self._conns[hostname] = near
        thread = threading.Thread(
            target=self._serve, args=(far, handler),
            name=f"nf-{hostname}", daemon=True)
        thread.start()
        self._threads.append(thread)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        for conn in self._conns.values():
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.close()
        for thread in self._threads:
            thread.join(timeout=5)

    def _send(self, conn: socket.socket, data: bytes) -> None:
        conn.sendall(data)
        with self._raw_lock:
            self._raw += len(data)

    def _serve(self, conn: socket.socket, handler: Handler) -> None:
        try:
            while True:
                try:
                    kind = _recv_exact(conn, 1)
                except BusError:
                    return
                frame = _recv_frame(conn)
                reply = handler(frame, kind == b"\x01")
                if kind == b"\x01":
                    if reply is None:
                        self._send(conn, struct.pack(">I", 0))
                    else:
                        self._send(conn, struct.pack(">I", 1)
                                   + reply.encoded)
        except OSError:
            return
        finally:
            conn.close()

    def _deliver(self, dst: str, handler: Handler, frame: Frame,
                 expects_reply: bool) -> Optional[Frame]:
        conn = self._conns[dst]
        kind = b"\x01" if expects_reply else b"\x00"
        self._send(conn, kind + frame.encoded)
        if not expects_reply:
            return None
        (count,) = struct.unpack(">I", _recv_exact(conn, 4))
        if count == 0:
            return None
        if count != 1:
            raise BusError(f"{dst} sent {count} replies to one request")
        return _recv_frame(conn)


def make_bus(transport: str, ledger: CostLedger, coordinator: str) -> _BusCore:
    if transport == "bus":
        return InProcessBus(ledger, coordinator)
    if transport == "socket":
        return SocketBus(ledger, coordinator)
    raise BusError(f"unknown transport {transport!r}")
