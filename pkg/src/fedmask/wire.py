"""Bit-exact wire format for every message the coordinator and clients exchange.

Frame layout: type (1 byte) | session_id (4 bytes) | round (8 bytes,
big-endian) | payload length (4 bytes, big-endian) | payload.  Every frame
is 17 + length bytes and every transmitted frame is metered.

Header integers and payload counts are big-endian.  Masked-arithmetic
words (update vectors, masked counts) are little-endian 64-bit words, as
fixed by the masking layer; model weights travel as big-endian binary32.
"""

from dataclasses import dataclass
from enum import IntEnum
from struct import pack, unpack

import numpy as np

from fedmask.crypto import HOSTNAME_BYTES
from fedmask.masking import bytes_to_words, words_to_bytes
from fedmask.sigma import Container

HEADER_BYTES = 17
SESSION_ID_BYTES = 4
CONTAINER_OVERHEAD = 2 * HOSTNAME_BYTES + 4  # src + dst + payload length


class WireError(Exception):
    pass


class MsgType(IntEnum):
    KEY_SETUP_REQUEST = 0x01
    CONTAINER_BATCH = 0x02
    MPC_INPUT_REQUEST = 0x03
    MPC_INPUT_RESPONSE = 0x04
    GLOBAL_MODEL_UPDATE = 0x05
    REGISTER = 0x06
    SUBSCRIBE = 0x07
    UNSUBSCRIBE = 0x08
    ABORT = 0x09


class AbortReason(IntEnum):
    GENERIC = 0x00
    REPLAY = 0x01
    HANDSHAKE = 0x02
    BARRIER = 0x03
    MALFORMED = 0x04


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    session_id: bytes
    round_no: int
    payload: bytes

    @property
    def wire_bytes(self) -> int:
        return HEADER_BYTES + len(self.payload)

    @property
    def encoded(self) -> bytes:
        return encode_frame(self.msg_type, self.session_id, self.round_no,
                            self.payload)


def encode_frame(msg_type: MsgType, session_id: bytes, round_no: int,
                 payload: bytes) -> bytes:
    if len(session_id) != SESSION_ID_BYTES:
        raise WireError(f"session id must be 4 bytes, got {len(session_id)}")
    if not 0 <= round_no < 2**64:
        raise WireError(f"round {round_no} does not fit in 8 bytes")
    if len(payload) >= 2**32:
        raise WireError("payload too large for a 4-byte length field")
    return pack(">B4sQI", int(msg_type), session_id, round_no, len(payload)) + payload


def decode_frame(buf: bytes) -> Frame:
    if len(buf) < HEADER_BYTES:
        raise WireError(f"frame of {len(buf)} bytes is shorter than the header")
    kind, session_id, round_no, length = unpack(">B4sQI", buf[:HEADER_BYTES])
    try:
        msg_type = MsgType(kind)
    except ValueError:
        raise WireError(f"unknown message type 0x{kind:02X}") from None
    if len(buf) != HEADER_BYTES + length:
        raise WireError(
            f"frame length field says {length} but {len(buf) - HEADER_BYTES} "
            "payload bytes are present"
        )
    return Frame(msg_type, session_id, round_no, buf[HEADER_BYTES:])


def _hostname_bytes(hostname: str) -> bytes:
    raw = hostname.encode("ascii")
    if len(raw) != HOSTNAME_BYTES:
        raise WireError(f"hostname {hostname!r} is not {HOSTNAME_BYTES} bytes")
    return raw


def encode_keysetup(hosts) -> bytes:
    return pack(">I", len(hosts)) + b"".join(_hostname_bytes(h) for h in hosts)


def decode_keysetup(payload: bytes) -> list[str]:
    if len(payload) < 4:
        raise WireError("key-setup payload shorter than its count field")
    (count,) = unpack(">I", payload[:4])
    body = payload[4:]
    if len(body) != count * HOSTNAME_BYTES:
        raise WireError(f"key-setup payload holds {len(body)} bytes "
                        f"for {count} hostnames")
    return [
        body[i * HOSTNAME_BYTES:(i + 1) * HOSTNAME_BYTES].decode("ascii")
        for i in range(count)
    ]


def encode_container_batch(containers) -> bytes:
    parts = [pack(">I", len(containers))]
    for c in containers:
        parts.append(_hostname_bytes(c.src))
        parts.append(_hostname_bytes(c.dst))
        parts.append(pack(">I", len(c.payload)))
        parts.append(c.payload)
    return b"".join(parts)


def decode_container_batch(payload: bytes) -> list[Container]:
    if len(payload) < 4:
        raise WireError("container batch shorter than its count field")
    (count,) = unpack(">I", payload[:4])
    pos = 4
    out = []
    for _ in range(count):
        if len(payload) - pos < CONTAINER_OVERHEAD:
            raise WireError("container batch truncated mid-container")
        src = payload[pos:pos + HOSTNAME_BYTES].decode("ascii")
        pos += HOSTNAME_BYTES
        dst = payload[pos:pos + HOSTNAME_BYTES].decode("ascii")
        pos += HOSTNAME_BYTES
        (length,) = unpack(">I", payload[pos:pos + 4])
        pos += 4
        if len(payload) - pos < length:
            raise WireError("container payload truncated")
        out.append(Container(src=src, dst=dst, payload=payload[pos:pos + length]))
        pos += length
    if pos != len(payload):
        raise WireError(f"{len(payload) - pos} trailing bytes after containers")
    return out


def encode_mpc_input_request() -> bytes:
    return b""


def encode_mpc_input_response(vector: np.ndarray, masked_count: int) -> bytes:
    return (pack(">I", vector.shape[0])
            + words_to_bytes(vector)
            + pack("<Q", masked_count))


def decode_mpc_input_response(payload: bytes) -> tuple[np.ndarray, int]:
    if len(payload) < 4:
        raise WireError("masked-update payload shorter than its length field")
    (dim,) = unpack(">I", payload[:4])
    if len(payload) != 4 + 8 * dim + 8:
        raise WireError(f"masked-update payload of {len(payload)} bytes "
                        f"does not match dimension {dim}")
    vector = bytes_to_words(payload[4:4 + 8 * dim])
    (masked_count,) = unpack("<Q", payload[4 + 8 * dim:])
    return vector, masked_count


def encode_global_model(weights: np.ndarray) -> bytes:
    arr = np.asarray(weights, dtype=">f4")
    return pack(">I", arr.shape[0]) + arr.tobytes()


def decode_global_model(payload: bytes) -> np.ndarray:
    if len(payload) < 4:
        raise WireError("model payload shorter than its length field")
    (dim,) = unpack(">I", payload[:4])
    if len(payload) != 4 + 4 * dim:
        raise WireError(f"model payload of {len(payload)} bytes "
                        f"does not match dimension {dim}")
    return np.frombuffer(payload[4:], dtype=">f4").astype(np.float32)


def encode_register(hostname: str, has_gpu: bool, traffic_load: int,
                    model_kinds) -> bytes:
    if not 0 <= traffic_load <= 100:
        raise WireError(f"traffic load {traffic_load} outside 0..100")
    parts = [_hostname_bytes(hostname), pack(">BB", int(has_gpu), traffic_load),
             pack(">I", len(model_kinds))]
    for kind in model_kinds:
        raw = kind.encode("utf-8")
        parts.append(pack(">I", len(raw)))
        parts.append(raw)
    return b"".join(parts)


def decode_register(payload: bytes) -> tuple[str, bool, int, list[str]]:
    need = HOSTNAME_BYTES + 2 + 4
    if len(payload) < need:
        raise WireError("registration payload truncated")
    hostname = payload[:HOSTNAME_BYTES].decode("ascii")
    has_gpu, load = unpack(">BB", payload[HOSTNAME_BYTES:HOSTNAME_BYTES + 2])
    (count,) = unpack(">I", payload[HOSTNAME_BYTES + 2:need])
    pos = need
    kinds = []
    for _ in range(count):
        if len(payload) - pos < 4:
            raise WireError("registration payload truncated in model kinds")
        (length,) = unpack(">I", payload[pos:pos + 4])
        pos += 4
        if len(payload) - pos < length:
            raise WireError("registration model kind truncated")
        kinds.append(payload[pos:pos + length].decode("utf-8"))
        pos += length
    if pos != len(payload):
        raise WireError("trailing bytes after registration payload")
    return hostname, bool(has_gpu), load, kinds


def encode_subscribe(hostname: str) -> bytes:
    return _hostname_bytes(hostname)


def decode_subscribe(payload: bytes) -> str:
    if len(payload) != HOSTNAME_BYTES:
        raise WireError(f"subscription payload of {len(payload)} bytes")
    return payload.decode("ascii")


def encode_abort(reason: AbortReason) -> bytes:
    return bytes([int(reason)])


def decode_abort(payload: bytes) -> AbortReason:
    if len(payload) != 1:
        raise WireError(f"abort payload of {len(payload)} bytes")
    try:
        return AbortReason(payload[0])
    except ValueError:
        raise WireError(f"unknown abort reason 0x{payload[0]:02X}") from None
