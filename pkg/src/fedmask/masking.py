"""Fixed-point encoding and pairwise-cancelling masks for model updates.

Real-valued update vectors are embedded into the ring of integers mod a
power-of-two modulus using a fixed-point scaling.  Each pair of selected
clients derives an identical mask stream from their shared secret; one
side adds the mask, the other subtracts it, so the masks vanish in the
sum and the aggregator only learns the weighted total.

All functions here are pure and safe to call concurrently.
"""

from dataclasses import dataclass
from struct import pack

import numpy as np

from fedmask.crypto import prf, prg

WORD_BYTES = 8
WIRE_MODULUS = 1 << 64


class MaskingError(Exception):
    pass


@dataclass(frozen=True)
class ModulusConfig:
    """Arithmetic profile shared by every participant of a round.

    The headroom invariant guarantees the true aggregate never wraps:
    the largest possible |sum of n_k * encode(w)| stays below modulus/2,
    so the centered decode is exact up to rounding.
    """

    modulus: int = WIRE_MODULUS
    frac_bits: int = 24
    max_abs_component: float = 256.0
    max_count: int = 1 << 16
    max_clients: int = 1 << 10

    def validate(self) -> None:
        if self.modulus < 2:
            raise MaskingError(f"modulus must be at least 2, got {self.modulus}")
        if self.frac_bits < 1:
            raise MaskingError(f"frac_bits must be at least 1, got {self.frac_bits}")
        if self.max_abs_component <= 0:
            raise MaskingError(
                f"max_abs_component must be positive, got {self.max_abs_component}"
            )
        if self.max_count < 1:
            raise MaskingError(f"max_count must be at least 1, got {self.max_count}")
        if self.max_clients < 1:
            raise MaskingError(f"max_clients must be at least 1, got {self.max_clients}")
        worst = self.max_count * self.max_clients * round(
            self.max_abs_component * (1 << self.frac_bits)
        )
        if worst >= self.modulus // 2:
            raise MaskingError(
                "headroom bound violated: max_count*max_clients*"
                f"round(max_abs_component*2^frac_bits) = {worst} "
                f"must be below modulus/2 = {self.modulus // 2}"
            )

    @property
    def scale(self) -> int:
        return 1 << self.frac_bits


@dataclass(frozen=True)
class ModelVector:
    """A client's local update: real weight vector plus its sample count."""

    weights: np.ndarray
    n: int


@dataclass(frozen=True)
class PairMask:
    """Mask stream for one client pair at one round, identical at both ends."""

    vector: np.ndarray
    count_mask: int
    round: int
    pair: tuple[str, str]


@dataclass(frozen=True)
class MaskedUpdate:
    vector: np.ndarray
    masked_count: int
    round: int
    sender: str


def encode(x: float, config: ModulusConfig) -> int:
    if abs(x) > config.max_abs_component:
        raise MaskingError(
            f"component {x} exceeds max_abs_component {config.max_abs_component}"
        )
    return round(x * config.scale) % config.modulus


def decode(value: int, config: ModulusConfig) -> float:
    if not 0 <= value < config.modulus:
        raise MaskingError(f"value {value} outside [0, modulus)")
    if value > config.modulus // 2:
        value -= config.modulus
    return value / config.scale


def encode_vector(weights: np.ndarray, config: ModulusConfig) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.size and np.max(np.abs(weights)) > config.max_abs_component:
        raise MaskingError(
            f"component magnitude {np.max(np.abs(weights))} exceeds "
            f"max_abs_component {config.max_abs_component}"
        )
    scaled = np.rint(weights * config.scale).astype(np.int64)
    if config.modulus == WIRE_MODULUS:
        return scaled.astype(np.uint64)
    return (scaled % config.modulus).astype(np.uint64)


def _centered(words: np.ndarray, config: ModulusConfig) -> np.ndarray:
    # map onto signed representatives; honest aggregates sit far inside
    # the headroom bound, so the exact boundary convention is moot there
    words = np.asarray(words, dtype=np.uint64)
    centered = words.astype(np.int64)
    if config.modulus != WIRE_MODULUS:
        centered = np.where(centered > config.modulus // 2,
                            centered - config.modulus, centered)
    return centered


def decode_vector(words: np.ndarray, config: ModulusConfig) -> np.ndarray:
    return _centered(words, config) / config.scale


def derive_pair_mask(
    secret: bytes,
    round_no: int,
    length: int,
    config: ModulusConfig,
    pair: tuple[str, str],
) -> PairMask:
    """Expand the pair's shared secret into this round's mask words.

    The stream is length+1 little-endian 64-bit words; the trailing word
    masks the sample count.  Both endpoints call this with the same
    arguments, so the masks agree byte for byte regardless of which side
    initiated the key exchange.
    """
    if pair[0] >= pair[1]:
        raise MaskingError(f"pair must be (lower, higher) hostnames, got {pair}")
    seed = prf(secret, b"mask", pack(">QI", round_no, length))
    blob = prg(seed, WORD_BYTES * (length + 1))
    words = np.frombuffer(blob, dtype="<u8")
    if config.modulus != WIRE_MODULUS:
        words = words % np.uint64(config.modulus)
    return PairMask(
        vector=words[:length],
        count_mask=int(words[length]),
        round=round_no,
        pair=pair,
    )


def mask_update(
    mv: ModelVector,
    masks: list[tuple[PairMask, int]],
    config: ModulusConfig,
    round_no: int,
    sender: str,
    expected_peers: frozenset[str] | None = None,
) -> MaskedUpdate:
    """Hide a local update under the signed sum of the pair masks.

    sign is +1 when the peer sits above the sender in the selection
    order and -1 when below, so each mask is added exactly once and
    subtracted exactly once across the cohort.
    """
    if mv.n < 0 or mv.n > config.max_count:
        raise MaskingError(f"sample count {mv.n} outside [0, max_count]")
    peers = set()
    for mask, sign in masks:
        if mask.round != round_no:
            raise MaskingError(
                f"mask for round {mask.round} cannot blind round {round_no}"
            )
        if sign not in (1, -1):
            raise MaskingError(f"mask sign must be +1 or -1, got {sign}")
        if sender not in mask.pair:
            raise MaskingError(f"mask pair {mask.pair} does not involve {sender}")
        peer = mask.pair[0] if mask.pair[1] == sender else mask.pair[1]
        if peer in peers:
            raise MaskingError(f"duplicate mask for peer {peer}")
        peers.add(peer)
    if expected_peers is not None and peers != set(expected_peers):
        missing = sorted(set(expected_peers) - peers)
        raise MaskingError(f"missing masks for peers {missing}")

    if config.modulus == WIRE_MODULUS:
        acc = np.uint64(mv.n) * encode_vector(mv.weights, config)
        for mask, sign in masks:
            if sign == 1:
                acc = acc + mask.vector
            else:
                acc = acc - mask.vector
        vector = acc
    else:
        acc_list = [
            (mv.n * int(w)) % config.modulus
            for w in encode_vector(mv.weights, config)
        ]
        for mask, sign in masks:
            for i, w in enumerate(mask.vector):
                acc_list[i] = (acc_list[i] + sign * int(w)) % config.modulus
        vector = np.array(acc_list, dtype=np.uint64)

    count = mv.n
    for mask, sign in masks:
        count = (count + sign * mask.count_mask) % config.modulus
    return MaskedUpdate(vector=vector, masked_count=count, round=round_no, sender=sender)


def sum_masked(
    updates: list[MaskedUpdate], config: ModulusConfig
) -> tuple[np.ndarray, int]:
    if not updates:
        raise MaskingError("cannot aggregate an empty round")
    round_no = updates[0].round
    length = updates[0].vector.shape[0]
    for u in updates:
        if u.round != round_no:
            raise MaskingError(f"mixed rounds in aggregate: {u.round} vs {round_no}")
        if u.vector.shape[0] != length:
            raise MaskingError(
                f"mixed vector lengths in aggregate: {u.vector.shape[0]} vs {length}"
            )
    if config.modulus == WIRE_MODULUS:
        agg = np.zeros(length, dtype=np.uint64)
        for u in updates:
            agg = agg + u.vector
    else:
        acc_list = [0] * length
        for u in updates:
            for i, w in enumerate(u.vector):
                acc_list[i] = (acc_list[i] + int(w)) % config.modulus
        agg = np.array(acc_list, dtype=np.uint64)
    total = 0
    for u in updates:
        total = (total + u.masked_count) % config.modulus
    return agg, total


def decode_aggregate(
    aggregate: np.ndarray, total_count: int, config: ModulusConfig
) -> np.ndarray:
    if total_count == 0:
        raise MaskingError("aggregate has zero total sample count")
    if not 0 < total_count < config.modulus // 2:
        raise MaskingError(
            f"total sample count {total_count} not in (0, modulus/2); "
            "masks did not cancel"
        )
    return _centered(aggregate, config) / (total_count * config.scale)


def words_to_bytes(words: np.ndarray) -> bytes:
    return np.asarray(words, dtype="<u8").tobytes()


def bytes_to_words(buf: bytes) -> np.ndarray:
    if len(buf) % WORD_BYTES:
        raise MaskingError(f"word buffer length {len(buf)} not a multiple of 8")
    return np.frombuffer(buf, dtype="<u8")
