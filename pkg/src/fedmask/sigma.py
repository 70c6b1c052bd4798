"""Authenticated pairwise key establishment tunneled through the coordinator.

Selected clients run a sign-and-MAC (SIGMA) exchange with every peer they
share a mask with.  The coordinator never sees plaintext secrets: it only
routes opaque containers between clients, in batches, behind a barrier
that waits for every selected client before forwarding anything.

Conventions fixed here:
  * the client at the HIGHER selection position initiates toward each
    lower-positioned peer;
  * the signed transcript is initiator_public || responder_public;
  * the MAC key is PRF(shared, "mac-key", session_id) truncated to 16
    bytes, and each side MACs its own hostname so the peer can bind the
    key to the claimed identity;
  * the cached pair secret is PRF(shared, "pair-secret", "").

Pair secrets are cached for the life of the process; a pair that already
shares a secret skips the exchange entirely and relies on the round
number to freshen its masks.
"""

import random
import threading
from collections import namedtuple
from dataclasses import dataclass, field

from fedmask.crypto import (
    DH_PUBLIC_BYTES,
    MAC_TAG_BYTES,
    SIGNATURE_BYTES,
    DhError,
    DhKeyPair,
    Identity,
    OperatorPki,
    PkiError,
    dh_generate,
    dh_shared,
    mac,
    mac_verify,
    prf,
    sign,
    verify,
)

MSG1_LEN = DH_PUBLIC_BYTES                                  # g^x
MSG2_LEN = DH_PUBLIC_BYTES + SIGNATURE_BYTES + MAC_TAG_BYTES  # g^y, sig, mac
MSG3_LEN = SIGNATURE_BYTES + MAC_TAG_BYTES                  # sig, mac

MIN_COHORT_DEFAULT = 2


class SigmaError(Exception):
    """Any condition that aborts the client's participation in a session."""


class ReplayError(SigmaError):
    pass


class BarrierError(SigmaError):
    pass


@dataclass(frozen=True)
class SelectionList:
    """Ordered cohort for one session; list index is the member's position."""

    hosts: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.hosts)) != len(self.hosts):
            raise SigmaError("selection list contains duplicate hostnames")

    def __len__(self) -> int:
        return len(self.hosts)

    def __contains__(self, host: str) -> bool:
        return host in self.hosts

    def position(self, host: str) -> int:
        try:
            return self.hosts.index(host)
        except ValueError:
            raise SigmaError(f"{host} is not in the selection list") from None

    def lower_peers(self, host: str) -> tuple[str, ...]:
        return self.hosts[: self.position(host)]


@dataclass
class PairwiseSecret:
    peer: str
    secret: bytes
    last_round: int
    established_round: int = -1

    def touch(self, round_no: int) -> None:
        # monotonically non-decreasing; the replay counter already keeps
        # rounds strictly increasing across sessions
        if round_no > self.last_round:
            self.last_round = round_no


class ReplayCounter:
    """Accepts strictly increasing round numbers; -1 means none yet."""

    def __init__(self):
        self.last_accepted = -1

    def accept(self, round_no: int) -> None:
        if round_no <= self.last_accepted:
            raise ReplayError(
                f"round {round_no} not above last accepted {self.last_accepted}"
            )
        self.last_accepted = round_no


@dataclass(frozen=True)
class Container:
    """Opaque routed payload; the coordinator reads src/dst only."""

    src: str
    dst: str
    payload: bytes


@dataclass
class HandshakeState:
    peer: str
    role: str  # "initiator" | "responder"
    ephemeral: DhKeyPair
    initiator_public: bytes
    responder_public: bytes | None = None
    phase: str = "sent1"  # sent1 -> sent2 -> sent3 -> complete


KeySetupOrder = namedtuple("KeySetupOrder", ["dst", "selection", "round_no"])


def nwdaf_begin_session(
    hosts, round_no: int, min_cohort: int = MIN_COHORT_DEFAULT
) -> list[KeySetupOrder]:
    """One key-setup request per cohort member, or refusal.

    Cohorts below min_cohort are refused outright: with a single
    participant the masked sum would expose that participant's update.
    """
    selection = SelectionList(tuple(hosts))
    if len(selection) < min_cohort:
        raise SigmaError(
            f"cohort of {len(selection)} is below the minimum of {min_cohort}"
        )
    return [KeySetupOrder(h, selection, round_no) for h in selection.hosts]


class RoutingBarrier:
    """Collects one submission per expected client, then releases batches.

    Nothing is forwarded until every expected client has submitted; the
    release is a permutation of the collected containers grouped by
    destination.
    """

    def __init__(self, expected):
        self._expected = frozenset(expected)
        self._got: dict[str, list[Container]] = {}
        self._released = False
        self._lock = threading.Lock()

    def submit(self, src: str, containers: list[Container]) -> None:
        with self._lock:
            if self._released:
                raise BarrierError("barrier already released")
            if src not in self._expected:
                raise BarrierError(f"unexpected submission from {src}")
            if src in self._got:
                raise BarrierError(f"duplicate submission from {src}")
            for c in containers:
                if c.src != src:
                    raise BarrierError(f"container src {c.src} forged by {src}")
            self._got[src] = list(containers)

    def pending(self) -> frozenset:
        with self._lock:
            return self._expected - self._got.keys()

    def ready(self) -> bool:
        return not self.pending()

    def release(self) -> dict[str, list[Container]]:
        with self._lock:
            missing = self._expected - self._got.keys()
            if missing:
                raise BarrierError(f"released before {sorted(missing)} responded")
            if self._released:
                raise BarrierError("barrier already released")
            self._released = True
            batches: dict[str, list[Container]] = {h: [] for h in self._expected}
            for src in sorted(self._got):
                for c in self._got[src]:
                    if c.dst not in self._expected:
                        raise BarrierError(
                            f"container addressed outside the cohort: {c.dst}"
                        )
                    batches[c.dst].append(c)
            return batches


class NfKeyAgreement:
    """Per-client handshake driver, replay state, and secret cache.

    The replay counter and the pair-secret cache live as long as the
    client process; handshake state is per session and is reset by each
    accepted key-setup request.
    """

    def __init__(self, identity: Identity, pki: OperatorPki, rng: random.Random):
        self.identity = identity
        self.pki = pki
        self.replay = ReplayCounter()
        self.cache: dict[str, PairwiseSecret] = {}
        self._rng = rng
        self._selection: SelectionList | None = None
        self._session_id = b""
        self._round = -1
        self._handshakes: dict[str, HandshakeState] = {}
        self._aborted = False

    @property
    def hostname(self) -> str:
        return self.identity.hostname

    @property
    def current_round(self) -> int:
        return self._round

    def handle_keysetup(
        self, selection: SelectionList, round_no: int, session_id: bytes
    ) -> list[Container]:
        """Open a session: replay-check the round, initiate toward lower peers."""
        self.replay.accept(round_no)
        me = self.hostname
        if me not in selection:
            self._aborted = True
            raise SigmaError(f"{me} is not part of the announced cohort")
        for host in selection.hosts:
            try:
                self.pki.lookup(host)
            except PkiError:
                self._aborted = True
                raise SigmaError(f"cohort lists unknown hostname {host}") from None
        self._selection = selection
        self._session_id = session_id
        self._round = round_no
        self._handshakes = {}
        self._aborted = False
        out = []
        for peer in selection.lower_peers(me):
            if peer in self.cache:
                continue
            eph = dh_generate(seed=self._rng.randbytes(32))
            self._handshakes[peer] = HandshakeState(
                peer=peer, role="initiator", ephemeral=eph,
                initiator_public=eph.public,
            )
            out.append(Container(src=me, dst=peer, payload=eph.public))
        return out

    def handle_container(self, container: Container) -> list[Container]:
        """Advance the handshake a container belongs to; may emit a reply."""
        if self._aborted:
            raise SigmaError("session already aborted at this client")
        if self._selection is None:
            raise SigmaError("container received outside any session")
        if container.dst != self.hostname:
            self._abort(f"misrouted container for {container.dst}")
        peer = container.src
        state = self._handshakes.get(peer)
        try:
            if state is None:
                return [self._respond_to_msg1(peer, container.payload)]
            if state.role == "initiator" and state.phase == "sent1":
                return [self._finish_as_initiator(state, container.payload)]
            if state.role == "responder" and state.phase == "sent2":
                self._complete_as_responder(state, container.payload)
                return []
        except SigmaError:
            self._aborted = True
            raise
        self._abort(f"unexpected container from {peer} in phase {state.phase}")

    def _abort(self, reason: str):
        self._aborted = True
        raise SigmaError(reason)

    def _mac_key(self, shared: bytes) -> bytes:
        return prf(shared, b"mac-key", self._session_id)[:16]

    def _store_secret(self, peer: str, shared: bytes) -> None:
        secret = prf(shared, b"pair-secret", b"")
        self.cache[peer] = PairwiseSecret(peer=peer, secret=secret,
                                          last_round=self._round,
                                          established_round=self._round)

    def _respond_to_msg1(self, peer: str, payload: bytes) -> Container:
        me = self.hostname
        if peer not in self._selection:
            self._abort(f"first-leg message from non-member {peer}")
        if self._selection.position(peer) <= self._selection.position(me):
            self._abort(f"first-leg message from lower-positioned {peer}")
        if peer in self.cache:
            self._abort(f"{peer} restarted an exchange despite a cached secret")
        if len(payload) != MSG1_LEN:
            self._abort(f"first-leg payload of {len(payload)} bytes")
        eph = dh_generate(seed=self._rng.randbytes(32))
        try:
            shared = dh_shared(eph.private, payload)
        except DhError as e:
            self._abort(f"invalid public key from {peer}: {e}")
        key = self._mac_key(shared)
        transcript = payload + eph.public
        sig = sign(self.identity.signing_key, transcript)
        tag = mac(key, me.encode())
        self._handshakes[peer] = HandshakeState(
            peer=peer, role="responder", ephemeral=eph,
            initiator_public=payload, responder_public=eph.public,
            phase="sent2",
        )
        return Container(src=me, dst=peer, payload=eph.public + sig + tag)

    def _finish_as_initiator(self, state: HandshakeState, payload: bytes) -> Container:
        me = self.hostname
        peer = state.peer
        if len(payload) != MSG2_LEN:
            self._abort(f"second-leg payload of {len(payload)} bytes from {peer}")
        peer_public = payload[:DH_PUBLIC_BYTES]
        sig = payload[DH_PUBLIC_BYTES:DH_PUBLIC_BYTES + SIGNATURE_BYTES]
        tag = payload[DH_PUBLIC_BYTES + SIGNATURE_BYTES:]
        try:
            shared = dh_shared(state.ephemeral.private, peer_public)
        except DhError as e:
            self._abort(f"invalid public key from {peer}: {e}")
        try:
            cert = self.pki.lookup(peer)
        except PkiError:
            self._abort(f"no certificate on record for {peer}")
        transcript = state.initiator_public + peer_public
        if not verify(cert, transcript, sig):
            self._abort(f"transcript signature from {peer} does not verify")
        key = self._mac_key(shared)
        if not mac_verify(key, peer.encode(), tag):
            self._abort(f"identity MAC from {peer} does not verify")
        state.responder_public = peer_public
        state.phase = "complete"
        self._store_secret(peer, shared)
        my_sig = sign(self.identity.signing_key, transcript)
        my_tag = mac(key, me.encode())
        return Container(src=me, dst=peer, payload=my_sig + my_tag)

    def _complete_as_responder(self, state: HandshakeState, payload: bytes) -> None:
        peer = state.peer
        if len(payload) != MSG3_LEN:
            self._abort(f"third-leg payload of {len(payload)} bytes from {peer}")
        sig = payload[:SIGNATURE_BYTES]
        tag = payload[SIGNATURE_BYTES:]
        try:
            cert = self.pki.lookup(peer)
        except PkiError:
            self._abort(f"no certificate on record for {peer}")
        transcript = state.initiator_public + state.responder_public
        if not verify(cert, transcript, sig):
            self._abort(f"transcript signature from {peer} does not verify")
        shared = dh_shared(state.ephemeral.private, state.initiator_public)
        key = self._mac_key(shared)
        if not mac_verify(key, peer.encode(), tag):
            self._abort(f"identity MAC from {peer} does not verify")
        state.phase = "complete"
        self._store_secret(peer, shared)

    def abandon_session(self, session_id: bytes | None = None) -> None:
        """Coordinator declared a round dead; refuse further containers.

        Secrets established during the dead session are evicted: an abort
        can strike between the initiator caching (at its second leg) and
        the responder caching (at the third), and keeping the one-sided
        entry would wedge every later session containing that pair, since
        the cached side skips re-keying and the other side cannot start
        it.  Secrets from earlier completed sessions are unaffected.

        When a session_id is given and does not match the session open
        here, the call is a no-op: the coordinator is tearing down a
        session this client already refused (a replayed round, say), so
        local state is not part of the wreckage.
        """
        if session_id is not None and session_id != self._session_id:
            return
        self._aborted = True
        self.cache = {peer: entry for peer, entry in self.cache.items()
                      if entry.established_round != self._round}

    def session_complete(self) -> bool:
        if self._selection is None or self._aborted:
            return False
        me = self.hostname
        return all(p in self.cache for p in self._selection.hosts if p != me)

    def mask_secret(self, peer: str, round_no: int) -> bytes:
        entry = self.cache.get(peer)
        if entry is None:
            raise SigmaError(f"no pair secret established with {peer}")
        entry.touch(round_no)
        return entry.secret

    def pending_handshakes(self) -> int:
        return sum(1 for s in self._handshakes.values() if s.phase != "complete")
