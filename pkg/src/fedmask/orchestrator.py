"""Round orchestration: NF registry, client actors, coordinator, simulation.

One federated round has two metered phases.

init: the coordinator announces the cohort to every selected NF
(KeySetupRequest) and collects one container batch from each, even when
a member has nothing to send.  If any batch carried handshake
containers, three more synchronized legs follow: every member receives
a (possibly empty) routed batch and, for the first two of those legs,
replies with its own batch.  The final leg is delivery only.  A routing
barrier sits between legs so no container is forwarded before all
replies of the previous leg arrived.

aggregation: each cohort member is asked for its masked local update
(MpcInputRequest/Response); the coordinator sums the masked words, where
the pairwise masks cancel, decodes the weighted mean, and pushes the new
global model to every subscribed NF.

Any failure aborts the round: the coordinator broadcasts Abort to the
cohort, keeps the previous model, and the round counter stays consumed
so the replay protection at the clients keeps its guarantee.

Registration and model subscription happen out of band (direct calls)
and are deliberately unmetered, so the ledger contains exactly the two
phases above.
"""

from __future__ import annotations

import csv
import hashlib
import random
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from fedmask.bus import BusError, make_bus
from fedmask.config import RunConfig
from fedmask.costmodel import CostLedger
from fedmask.crypto import OperatorPki, make_hostname
from fedmask.flengine import (
    Dataset,
    LocalTrainer,
    TrainingError,
    generate_task,
    local_train,
)
from fedmask.masking import (
    MaskedUpdate,
    MaskingError,
    ModulusConfig,
    decode_aggregate,
    derive_pair_mask,
    mask_update,
    sum_masked,
)
from fedmask.sigma import (
    Container,
    NfKeyAgreement,
    ReplayError,
    RoutingBarrier,
    SelectionList,
    SigmaError,
    nwdaf_begin_session,
)
from fedmask.wire import (
    AbortReason,
    Frame,
    MsgType,
    WireError,
    decode_abort,
    decode_container_batch,
    decode_global_model,
    decode_keysetup,
    decode_mpc_input_response,
    encode_abort,
    encode_container_batch,
    encode_global_model,
    encode_keysetup,
    encode_mpc_input_response,
)

COORDINATOR_HOST = "nwdaf-anlf.myran.example.com"


class OrchestratorError(Exception):
    pass


class SelectionError(OrchestratorError):
    pass


class _RoundAbort(Exception):
    """Internal: unwinds a failed round back to the abort broadcast."""

    def __init__(self, reason: AbortReason, detail: str):
        super().__init__(detail)
        self.reason = reason
        self.detail = detail


@dataclass(frozen=True)
class NfProfile:
    """Capabilities a network function announces when it registers."""

    hostname: str
    has_gpu: bool = False
    traffic_load: int = 0
    supported_models: tuple[str, ...] = ("linear",)

    def __post_init__(self):
        if not 0 <= self.traffic_load <= 100:
            raise OrchestratorError(
                f"traffic_load must be in [0, 100], got {self.traffic_load}")


class Nrf:
    """Registry of enrolled NF profiles, keyed by hostname."""

    def __init__(self) -> None:
        self._profiles: dict[str, NfProfile] = {}

    def register(self, profile: NfProfile) -> None:
        if profile.hostname in self._profiles:
            raise OrchestratorError(
                f"{profile.hostname} is already registered")
        self._profiles[profile.hostname] = profile

    def lookup(self, hostname: str) -> NfProfile:
        try:
            return self._profiles[hostname]
        except KeyError:
            raise OrchestratorError(f"{hostname} is not registered") from None

    def hostnames(self) -> tuple[str, ...]:
        return tuple(sorted(self._profiles))


def _abort_reason(exc: Exception) -> AbortReason:
    if isinstance(exc, ReplayError):
        return AbortReason.REPLAY
    if isinstance(exc, SigmaError):
        return AbortReason.HANDSHAKE
    if isinstance(exc, (WireError, MaskingError)):
        return AbortReason.MALFORMED
    return AbortReason.GENERIC


class NfActor:
    """A network function: handshake state, local data, one frame handler."""

    def __init__(self, identity, pki: OperatorPki, profile: NfProfile,
                 dataset: Dataset, trainer: LocalTrainer,
                 modulus: ModulusConfig, rng: random.Random) -> None:
        self.profile = profile
        self.dataset = dataset
        self.trainer = trainer
        self.modulus = modulus
        self.agreement = NfKeyAgreement(identity, pki, rng)
        self.model: Optional[np.ndarray] = None
        self.last_update = None  # ModelVector from the most recent round
        self._cohort: Optional[SelectionList] = None

    @property
    def hostname(self) -> str:
        return self.agreement.hostname

    def receive_model(self, weights: np.ndarray) -> None:
        """Out-of-band model delivery at subscription time."""
        self.model = np.asarray(weights, dtype=np.float32).copy()

    def handle(self, frame: Frame, expects_reply: bool) -> Optional[Frame]:
        try:
            return self._dispatch(frame, expects_reply)
        except (SigmaError, WireError, MaskingError, TrainingError) as exc:
            self._cohort = None
            if expects_reply:
                return Frame(MsgType.ABORT, frame.session_id, frame.round_no,
                             encode_abort(_abort_reason(exc)))
            return None

    def _dispatch(self, frame: Frame, expects_reply: bool) -> Optional[Frame]:
        kind = frame.msg_type
        if kind == MsgType.KEY_SETUP_REQUEST:
            return self._on_keysetup(frame)
        if kind == MsgType.CONTAINER_BATCH:
            return self._on_batch(frame, expects_reply)
        if kind == MsgType.MPC_INPUT_REQUEST:
            return self._on_input_request(frame)
        if kind == MsgType.GLOBAL_MODEL_UPDATE:
            self.model = decode_global_model(frame.payload)
            return None
        if kind == MsgType.ABORT:
            decode_abort(frame.payload)
            self.agreement.abandon_session(frame.session_id)
            self._cohort = None
            return None
        raise WireError(f"unexpected message type 0x{kind:02X}")

    def _on_keysetup(self, frame: Frame) -> Frame:
        selection = SelectionList(tuple(decode_keysetup(frame.payload)))
        containers = self.agreement.handle_keysetup(
            selection, frame.round_no, frame.session_id)
        self._cohort = selection
        return Frame(MsgType.CONTAINER_BATCH, frame.session_id,
                     frame.round_no, encode_container_batch(containers))

    def _on_batch(self, frame: Frame, expects_reply: bool) -> Optional[Frame]:
        if frame.round_no != self.agreement.current_round:
            raise SigmaError(
                f"containers for round {frame.round_no} in round "
                f"{self.agreement.current_round}")
        out: list[Container] = []
        for container in decode_container_batch(frame.payload):
            out.extend(self.agreement.handle_container(container))
        if not expects_reply:
            if out:
                # the delivery leg must be terminal; treat as protocol abuse
                self.agreement.abandon_session()
            return None
        return Frame(MsgType.CONTAINER_BATCH, frame.session_id,
                     frame.round_no, encode_container_batch(out))

    def _on_input_request(self, frame: Frame) -> Frame:
        round_no = frame.round_no
        if self._cohort is None or round_no != self.agreement.current_round:
            raise SigmaError(f"no open session for round {round_no}")
        if not self.agreement.session_complete():
            raise SigmaError("asked for input before all pair secrets exist")
        if self.model is None:
            raise TrainingError("no global model received yet")
        update = local_train(self.model, self.dataset, self.trainer,
                             seed=round_no)
        self.last_update = update
        me = self.hostname
        masks = []
        for peer in self._cohort.hosts:
            if peer == me:
                continue
            secret = self.agreement.mask_secret(peer, round_no)
            pair = (me, peer) if me < peer else (peer, me)
            mask = derive_pair_mask(secret, round_no,
                                    update.weights.shape[0],
                                    self.modulus, pair)
            masks.append((mask, 1 if me < peer else -1))
        others = frozenset(h for h in self._cohort.hosts if h != me)
        masked = mask_update(update, masks, self.modulus, round_no, me,
                             expected_peers=others)
        return Frame(MsgType.MPC_INPUT_RESPONSE, frame.session_id, round_no,
                     encode_mpc_input_response(masked.vector,
                                               masked.masked_count))


@dataclass
class RoundRecord:
    round_no: int
    cohort: tuple[str, ...]
    aborted: bool
    reason: str = ""
    init_bytes: int = 0
    agg_bytes: int = 0
    model: Optional[np.ndarray] = field(default=None, repr=False)


class Coordinator:
    """Drives rounds over the bus; owns the global model and round counter."""

    def __init__(self, bus, nrf: Nrf, config: RunConfig,
                 modulus: ModulusConfig, selection_rng: random.Random,
                 session_rng: random.Random,
                 initial_model: np.ndarray) -> None:
        self.bus = bus
        self.nrf = nrf
        self.config = config
        self.modulus = modulus
        self.model = np.asarray(initial_model, dtype=np.float32).copy()
        self.last_decoded: Optional[np.ndarray] = None
        self.subscribers: list[str] = []
        self._selection_rng = selection_rng
        self._session_rng = session_rng
        self._next_round = 0

    def subscribe(self, hostname: str) -> None:
        if hostname in self.subscribers:
            raise OrchestratorError(f"{hostname} already subscribed")
        self.subscribers.append(hostname)
        self.subscribers.sort()

    def eligible_pool(self) -> list[str]:
        if self.config.selection_strategy == "uniform":
            return list(self.subscribers)
        pool = []
        for host in self.subscribers:
            profile = self.nrf.lookup(host)
            if self.config.require_gpu and not profile.has_gpu:
                continue
            if profile.traffic_load > self.config.max_traffic_load:
                continue
            if self.config.model_kind not in profile.supported_models:
                continue
            pool.append(host)
        return pool

    def select_cohort(self) -> list[str]:
        k_s = self.config.cohort_size
        if k_s < self.config.min_cohort:
            raise SelectionError(
                f"cohort of {k_s} is below the minimum of "
                f"{self.config.min_cohort}")
        pool = self.eligible_pool()
        if len(pool) < k_s:
            raise SelectionError(
                f"only {len(pool)} eligible NFs for a cohort of {k_s}")
        return sorted(self._selection_rng.sample(sorted(pool), k_s))

    def run_round(self, force_round_no: Optional[int] = None) -> RoundRecord:
        planned = self._next_round
        self._next_round = planned + 1
        t = planned if force_round_no is None else force_round_no
        session_id = self._session_rng.randbytes(4)
        cohort = tuple(self.select_cohort())
        record = RoundRecord(round_no=t, cohort=cohort, aborted=False)
        try:
            self._init_phase(cohort, t, session_id)
            updates = self._aggregation_phase(cohort, t, session_id)
            aggregate, total = sum_masked(updates, self.modulus)
            try:
                mean = decode_aggregate(aggregate, total, self.modulus)
            except MaskingError as exc:
                raise _RoundAbort(AbortReason.MALFORMED, str(exc)) from exc
            self.last_decoded = mean
            self.model = mean.astype(np.float32)
            self._broadcast_model(t, session_id)
        except _RoundAbort as abort:
            self._broadcast_abort(cohort, t, session_id, abort.reason)
            record.aborted = True
            record.reason = abort.detail
        record.model = self.model.copy()
        ledger: CostLedger = self.bus.ledger
        record.init_bytes = ledger.total(round_no=t, phase="init")
        record.agg_bytes = ledger.total(round_no=t, phase="aggregation")
        return record

    def _request(self, dst: str, frame: Frame,
                 want: MsgType) -> Frame:
        try:
            reply = self.bus.request(dst, frame)
        except BusError as exc:
            raise _RoundAbort(AbortReason.GENERIC,
                              f"{dst} unreachable: {exc}") from exc
        if reply.msg_type == MsgType.ABORT:
            try:
                reason = decode_abort(reply.payload)
            except WireError:
                reason = AbortReason.GENERIC
            raise _RoundAbort(reason, f"{dst} aborted: {reason.name}")
        if reply.msg_type != want or reply.round_no != frame.round_no:
            raise _RoundAbort(
                AbortReason.MALFORMED,
                f"{dst} answered 0x{reply.msg_type:02X} t={reply.round_no} "
                f"to 0x{frame.msg_type:02X} t={frame.round_no}")
        return reply

    def _decode_batch(self, host: str, reply: Frame) -> list[Container]:
        try:
            return decode_container_batch(reply.payload)
        except WireError as exc:
            raise _RoundAbort(AbortReason.MALFORMED,
                              f"undecodable batch from {host}: {exc}") from exc

    @staticmethod
    def _release(barrier: RoutingBarrier) -> dict[str, list[Container]]:
        try:
            return barrier.release()
        except SigmaError as exc:
            raise _RoundAbort(AbortReason.BARRIER, str(exc)) from exc

    def _init_phase(self, cohort: tuple[str, ...], t: int,
                    session_id: bytes) -> None:
        self.bus.set_context("init", t)
        try:
            orders = nwdaf_begin_session(cohort, t, self.config.min_cohort)
        except SigmaError as exc:
            raise _RoundAbort(AbortReason.HANDSHAKE, str(exc)) from exc

        barrier = RoutingBarrier(cohort)
        for order in orders:
            frame = Frame(MsgType.KEY_SETUP_REQUEST, session_id, t,
                          encode_keysetup(list(order.selection.hosts)))
            reply = self._request(order.dst, frame, MsgType.CONTAINER_BATCH)
            try:
                barrier.submit(order.dst, self._decode_batch(order.dst, reply))
            except SigmaError as exc:
                raise _RoundAbort(AbortReason.BARRIER, str(exc)) from exc
        routed = self._release(barrier)
        if not any(routed.values()):
            return

        # two request legs (handshake replies), then delivery only
        for _ in range(2):
            barrier = RoutingBarrier(cohort)
            for host in cohort:
                frame = Frame(MsgType.CONTAINER_BATCH, session_id, t,
                              encode_container_batch(routed[host]))
                reply = self._request(host, frame, MsgType.CONTAINER_BATCH)
                try:
                    barrier.submit(host, self._decode_batch(host, reply))
                except SigmaError as exc:
                    raise _RoundAbort(AbortReason.BARRIER, str(exc)) from exc
            routed = self._release(barrier)
        for host in cohort:
            self.bus.notify(host, Frame(MsgType.CONTAINER_BATCH, session_id,
                                        t, encode_container_batch(routed[host])))

    def _aggregation_phase(self, cohort: tuple[str, ...], t: int,
                           session_id: bytes) -> list[MaskedUpdate]:
        self.bus.set_context("aggregation", t)
        updates = []
        for host in cohort:
            frame = Frame(MsgType.MPC_INPUT_REQUEST, session_id, t, b"")
            reply = self._request(host, frame, MsgType.MPC_INPUT_RESPONSE)
            try:
                vector, masked_count = decode_mpc_input_response(reply.payload)
            except WireError as exc:
                raise _RoundAbort(AbortReason.MALFORMED,
                                  f"bad masked update from {host}: "
                                  f"{exc}") from exc
            if vector.shape[0] != self.model.shape[0]:
                raise _RoundAbort(
                    AbortReason.MALFORMED,
                    f"{host} sent a {vector.shape[0]}-dimensional update "
                    f"for a {self.model.shape[0]}-dimensional model")
            updates.append(MaskedUpdate(vector=vector,
                                        masked_count=masked_count,
                                        round=t, sender=host))
        return updates

    def _broadcast_model(self, t: int, session_id: bytes) -> None:
        payload = encode_global_model(self.model)
        for host in self.subscribers:
            self.bus.notify(host, Frame(MsgType.GLOBAL_MODEL_UPDATE,
                                        session_id, t, payload))

    def _broadcast_abort(self, cohort: tuple[str, ...], t: int,
                         session_id: bytes, reason: AbortReason) -> None:
        payload = encode_abort(reason)
        for host in cohort:
            try:
                self.bus.notify(host, Frame(MsgType.ABORT, session_id, t,
                                            payload))
            except BusError:
                continue


def _derive_bytes(seed: int, label: str) -> bytes:
    material = struct.pack(">q", seed) + b":" + label.encode("ascii")
    return hashlib.sha256(material).digest()


def _derive_int(seed: int, label: str) -> int:
    return int.from_bytes(_derive_bytes(seed, label)[:8], "big")


class Simulation:
    """Builds the whole fleet from a RunConfig and drives it round by round.

    Every random choice is derived from the single master seed, so two
    runs with the same config produce byte-identical transcripts,
    ledgers, and trajectories.
    """

    def __init__(self, config: RunConfig) -> None:
        config.validate()
        self.config = config
        seed = config.seed
        self.ledger = CostLedger()
        self.pki = OperatorPki(root_seed=_derive_bytes(seed, "pki-root"))
        self.task, datasets = generate_task(
            _derive_int(seed, "task"), config.model_dim, config.clients,
            law=config.partition_law,
            samples_per_client=config.samples_per_client,
            noise_std=config.noise_std)
        trainer = LocalTrainer(learning_rate=config.learning_rate,
                               epochs=config.epochs,
                               batch_size=config.batch_size)
        modulus = config.modulus_config()
        self.bus = make_bus(config.transport, self.ledger, COORDINATOR_HOST)
        self.nrf = Nrf()
        self.actors: dict[str, NfActor] = {}
        initial_model = np.zeros(config.model_dim, dtype=np.float32)
        self.coordinator = Coordinator(
            self.bus, self.nrf, config, modulus,
            selection_rng=random.Random(_derive_int(seed, "selection")),
            session_rng=random.Random(_derive_int(seed, "session")),
            initial_model=initial_model)
        for i in range(config.clients):
            host = make_hostname(i)
            identity = self.pki.issue(
                host, key_seed=_derive_bytes(seed, f"sign-{i}"))
            profile = NfProfile(
                hostname=host,
                has_gpu=(i % 2 == 0),
                traffic_load=(i * 17) % 101,
                supported_models=("linear",))
            actor = NfActor(
                identity, self.pki, profile, datasets[i], trainer, modulus,
                rng=random.Random(_derive_int(seed, f"ephemeral-{i}")))
            self.nrf.register(profile)
            self.bus.register(host, actor.handle)
            self.coordinator.subscribe(host)
            actor.receive_model(initial_model)
            self.actors[host] = actor
        self.records: list[RoundRecord] = []
        self._injection: Optional[str] = None

    def inject(self, kind: str) -> None:
        if kind == "tamper-sig":
            fired = []

            def tamper(direction, dst, frame):
                if (not fired and direction == "downlink"
                        and frame.msg_type == MsgType.CONTAINER_BATCH
                        and len(frame.payload) > 4):
                    fired.append(dst)
                    mutated = (frame.payload[:-1]
                               + bytes([frame.payload[-1] ^ 0x01]))
                    return Frame(frame.msg_type, frame.session_id,
                                 frame.round_no, mutated)
                return frame

            self.bus.set_intercept(tamper)
        elif kind == "withhold":
            fired = []

            def drop(direction, dst, frame):
                if (not fired and direction == "uplink"
                        and frame.msg_type == MsgType.MPC_INPUT_RESPONSE):
                    fired.append(dst)
                    return None
                return frame

            self.bus.set_intercept(drop)
        elif kind == "reuse-t":
            self._injection = "reuse-t"
        else:
            raise OrchestratorError(f"unknown injection {kind!r}")

    def run(self, rounds: Optional[int] = None) -> list[RoundRecord]:
        total = self.config.rounds if rounds is None else rounds
        try:
            for r in range(total):
                force = None
                if self._injection == "reuse-t" and r == 1 and self.records:
                    force = self.records[-1].round_no
                self.records.append(self.coordinator.run_round(force))
        finally:
            self.bus.close()
        return self.records

    def write_outputs(self, out_dir: str) -> None:
        import os

        os.makedirs(out_dir, exist_ok=True)
        self.bus.write_transcript(os.path.join(out_dir, "transcript.log"))
        self.ledger.write_csv(os.path.join(out_dir, "ledger.csv"))
        true = self.task.true_weights
        with open(os.path.join(out_dir, "trajectory.csv"), "w",
                  encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["round", "aborted", "mse"])
            for record in self.records:
                mse = float(np.mean(
                    (record.model.astype(np.float64) - true) ** 2))
                writer.writerow([record.round_no, int(record.aborted),
                                 repr(mse)])
