"""Application/controller enclave runtime: driver logic over the framed
peripheral channel, per-application sessions, and reactions to
platform-awareness notifications.

Application enclaves talk to a controller enclave over a shared region laid
out as a pair of byte rings:

    offset 0   req_head   u32 BE   consumer counter (controller writes)
    offset 4   req_tail   u32 BE   producer counter (application writes)
    offset 8   rep_head   u32 BE   consumer counter (application writes)
    offset 12  rep_tail   u32 BE   producer counter (controller writes)
    offset 16  request buffer   (size-16)//2 bytes
    ...        reply buffer     (size-16)//2 bytes

Head/tail are free-running counters mod 2^32; byte position is counter mod
buffer size. Each record is u32 length + u32 request id + payload, written
circularly. The monitor zeroes a region when it is connected, so fresh
rings start empty.

Every ring access goes through the monitor's checked reads and writes in
the proper context, so the isolation engine sees the real traffic.

Request payloads start with a one-byte opcode (driver-specific); replies
start with a one-byte status (0 ok, 1 not attested, 2 no session, 3 error)
followed by the driver's answer. Controllers refuse peripheral work until a
successful local attestation, and on exclusive peripherals every switch of
the serving application is preceded by a reset frame (temporal separation).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum

from .attestation import LocalAttestResult, local_attest_peripheral
from .entities import EntityId, EntityKind
from .errors import (
    DisconnectedError,
    NoSession,
    NotConnected,
    RingFull,
    SimError,
)
from .monitor import (
    NotificationKind,
    RegionStatus,
    SecurityMonitor,
)
from .peripherals import (
    AcceleratorModel,
    Frame,
    FrameType,
    KeyboardModel,
    PeripheralKind,
    SensorModel,
    chunk_message,
)
from .platform import MemRange

HEADER_LEN = 16
_RECORD_HEADER = 8


def _ring_geometry(rng: MemRange) -> tuple[int, int, int]:
    buf = (rng.size - HEADER_LEN) // 2
    if buf < 64:
        raise ValueError("region too small for request/reply rings")
    return buf, rng.base + HEADER_LEN, rng.base + HEADER_LEN + buf


class _Ring:
    """One direction of the channel, accessed in the caller's context."""

    def __init__(self, monitor: SecurityMonitor, rng: MemRange,
                 head_off: int, tail_off: int, buf_base: int, buf_size: int):
        self._mon = monitor
        self._head_addr = rng.base + head_off
        self._tail_addr = rng.base + tail_off
        self._base = buf_base
        self._size = buf_size

    def _u32(self, actor: EntityId, addr: int) -> int:
        return struct.unpack(">I", self._mon.checked_read(actor, addr, 4))[0]

    def _put_u32(self, actor: EntityId, addr: int, value: int) -> None:
        self._mon.checked_write(actor, addr, struct.pack(">I", value & 0xFFFFFFFF))

    def _copy_in(self, actor: EntityId, counter: int, data: bytes) -> None:
        pos = counter % self._size
        first = min(len(data), self._size - pos)
        self._mon.checked_write(actor, self._base + pos, data[:first])
        if first < len(data):
            self._mon.checked_write(actor, self._base, data[first:])

    def _copy_out(self, actor: EntityId, counter: int, n: int) -> bytes:
        pos = counter % self._size
        first = min(n, self._size - pos)
        out = self._mon.checked_read(actor, self._base + pos, first)
        if first < n:
            out += self._mon.checked_read(actor, self._base, n - first)
        return out

    def push(self, actor: EntityId, req_id: int, payload: bytes) -> None:
        head = self._u32(actor, self._head_addr)
        tail = self._u32(actor, self._tail_addr)
        record = struct.pack(">II", len(payload), req_id) + payload
        used = (tail - head) & 0xFFFFFFFF
        if len(record) > self._size - used:
            raise RingFull("no room for the record")
        self._copy_in(actor, tail, record)
        self._put_u32(actor, self._tail_addr, tail + len(record))

    def pop(self, actor: EntityId) -> tuple[int, bytes] | None:
        head = self._u32(actor, self._head_addr)
        tail = self._u32(actor, self._tail_addr)
        if head == tail:
            return None
        length, req_id = struct.unpack(
            ">II", self._copy_out(actor, head, _RECORD_HEADER))
        payload = self._copy_out(actor, head + _RECORD_HEADER, length) \
            if length else b""
        self._put_u32(actor, self._head_addr, head + _RECORD_HEADER + length)
        return req_id, payload


def request_ring(monitor: SecurityMonitor, rng: MemRange) -> _Ring:
    buf, req_base, _ = _ring_geometry(rng)
    return _Ring(monitor, rng, 0, 4, req_base, buf)


def reply_ring(monitor: SecurityMonitor, rng: MemRange) -> _Ring:
    buf, _, rep_base = _ring_geometry(rng)
    return _Ring(monitor, rng, 8, 12, rep_base, buf)


class ReplyStatus(Enum):
    OK = 0
    NOT_ATTESTED = 1
    NO_SESSION = 2
    ERROR = 3


@dataclass(frozen=True)
class AeReply:
    request_id: int
    status: ReplyStatus
    payload: bytes


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------

OP_READ = 0x01
OP_POLL = 0x01
OP_SUBMIT = 0x01
OP_RESULT = 0x02
OP_RESET = 0x03


def _sensor_driver(runtime: "ControllerRuntime", ae: EntityId,
                   payload: bytes) -> bytes:
    if not payload or payload[0] != OP_READ:
        raise ValueError("sensor driver knows only opcode 0x01")
    reading = runtime.model.sensor_read()
    return reading.signed_body() + reading.signature


def _keyboard_driver(runtime: "ControllerRuntime", ae: EntityId,
                     payload: bytes) -> bytes:
    if not payload or payload[0] != OP_POLL:
        raise ValueError("keyboard driver knows only opcode 0x01")
    code = runtime.model.keyboard_poll()
    return b"" if code is None else bytes([code])


def _accelerator_driver(runtime: "ControllerRuntime", ae: EntityId,
                        payload: bytes) -> bytes:
    model: AcceleratorModel = runtime.model
    if not payload:
        raise ValueError("empty accelerator request")
    op, body = payload[0], payload[1:]
    if op == OP_SUBMIT:
        if ae not in model._sessions:
            model.open_session(ae)
        model.submit(ae, body)
        return b""
    if op == OP_RESULT:
        return model.result(ae)
    if op == OP_RESET:
        model.reset_session(ae)
        return b""
    raise ValueError(f"unknown accelerator opcode {op:#x}")


def _echo_driver(runtime: "ControllerRuntime", ae: EntityId,
                 payload: bytes) -> bytes:
    return payload


DRIVER_REGISTRY = {
    "sensor": _sensor_driver,
    "keyboard": _keyboard_driver,
    "accelerator": _accelerator_driver,
    "echo": _echo_driver,
}

_DEFAULT_DRIVER = {
    PeripheralKind.SENSOR: "sensor",
    PeripheralKind.KEYBOARD: "keyboard",
    PeripheralKind.ACCELERATOR: "accelerator",
}

EXCLUSIVE_KINDS = {PeripheralKind.SENSOR, PeripheralKind.KEYBOARD}


# ---------------------------------------------------------------------------
# controller runtime
# ---------------------------------------------------------------------------

@dataclass
class SessionRecord:
    ae: EntityId
    region_id: int
    range: MemRange


@dataclass
class ControllerState:
    peripheral: EntityId
    sessions: dict[int, SessionRecord] = field(default_factory=dict)
    attestation_transcript: LocalAttestResult | None = None
    exclusive: bool = True
    last_served: EntityId | None = None


class _FrameChallengeResponder:
    """Runs the challenge-response exchange over the 32-byte frame channel."""

    def __init__(self, model):
        self._model = model

    def sign_challenge(self, challenge: bytes) -> bytes:
        for frame in chunk_message(FrameType.CHALLENGE, challenge):
            self._model.send_frame(frame)
        collected: list[Frame] = []
        while True:
            frame = self._model.recv_frame()
            if frame is None:
                raise SimError("peripheral did not answer the challenge")
            collected.append(frame)
            if len(frame.payload) < 29:
                break
        from .peripherals import reassemble
        ftype, payload = reassemble(collected)
        if ftype is not FrameType.CHALLENGE_RESPONSE:
            raise SimError(f"unexpected frame type {ftype}")
        return payload


class ControllerRuntime:
    """Deterministic state machine of one controller enclave.

    Stepped cooperatively by the simulation: callers either enter the
    enclave themselves and invoke :meth:`step`, or use :meth:`run_once`
    which wraps the context switch.
    """

    def __init__(self, monitor: SecurityMonitor, ce: EntityId,
                 peripheral: EntityId, *,
                 driver: str | None = None,
                 trusted_manufacturer_keys=(),
                 exclusive: bool | None = None):
        self.monitor = monitor
        self.ce = ce
        self.model = monitor.peripheral_model(peripheral)
        kind = self.model.descriptor.kind
        self.driver = DRIVER_REGISTRY[driver or _DEFAULT_DRIVER[kind]]
        self.trusted_manufacturer_keys = tuple(trusted_manufacturer_keys)
        self.state = ControllerState(
            peripheral=peripheral,
            exclusive=(kind in EXCLUSIVE_KINDS if exclusive is None
                       else exclusive))
        self._attach_attempted = False
        self._last_transport_rid: int | None = None

    # -- attach ----------------------------------------------------------

    def _transport_region(self):
        for region in self.monitor.live_regions():
            if (region.status is RegionStatus.SHARED
                    and self.ce in region.parties
                    and self.state.peripheral in region.parties):
                return region
        return None

    def ce_attach_peripheral(self) -> LocalAttestResult:
        """Handshake, certificate check, challenge-response; fail-closed."""
        if self._transport_region() is None:
            raise NotConnected(
                f"{self.ce} has no live region with {self.state.peripheral}")
        provider = self.monitor.provider
        handshake = self.model.handshake()
        cert = self.model.descriptor.certificate
        if provider.hash(cert.to_bytes()) != handshake.certificate_digest:
            result = LocalAttestResult(False, "CertDigestMismatch", cert,
                                       None, None)
        else:
            result = local_attest_peripheral(
                provider, _FrameChallengeResponder(self.model), cert,
                self.trusted_manufacturer_keys)
        self.state.attestation_transcript = result if result.ok else None
        self.monitor.trace.emit(self.ce, "ce_attach_peripheral",
                                {"peripheral": self.state.peripheral},
                                "ok" if result.ok else f"fail:{result.reason}")
        if not result.ok:
            self.monitor.trace.mark_attack_detected()
        return result

    # -- notifications ----------------------------------------------------

    def ce_on_notification(self, note) -> None:
        if note.kind is NotificationKind.PEER_DESTROYED:
            if note.peer.kind is EntityKind.ENCLAVE:
                self._drop_session(note.peer)
            else:
                # the peripheral itself died; service stops until reattach
                self.state.attestation_transcript = None
        elif note.kind is NotificationKind.SYNC_DISCONNECTED:
            if note.region == self._last_transport_rid:
                self.state.attestation_transcript = None
                self._attach_attempted = False
        elif note.kind in (NotificationKind.PERIPHERAL_REATTACHED,
                           NotificationKind.PERIPHERAL_FIRMWARE_CHANGED):
            self.state.attestation_transcript = None
            self._attach_attempted = False
            for record in list(self.state.sessions.values()):
                self.monitor.notify(record.ae, note.kind, record.region_id,
                                    self.state.peripheral)
            self.state.sessions.clear()
            self.state.last_served = None
        self.monitor.trace.emit(self.ce, "ce_on_notification",
                                {"kind": note.kind.value, "peer": note.peer},
                                "handled")

    def _drop_session(self, ae: EntityId) -> None:
        record = self.state.sessions.pop(ae.num, None)
        if record is None:
            return
        if (self.model.terminate_session_on_peer_death
                and isinstance(self.model, AcceleratorModel)
                and ae in self.model._sessions):
            self.model.reset_session(ae)
        if self.state.last_served == ae:
            self.state.last_served = None

    # -- serving ----------------------------------------------------------

    def _sync_sessions(self) -> None:
        desc = self.monitor.live_descriptor(self.ce)
        live = {}
        for peer, rid in desc.connections:
            if peer.kind is EntityKind.ENCLAVE:
                region = self.monitor.regions[rid]
                if region.status is RegionStatus.SHARED:
                    live[peer.num] = (peer, rid, region.range)
        for num in list(self.state.sessions):
            if num not in live:
                self._drop_session(EntityId.enclave(num))
        for num, (peer, rid, rng) in live.items():
            if num not in self.state.sessions:
                self.state.sessions[num] = SessionRecord(peer, rid, rng)

    def step(self) -> None:
        """One cooperative step; the monitor context must be this enclave.

        Order: react to delivered notifications, adopt or drop sessions to
        mirror the live connection set, attempt local attestation when the
        transport is fresh and no transcript is cached, then serve requests.
        """
        desc = self.monitor.live_descriptor(self.ce)
        if desc is None or self.monitor.current != self.ce:
            raise SimError(f"{self.ce} is not the running context")
        for note in desc.inbox:
            self.ce_on_notification(note)
        desc.inbox.clear()
        self._sync_sessions()
        transport = self._transport_region()
        if transport is not None and transport.region_id != self._last_transport_rid:
            # a fresh channel to the peripheral: the cached result is stale
            self._last_transport_rid = transport.region_id
            self._attach_attempted = False
        if (self.state.attestation_transcript is None
                and not self._attach_attempted
                and transport is not None):
            self._attach_attempted = True
            self.ce_attach_peripheral()
        for num in sorted(self.state.sessions):
            record = self.state.sessions[num]
            self._serve_session(record)

    def run_once(self) -> None:
        self.monitor.enter_enclave(self.ce)
        try:
            self.step()
        finally:
            self.monitor.exit_to_os()

    def _serve_session(self, record: SessionRecord) -> None:
        requests = request_ring(self.monitor, record.range)
        replies = reply_ring(self.monitor, record.range)
        while True:
            item = requests.pop(self.ce)
            if item is None:
                break
            req_id, payload = item
            status, answer = self._handle(record.ae, payload)
            replies.push(self.ce, req_id,
                         bytes([status.value]) + answer)

    def _handle(self, ae: EntityId, payload: bytes
                ) -> tuple[ReplyStatus, bytes]:
        if self.state.attestation_transcript is None:
            return ReplyStatus.NOT_ATTESTED, b""
        if ae.num not in self.state.sessions:
            return ReplyStatus.NO_SESSION, b""
        if self.state.exclusive and self.state.last_served not in (None, ae):
            self.model.send_frame(Frame(FrameType.RESET, 0, b""))
        self.state.last_served = ae
        try:
            return ReplyStatus.OK, self.driver(self, ae, payload)
        except NoSession:
            return ReplyStatus.NO_SESSION, b""
        except (ValueError, SimError):
            return ReplyStatus.ERROR, b""

    def ce_handle_request(self, ae: EntityId, payload: bytes
                          ) -> tuple[ReplyStatus, bytes]:
        """Direct-call form of request handling, bypassing the rings."""
        self._sync_sessions()
        return self._handle(ae, payload)


# ---------------------------------------------------------------------------
# application-enclave side
# ---------------------------------------------------------------------------

def _next_request_id(monitor: SecurityMonitor) -> int:
    counter = getattr(monitor, "_ae_request_counter", 0) + 1
    monitor._ae_request_counter = counter
    return counter


def ae_call(runtime: ControllerRuntime, ae: EntityId, payload: bytes,
            request_id: int | None = None) -> AeReply:
    """Round-trip one request from an application enclave through the
    controller: marshal over the shared rings, step the controller, collect
    the reply.

    Raises :class:`NotConnected` when no channel was ever set up and
    :class:`DisconnectedError` when the channel existed but the application,
    on entry, observes that its peer disconnected.
    """
    monitor = runtime.monitor
    desc = monitor.live_descriptor(ae)
    if desc is None:
        raise NotConnected(f"{ae} is not live")
    region = None
    for peer, rid in desc.connections:
        if peer == runtime.ce:
            candidate = monitor.regions[rid]
            if candidate.status is RegionStatus.SHARED:
                region = candidate
    if region is None:
        monitor.enter_enclave(ae)
        try:
            gone = any(n.kind in (NotificationKind.SYNC_DISCONNECTED,
                                  NotificationKind.PEER_DESTROYED)
                       for n in desc.inbox)
        finally:
            monitor.exit_to_os()
        if gone:
            raise DisconnectedError(f"{runtime.ce} went away")
        raise NotConnected(f"{ae} has no channel to {runtime.ce}")

    req_id = _next_request_id(monitor) if request_id is None else request_id
    monitor.enter_enclave(ae)
    try:
        request_ring(monitor, region.range).push(ae, req_id, payload)
    finally:
        monitor.exit_to_os()

    runtime.run_once()

    monitor.enter_enclave(ae)
    try:
        item = reply_ring(monitor, region.range).pop(ae)
    finally:
        monitor.exit_to_os()
    if item is None:
        raise SimError("controller produced no reply")
    got_id, raw = item
    if got_id != req_id:
        raise SimError("reply does not match the request id")
    return AeReply(got_id, ReplyStatus(raw[0]), raw[1:])
