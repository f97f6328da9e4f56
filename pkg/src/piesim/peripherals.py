"""Emulated peripherals and their framed wire protocol.

Every protocol message is exactly 32 bytes and the attach-time handshake is
exactly 60 bytes. The frame layout is:

    offset 0   type     1 byte   0x01 Data, 0x02 Challenge,
                                 0x03 ChallengeResponse part, 0x04 Reset,
                                 0x05 DmaConfig
    offset 1   seq      1 byte   chunk counter, wraps mod 256
    offset 2   len      1 byte   payload bytes used, <= 29
    offset 3   payload  29 bytes zero-padded

Payloads longer than 29 bytes are chunked across consecutive seq numbers; a
frame with len < 29 terminates the message (an exact multiple of 29 is
followed by an empty terminal frame).

The handshake layout (60 bytes) is:

    offset 0   magic               4 bytes  "PIE1"
    offset 4   protocol_version    2 bytes  big-endian
    offset 6   peripheral_kind     2 bytes  big-endian
    offset 8   peripheral_nonce   16 bytes  fresh per handshake
    offset 24  certificate_digest 32 bytes  hash of the serialized certificate
    offset 56  reserved            4 bytes  zero

Frames travel over the bound shared region in a polling model; per
direction they are strictly FIFO. Post-attestation frames carry no
authenticator: the region itself is isolated to the two parties. Data
frames are echoed back by the firmware as a transport self-test.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from enum import Enum

from .attestation import PeripheralCertificate, issue_certificate
from .crypto import KeyPair
from .entities import EntityId
from .errors import NoSession, NotConnected, NotDmaCapable, SimError
from .platform import MemRange

FRAME_LEN = 32
FRAME_PAYLOAD_MAX = 29
HANDSHAKE_LEN = 60
HANDSHAKE_MAGIC = b"PIE1"
PROTOCOL_VERSION = 1


class FrameType(Enum):
    DATA = 0x01
    CHALLENGE = 0x02
    CHALLENGE_RESPONSE = 0x03
    RESET = 0x04
    DMA_CONFIG = 0x05


@dataclass(frozen=True)
class Frame:
    """One 32-byte protocol message."""

    ftype: FrameType
    seq: int
    payload: bytes

    def __post_init__(self) -> None:
        if not 0 <= self.seq <= 0xFF:
            raise ValueError("seq is a single byte")
        if len(self.payload) > FRAME_PAYLOAD_MAX:
            raise ValueError(f"payload exceeds {FRAME_PAYLOAD_MAX} bytes")

    def encode(self) -> bytes:
        out = bytes([self.ftype.value, self.seq, len(self.payload)])
        return out + self.payload + bytes(FRAME_PAYLOAD_MAX - len(self.payload))

    @staticmethod
    def decode(data: bytes) -> "Frame":
        if len(data) != FRAME_LEN:
            raise ValueError(f"frames are exactly {FRAME_LEN} bytes")
        ftype = FrameType(data[0])
        seq = data[1]
        used = data[2]
        if used > FRAME_PAYLOAD_MAX:
            raise ValueError("len field exceeds payload capacity")
        if any(data[3 + used:]):
            raise ValueError("padding past the used payload must be zero")
        return Frame(ftype, seq, data[3:3 + used])


def chunk_message(ftype: FrameType, payload: bytes,
                  start_seq: int = 0) -> list[Frame]:
    """Split a payload into frames; the terminal frame has len < 29."""
    frames = []
    seq = start_seq
    pos = 0
    while True:
        chunk = payload[pos:pos + FRAME_PAYLOAD_MAX]
        frames.append(Frame(ftype, seq & 0xFF, chunk))
        seq += 1
        pos += FRAME_PAYLOAD_MAX
        if len(chunk) < FRAME_PAYLOAD_MAX:
            break
        if pos >= len(payload):
            frames.append(Frame(ftype, seq & 0xFF, b""))
            break
    return frames


def reassemble(frames) -> tuple[FrameType, bytes]:
    """Inverse of :func:`chunk_message`; validates type and seq continuity."""
    frames = list(frames)
    if not frames:
        raise ValueError("no frames")
    ftype = frames[0].ftype
    expected_seq = frames[0].seq
    payload = bytearray()
    for i, f in enumerate(frames):
        if f.ftype is not ftype:
            raise ValueError("mixed frame types in one message")
        if f.seq != expected_seq:
            raise ValueError("seq discontinuity")
        expected_seq = (expected_seq + 1) & 0xFF
        last = i == len(frames) - 1
        if not last and len(f.payload) != FRAME_PAYLOAD_MAX:
            raise ValueError("only the terminal frame may be short")
        if last and len(f.payload) == FRAME_PAYLOAD_MAX:
            raise ValueError("terminal frame must have len < 29")
        payload += f.payload
    return ftype, bytes(payload)


class PeripheralKind(Enum):
    SENSOR = 1
    KEYBOARD = 2
    ACCELERATOR = 3


@dataclass(frozen=True)
class HandshakeMsg:
    protocol_version: int
    peripheral_kind: PeripheralKind
    peripheral_nonce: bytes
    certificate_digest: bytes

    def encode(self) -> bytes:
        if len(self.peripheral_nonce) != 16:
            raise ValueError("nonce is 16 bytes")
        if len(self.certificate_digest) != 32:
            raise ValueError("certificate digest is 32 bytes")
        return (HANDSHAKE_MAGIC
                + struct.pack(">HH", self.protocol_version,
                              self.peripheral_kind.value)
                + self.peripheral_nonce
                + self.certificate_digest
                + bytes(4))

    @staticmethod
    def decode(data: bytes) -> "HandshakeMsg":
        if len(data) != HANDSHAKE_LEN:
            raise ValueError(f"handshake is exactly {HANDSHAKE_LEN} bytes")
        if data[:4] != HANDSHAKE_MAGIC:
            raise ValueError("bad magic")
        version, kind = struct.unpack_from(">HH", data, 4)
        if any(data[56:]):
            raise ValueError("reserved tail must be zero")
        return HandshakeMsg(version, PeripheralKind(kind), data[8:24],
                            data[24:56])


@dataclass
class MmioBinding:
    """Register window; the range must appear in the trusted device tree."""

    range: MemRange


@dataclass
class DmaBinding:
    """DMA channel; the shared range is negotiated by the (untrusted) OS."""

    negotiated: MemRange | None = None


@dataclass
class PeripheralDescriptor:
    id: EntityId | None
    kind: PeripheralKind
    certificate: PeripheralCertificate
    keypair: KeyPair
    binding: MmioBinding | DmaBinding
    firmware_digest: bytes
    firmware_version: str


def provision_peripheral(provider, manufacturer_keypair, kind: PeripheralKind,
                         firmware_version: str, key_seed,
                         certified: bool = True):
    """Manufacture key material and a firmware certificate for one device.

    ``certified=False`` signs the certificate with a throwaway key unknown to
    any verifier, modeling a forged or unvetted device.
    """
    keypair = provider.keygen(key_seed)
    firmware_image = f"{kind.name.lower()}-firmware-{firmware_version}".encode()
    firmware_digest = provider.hash(firmware_image)
    signer = manufacturer_keypair if certified else provider.keygen(
        b"unknown-signer:" + _seed_suffix(key_seed))
    cert = issue_certificate(provider, signer, keypair.public,
                             firmware_digest, firmware_version)
    return keypair, cert, firmware_digest


def _seed_suffix(seed) -> bytes:
    return seed if isinstance(seed, bytes) else str(seed).encode()


class PeripheralModel:
    """Common firmware behavior: framing, handshake, challenge response.

    Subclasses add the device function. Frames flow through two FIFO queues
    (one per direction) once the monitor binds a shared region or validated
    MMIO window; until then the channel raises :class:`NotConnected`.
    """

    def __init__(self, descriptor: PeripheralDescriptor, provider):
        if descriptor.certificate.firmware_digest != descriptor.firmware_digest:
            raise ValueError("certificate does not match the firmware")
        self.descriptor = descriptor
        self.provider = provider
        self.attached = True
        self.bound_region: int | None = None
        self.last_enclave_peer: EntityId | None = None
        self.trace = None
        self.terminate_session_on_peer_death = False
        self._to_host: deque[Frame] = deque()
        self._rx_buffer: list[Frame] = []

    # -- identity ----------------------------------------------------------

    @property
    def id(self) -> EntityId | None:
        return self.descriptor.id

    def sign_challenge(self, challenge: bytes) -> bytes:
        return self.provider.sign(self.descriptor.keypair.secret, challenge)

    def handshake(self) -> HandshakeMsg:
        if not self.attached:
            raise NotConnected("peripheral is unplugged")
        cert_digest = self.provider.hash(self.descriptor.certificate.to_bytes())
        msg = HandshakeMsg(PROTOCOL_VERSION, self.descriptor.kind,
                           self.provider.random(16), cert_digest)
        self._emit("handshake", {}, "60B")
        return msg

    # -- frame channel -----------------------------------------------------

    def _require_channel(self) -> None:
        if not self.attached or self.bound_region is None:
            raise NotConnected("no live region or MMIO binding")

    def send_frame(self, frame: Frame) -> None:
        """Host-to-device frame; the firmware reacts immediately (polling)."""
        self._require_channel()
        self._emit("frame_send", {"type": frame.ftype.name, "seq": frame.seq,
                                  "len": len(frame.payload)}, "ok")
        self._rx_buffer.append(frame)
        if len(frame.payload) < FRAME_PAYLOAD_MAX:
            message = self._rx_buffer
            self._rx_buffer = []
            try:
                ftype, payload = reassemble(message)
            except ValueError:
                return  # garbled message; firmware drops it
            self._on_message(ftype, payload)

    def recv_frame(self) -> Frame | None:
        """Device-to-host frame, or None on a poll miss."""
        self._require_channel()
        if not self._to_host:
            return None
        frame = self._to_host.popleft()
        self._emit("frame_recv", {"type": frame.ftype.name, "seq": frame.seq},
                   "ok")
        return frame

    def _reply(self, ftype: FrameType, payload: bytes) -> None:
        self._to_host.extend(chunk_message(ftype, payload))

    def _on_message(self, ftype: FrameType, payload: bytes) -> None:
        if ftype is FrameType.RESET:
            self.reset()
        elif ftype is FrameType.CHALLENGE:
            self._reply(FrameType.CHALLENGE_RESPONSE,
                        self.sign_challenge(payload))
        elif ftype is FrameType.DATA:
            self._reply(FrameType.DATA, payload)

    # -- lifecycle ---------------------------------------------------------

    def reset(self) -> None:
        self._to_host.clear()
        self._rx_buffer.clear()
        self._reset_state()
        self._emit("peripheral_reset", {}, "ok")

    def _reset_state(self) -> None:
        pass

    def _emit(self, op: str, args: dict, result) -> None:
        if self.trace is not None:
            self.trace.emit(str(self.id) if self.id else "peripheral", op,
                            args, result)


@dataclass(frozen=True)
class SensorReading:
    value: int
    counter: int
    signature: bytes

    def signed_body(self) -> bytes:
        return struct.pack(">hQ", self.value, self.counter)


class SensorModel(PeripheralModel):
    """Input device signing each sample with a strictly monotonic counter."""

    def __init__(self, descriptor, provider):
        super().__init__(descriptor, provider)
        self._value = 0
        self._counter = 0

    def set_environment(self, value: int) -> None:
        if not -(1 << 15) <= value < (1 << 15):
            raise ValueError("sensor values are signed 16-bit")
        self._value = value

    def sensor_read(self) -> SensorReading:
        self._counter += 1
        body = struct.pack(">hQ", self._value, self._counter)
        sig = self.provider.sign(self.descriptor.keypair.secret, body)
        self._emit("sensor_read", {"counter": self._counter}, self._value)
        return SensorReading(self._value, self._counter, sig)

    def _reset_state(self) -> None:
        self._value = 0


class KeyboardModel(PeripheralModel):
    def __init__(self, descriptor, provider):
        super().__init__(descriptor, provider)
        self._scancodes: deque[int] = deque()

    def inject_key(self, scancode: int) -> None:
        self._scancodes.append(scancode & 0xFF)

    def keyboard_poll(self) -> int | None:
        code = self._scancodes.popleft() if self._scancodes else None
        self._emit("keyboard_poll", {}, code)
        return code

    def _reset_state(self) -> None:
        self._scancodes.clear()


@dataclass
class AcceleratorSession:
    """Isolated per-enclave workload state on the accelerator."""

    owner: EntityId
    accumulator: int = 0
    submitted: int = 0


def _step_checksum(accumulator: int, data: bytes) -> int:
    for b in data:
        accumulator = (accumulator * 31 + b) % (1 << 32)
    return accumulator


class AcceleratorModel(PeripheralModel):
    """DMA device with isolated per-session enclaves and a toy workload.

    The workload is a rolling checksum: acc := (acc * 31 + byte) mod 2^32
    over every submitted byte in order; the result is the 4-byte big-endian
    accumulator. The function is deliberately trivial -- the point is that
    sessions never observe each other.
    """

    def __init__(self, descriptor, provider):
        super().__init__(descriptor, provider)
        self._sessions: dict[EntityId, AcceleratorSession] = {}
        self._lie_range: MemRange | None = None

    def open_session(self, owner: EntityId) -> AcceleratorSession:
        session = AcceleratorSession(owner)
        self._sessions[owner] = session
        self._emit("accel_open_session", {"owner": owner}, "ok")
        return session

    def _session(self, owner: EntityId) -> AcceleratorSession:
        try:
            return self._sessions[owner]
        except KeyError:
            raise NoSession(f"no session for {owner}") from None

    def submit(self, owner: EntityId, data: bytes) -> None:
        session = self._session(owner)
        session.accumulator = _step_checksum(session.accumulator, data)
        session.submitted += len(data)

    def result(self, owner: EntityId) -> bytes:
        return struct.pack(">I", self._session(owner).accumulator)

    def reset_session(self, owner: EntityId | None = None) -> None:
        if owner is None:
            self._sessions.clear()
        else:
            self._session(owner)
            del self._sessions[owner]
        self._emit("accel_reset", {"owner": owner}, "ok")

    def session_count(self) -> int:
        return len(self._sessions)

    def _reset_state(self) -> None:
        self._sessions.clear()

    # -- DMA negotiation ---------------------------------------------------

    def negotiate_dma(self, rng: MemRange) -> None:
        if not isinstance(self.descriptor.binding, DmaBinding):
            raise NotDmaCapable(f"{self.descriptor.kind.name} has no DMA channel")
        self.descriptor.binding.negotiated = rng

    def lie_dma(self, rng: MemRange | None) -> None:
        """Harness hook: report this range instead of the negotiated one."""
        self._lie_range = rng

    def report_dma_config(self) -> list[Frame]:
        if not isinstance(self.descriptor.binding, DmaBinding):
            raise NotDmaCapable(f"{self.descriptor.kind.name} has no DMA channel")
        rng = self._lie_range or self.descriptor.binding.negotiated
        if rng is None:
            raise SimError("no DMA range negotiated yet")
        body = struct.pack(">QQ", rng.base, rng.size)
        sig = self.provider.sign(self.descriptor.keypair.secret, body)
        self._emit("report_dma_config", {"range": rng.describe()}, "signed")
        return chunk_message(FrameType.DMA_CONFIG, body + sig)


def report_dma_config(model: PeripheralModel) -> list[Frame]:
    if not isinstance(model, AcceleratorModel):
        raise NotDmaCapable(f"{model.descriptor.kind.name} has no DMA channel")
    return model.report_dma_config()


_MODEL_CLASSES = {
    PeripheralKind.SENSOR: SensorModel,
    PeripheralKind.KEYBOARD: KeyboardModel,
    PeripheralKind.ACCELERATOR: AcceleratorModel,
}


def build_peripheral(provider, manufacturer_keypair, kind: PeripheralKind,
                     binding, *, firmware_version: str = "1.0",
                     key_seed=b"peripheral", certified: bool = True
                     ) -> PeripheralModel:
    """Provision keys and a certificate, then construct the device model."""
    keypair, cert, fw_digest = provision_peripheral(
        provider, manufacturer_keypair, kind, firmware_version, key_seed,
        certified)
    descriptor = PeripheralDescriptor(
        id=None, kind=kind, certificate=cert, keypair=keypair,
        binding=binding, firmware_digest=fw_digest,
        firmware_version=firmware_version)
    return _MODEL_CLASSES[kind](descriptor, provider)
