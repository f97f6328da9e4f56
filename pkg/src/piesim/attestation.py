"""Measurements, signed reports, peripheral certificates, and the remote
verifier that cross-checks the platform-wide attestation graph.

All signed bodies use one canonical serialization: fields in a fixed order,
each prefixed with its 4-byte big-endian length. Bit-exactness matters; an
independent implementation of the same layout must interoperate.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from enum import Enum

from .entities import EntityId, EntityKind
from .errors import ParseError, UnknownEnclave

NONCE_LEN = 32
CHALLENGE_LEN = 32


def pack_fields(fields) -> bytes:
    """Length-prefix and concatenate byte fields."""
    out = bytearray()
    for field in fields:
        out += struct.pack(">I", len(field))
        out += field
    return bytes(out)


def unpack_fields(data: bytes) -> list[bytes]:
    fields = []
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise ParseError("truncated length prefix")
        (n,) = struct.unpack_from(">I", data, pos)
        pos += 4
        if pos + n > len(data):
            raise ParseError("field runs past the buffer")
        fields.append(data[pos:pos + n])
        pos += n
    return fields


@dataclass(frozen=True)
class Measurement:
    """32-byte digest over the canonical serialization of (code, config)."""

    digest: bytes

    def hex(self) -> str:
        return self.digest.hex()


def measure(provider, code: bytes, config: bytes) -> Measurement:
    """Digest of length-prefixed code followed by length-prefixed config."""
    return Measurement(provider.hash(pack_fields([code, config])))


# ---------------------------------------------------------------------------
# Peripheral certificates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PeripheralCertificate:
    """Manufacturer-issued statement binding a peripheral key to a firmware."""

    peripheral_public_key: bytes
    firmware_digest: bytes
    firmware_version: str
    manufacturer_signature: bytes

    def signed_body(self) -> bytes:
        return pack_fields([
            self.peripheral_public_key,
            self.firmware_digest,
            self.firmware_version.encode(),
        ])

    def verify(self, provider, manufacturer_public_key: bytes) -> bool:
        return provider.verify(manufacturer_public_key, self.signed_body(),
                               self.manufacturer_signature)

    def to_bytes(self) -> bytes:
        return pack_fields([
            self.peripheral_public_key,
            self.firmware_digest,
            self.firmware_version.encode(),
            self.manufacturer_signature,
        ])

    @staticmethod
    def from_bytes(data: bytes) -> "PeripheralCertificate":
        fields = unpack_fields(data)
        if len(fields) != 4:
            raise ParseError("certificate has exactly four fields")
        return PeripheralCertificate(fields[0], fields[1], fields[2].decode(),
                                     fields[3])


def issue_certificate(provider, manufacturer_keypair, peripheral_public_key,
                      firmware_digest, firmware_version) -> PeripheralCertificate:
    body = pack_fields([peripheral_public_key, firmware_digest,
                        firmware_version.encode()])
    sig = provider.sign(manufacturer_keypair.secret, body)
    return PeripheralCertificate(peripheral_public_key, firmware_digest,
                                 firmware_version, sig)


# ---------------------------------------------------------------------------
# Attestation reports
# ---------------------------------------------------------------------------

class SubjectKind(Enum):
    AE = 1
    CE = 2


@dataclass(frozen=True)
class PeripheralEvidence:
    """Certificate plus a challenge-response transcript for one peripheral."""

    certificate: PeripheralCertificate
    challenge: bytes
    response_signature: bytes

    def to_bytes(self) -> bytes:
        return pack_fields([self.certificate.to_bytes(), self.challenge,
                            self.response_signature])

    @staticmethod
    def from_bytes(data: bytes) -> "PeripheralEvidence":
        fields = unpack_fields(data)
        if len(fields) != 3:
            raise ParseError("evidence item has exactly three fields")
        return PeripheralEvidence(PeripheralCertificate.from_bytes(fields[0]),
                                  fields[1], fields[2])


@dataclass(frozen=True)
class AttestationReport:
    """Signed evidence for one enclave, as produced by the monitor.

    ``connected_ids`` reflects the monitor's connection set of the subject at
    signing time; ``platform_public_key`` names the signing device root key
    inside the signed body so a verifier can tell a foreign platform's valid
    report apart from a tampered one.
    """

    subject_id: EntityId
    subject_kind: SubjectKind
    sm_measurement: Measurement
    subject_measurement: Measurement
    config_digest: bytes
    connected_ids: tuple[EntityId, ...]
    peripheral_evidence: tuple[PeripheralEvidence, ...] | None
    verifier_nonce: bytes
    platform_public_key: bytes
    platform_signature: bytes

    def signed_body(self) -> bytes:
        if self.peripheral_evidence is None:
            evidence = b"\x00"
        else:
            evidence = b"\x01" + pack_fields(
                [e.to_bytes() for e in self.peripheral_evidence])
        return pack_fields([
            self.subject_id.encode(),
            bytes([self.subject_kind.value]),
            self.sm_measurement.digest,
            self.subject_measurement.digest,
            self.config_digest,
            b"".join(e.encode() for e in self.connected_ids),
            evidence,
            self.verifier_nonce,
            self.platform_public_key,
        ])

    def to_bytes(self) -> bytes:
        return pack_fields([self.signed_body(), self.platform_signature])

    @staticmethod
    def from_bytes(data: bytes) -> "AttestationReport":
        outer = unpack_fields(data)
        if len(outer) != 2:
            raise ParseError("report wire form is body + signature")
        body, signature = outer
        fields = unpack_fields(body)
        if len(fields) != 9:
            raise ParseError("report body has exactly nine fields")
        raw_ids = fields[5]
        if len(raw_ids) % 9:
            raise ParseError("connected id list is not a multiple of 9 bytes")
        ids = tuple(EntityId.decode(raw_ids[i:i + 9])
                    for i in range(0, len(raw_ids), 9))
        raw_ev = fields[6]
        if not raw_ev:
            raise ParseError("evidence field needs a presence byte")
        if raw_ev[0] == 0:
            evidence = None
        else:
            evidence = tuple(PeripheralEvidence.from_bytes(blob)
                             for blob in unpack_fields(raw_ev[1:]))
        return AttestationReport(
            subject_id=EntityId.decode(fields[0]),
            subject_kind=SubjectKind(fields[1][0]),
            sm_measurement=Measurement(fields[2]),
            subject_measurement=Measurement(fields[3]),
            config_digest=fields[4],
            connected_ids=ids,
            peripheral_evidence=evidence,
            verifier_nonce=fields[7],
            platform_public_key=fields[8],
            platform_signature=signature,
        )


def attest_enclave(sm, subject: EntityId, nonce: bytes) -> AttestationReport:
    """Produce the signed report for a live enclave from monitor state.

    Controller reports embed the stored certificate plus a fresh
    challenge-response transcript for every connected peripheral.
    """
    desc = sm.live_descriptor(subject)
    if desc is None:
        raise UnknownEnclave(f"{subject} is not live")
    provider = sm.provider
    connected = sm.connected_ids(subject)
    kind = SubjectKind.CE if desc.kind.value == "ce" else SubjectKind.AE

    evidence = None
    if kind is SubjectKind.CE:
        items = []
        for peer in connected:
            if peer.kind is not EntityKind.PERIPHERAL:
                continue
            model = sm.peripheral_model(peer)
            challenge = provider.random(CHALLENGE_LEN)
            response = model.sign_challenge(challenge)
            items.append(PeripheralEvidence(model.descriptor.certificate,
                                            challenge, response))
        evidence = tuple(items)

    unsigned = AttestationReport(
        subject_id=desc.id,
        subject_kind=kind,
        sm_measurement=sm.sm_measurement,
        subject_measurement=desc.measurement,
        config_digest=desc.config_digest,
        connected_ids=connected,
        peripheral_evidence=evidence,
        verifier_nonce=nonce,
        platform_public_key=sm.platform_keys.public,
        platform_signature=b"",
    )
    signature = provider.sign(sm.platform_keys.secret, unsigned.signed_body())
    report = replace(unsigned, platform_signature=signature)
    sm.trace.emit("sm", "attest_enclave",
                  {"subject": subject, "nonce": nonce},
                  "report:" + provider.hash(report.to_bytes()).hex()[:16])
    return report


# ---------------------------------------------------------------------------
# Local attestation (controller enclave <-> peripheral)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LocalAttestResult:
    ok: bool
    reason: str | None            # "CertUntrusted" | "BadResponse" when failed
    certificate: PeripheralCertificate | None
    challenge: bytes | None
    response_signature: bytes | None


def local_attest_peripheral(provider, responder, certificate,
                            trusted_manufacturer_keys) -> LocalAttestResult:
    """Challenge-response proof that ``responder`` holds the certified key.

    ``responder`` is anything with ``sign_challenge(bytes) -> bytes`` -- the
    peripheral model itself, or a frame-transport adapter. The certificate
    chain is checked first, then the response.
    """
    if not any(certificate.verify(provider, mk)
               for mk in trusted_manufacturer_keys):
        return LocalAttestResult(False, "CertUntrusted", certificate, None, None)
    challenge = provider.random(CHALLENGE_LEN)
    response = responder.sign_challenge(challenge)
    if not provider.verify(certificate.peripheral_public_key, challenge,
                           response):
        return LocalAttestResult(False, "BadResponse", certificate, challenge,
                                 response)
    return LocalAttestResult(True, None, certificate, challenge, response)


# ---------------------------------------------------------------------------
# Remote verification
# ---------------------------------------------------------------------------

class RejectReason(Enum):
    BAD_SIGNATURE = "BadSignature"
    MEASUREMENT_MISMATCH = "MeasurementMismatch"
    LINK_MISMATCH = "LinkMismatch"
    PERIPHERAL_CERT_INVALID = "PeripheralCertInvalid"
    FIRMWARE_MISMATCH = "FirmwareMismatch"
    NONCE_MISMATCH = "NonceMismatch"
    PLATFORM_KEY_MISMATCH = "PlatformKeyMismatch"


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: RejectReason | None = None

    @staticmethod
    def accept() -> "Verdict":
        return Verdict(True)

    @staticmethod
    def reject(reason: RejectReason) -> "Verdict":
        return Verdict(False, reason)

    def __bool__(self) -> bool:
        return self.accepted

    def describe(self) -> str:
        return "Accept" if self.accepted else f"Reject({self.reason.value})"


@dataclass(frozen=True)
class VerificationPolicy:
    """What the remote verifier expects of an honest platform."""

    expected_ae_measurement: Measurement
    expected_ce_measurements: tuple[Measurement, ...]
    expected_sm_measurement: Measurement
    platform_public_key: bytes
    trusted_manufacturer_keys: tuple[bytes, ...]
    expected_firmware_versions: tuple[str, ...]


def verify_platform(provider, reports, policy: VerificationPolicy,
                    nonces: dict) -> Verdict:
    """Cross-check a platform-wide attestation graph against a policy.

    Checking order: report signatures and platform-key agreement, nonce
    echoes, measurements, the bidirectional link cross-check between the
    application report and every controller report, and finally peripheral
    evidence (certificate chain, challenge response, firmware version). The
    verdict carries the first failure only.
    """
    ae_reports = [r for r in reports if r.subject_kind is SubjectKind.AE]
    ce_reports = [r for r in reports if r.subject_kind is SubjectKind.CE]
    if len(ae_reports) != 1:
        return Verdict.reject(RejectReason.LINK_MISMATCH)
    ae = ae_reports[0]
    ordered = [ae] + ce_reports

    for report in ordered:
        if not provider.verify(report.platform_public_key,
                               report.signed_body(),
                               report.platform_signature):
            return Verdict.reject(RejectReason.BAD_SIGNATURE)
        if report.platform_public_key != policy.platform_public_key:
            return Verdict.reject(RejectReason.PLATFORM_KEY_MISMATCH)

    for report in ordered:
        if report.verifier_nonce != nonces.get(report.subject_id):
            return Verdict.reject(RejectReason.NONCE_MISMATCH)

    for report in ordered:
        if report.sm_measurement != policy.expected_sm_measurement:
            return Verdict.reject(RejectReason.MEASUREMENT_MISMATCH)
    if ae.subject_measurement != policy.expected_ae_measurement:
        return Verdict.reject(RejectReason.MEASUREMENT_MISMATCH)
    for report in ce_reports:
        if report.subject_measurement not in policy.expected_ce_measurements:
            return Verdict.reject(RejectReason.MEASUREMENT_MISMATCH)

    listed = sorted((i for i in ae.connected_ids
                     if i.kind is EntityKind.ENCLAVE),
                    key=EntityId.sort_key)
    present = sorted((r.subject_id for r in ce_reports), key=EntityId.sort_key)
    if listed != present:
        return Verdict.reject(RejectReason.LINK_MISMATCH)
    for report in ce_reports:
        if ae.subject_id not in report.connected_ids:
            return Verdict.reject(RejectReason.LINK_MISMATCH)

    for report in ce_reports:
        evidence = report.peripheral_evidence or ()
        peripheral_peers = [i for i in report.connected_ids
                            if i.kind is EntityKind.PERIPHERAL]
        if len(evidence) != len(peripheral_peers):
            return Verdict.reject(RejectReason.PERIPHERAL_CERT_INVALID)
        for item in evidence:
            cert = item.certificate
            if not any(cert.verify(provider, mk)
                       for mk in policy.trusted_manufacturer_keys):
                return Verdict.reject(RejectReason.PERIPHERAL_CERT_INVALID)
            if not provider.verify(cert.peripheral_public_key, item.challenge,
                                   item.response_signature):
                return Verdict.reject(RejectReason.PERIPHERAL_CERT_INVALID)
            if cert.firmware_version not in policy.expected_firmware_versions:
                return Verdict.reject(RejectReason.FIRMWARE_MISMATCH)

    return Verdict.accept()
