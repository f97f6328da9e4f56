"""Desk-scale simulator of a platform isolation environment.

A security monitor enforces range-policy isolation over enclaves and
dynamically connectable shared memory, emulated peripherals attest
themselves over a framed wire protocol, a remote verifier cross-checks the
platform-wide attestation graph, and a scenario harness turns the security
argument into executable adversarial checks.
"""

from .attestation import (
    AttestationReport,
    Measurement,
    PeripheralCertificate,
    RejectReason,
    SubjectKind,
    VerificationPolicy,
    Verdict,
    attest_enclave,
    local_attest_peripheral,
    measure,
    verify_platform,
)
from .crypto import Ed25519Provider, HashProvider, KeyPair
from .entities import OS, EntityId, EntityKind
from .monitor import (
    DmaVerdict,
    EnclaveKind,
    EnclaveState,
    IdentifierPolicy,
    Notification,
    NotificationKind,
    RegionStatus,
    SecurityMonitor,
    SharedRegion,
)
from .peripherals import (
    AcceleratorModel,
    DmaBinding,
    Frame,
    FrameType,
    HandshakeMsg,
    KeyboardModel,
    MmioBinding,
    PeripheralKind,
    SensorModel,
    build_peripheral,
)
from .platform import (
    DeviceTree,
    MemRange,
    NodeKind,
    PhysicalMemory,
    load_device_tree,
    range_overlaps,
)
from .pmp import AccessKind, Perms, PmpConfig, PmpEntry, Privilege
from .trace import TraceLog

__all__ = [name for name in dir() if not name.startswith("_")]
