"""Entity identifiers shared by the monitor, attestation, and peripherals."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum


class EntityKind(Enum):
    OS = 0
    ENCLAVE = 1
    PERIPHERAL = 2


@dataclass(frozen=True)
class EntityId:
    """Identity of a participant: the OS, an enclave, or a peripheral.

    Enclave numbers are unique among live enclaves; whether numbers of dead
    enclaves may be reassigned is an identifier-policy decision made by the
    security monitor.
    """

    kind: EntityKind
    num: int

    @staticmethod
    def enclave(num: int) -> "EntityId":
        return EntityId(EntityKind.ENCLAVE, num)

    @staticmethod
    def peripheral(num: int) -> "EntityId":
        return EntityId(EntityKind.PERIPHERAL, num)

    def sort_key(self) -> tuple[int, int]:
        return (self.kind.value, self.num)

    def encode(self) -> bytes:
        """Canonical 9-byte wire form: kind tag byte + big-endian number."""
        return bytes([self.kind.value]) + self.num.to_bytes(8, "big")

    @staticmethod
    def decode(data: bytes) -> "EntityId":
        if len(data) != 9:
            raise ValueError("entity id wire form is exactly 9 bytes")
        return EntityId(EntityKind(data[0]), int.from_bytes(data[1:], "big"))

    def __str__(self) -> str:
        if self.kind is EntityKind.OS:
            return "os"
        return f"{self.kind.name.lower()}:{self.num}"


OS = EntityId(EntityKind.OS, 0)
