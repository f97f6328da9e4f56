"""Range-policy engine: the sole isolation primitive of the platform.

An ordered table of (range, permissions) entries decides every access from
Supervisor or User privilege. The lowest-index entry whose range intersects
the access decides it; the access must then be fully contained in that
entry's range and carry the requested permission, otherwise it is denied.
Accesses matching no entry are denied (the OS is reachable only through an
explicit background entry installed by the monitor). Machine privilege
bypasses the table entirely, and only Machine context may mutate it.

Matching is on arbitrary base+size ranges; address-register encodings and
lock bits of real hardware are not modeled.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .errors import NoFreeEntry, NotMachineMode
from .platform import MemRange


class Privilege(Enum):
    MACHINE = "machine"
    SUPERVISOR = "supervisor"
    USER = "user"


class AccessKind(Enum):
    READ = "read"
    WRITE = "write"
    EXECUTE = "execute"


@dataclass(frozen=True)
class Perms:
    """Read/write/execute grant bits; all eight combinations are legal."""

    read: bool
    write: bool
    execute: bool

    def allows(self, kind: AccessKind) -> bool:
        if kind is AccessKind.READ:
            return self.read
        if kind is AccessKind.WRITE:
            return self.write
        return self.execute

    def describe(self) -> str:
        return ("r" if self.read else "-") + ("w" if self.write else "-") + (
            "x" if self.execute else "-")


PERMS_NONE = Perms(False, False, False)
PERMS_R = Perms(True, False, False)
PERMS_RW = Perms(True, True, False)
PERMS_RWX = Perms(True, True, True)


@dataclass
class PmpEntry:
    """One table slot: a range, its grants, and an opaque owner tag."""

    index: int
    range: MemRange
    perms: Perms
    tag: str


@dataclass(frozen=True)
class AccessDecision:
    """Allow, or Deny with the index of the deciding entry (if any matched)."""

    allowed: bool
    matched_index: int | None

    def __bool__(self) -> bool:
        return self.allowed


ALLOW = AccessDecision(True, None)


@dataclass(frozen=True)
class AuditRecord:
    op: str
    indices: tuple[int, ...]
    privilege: Privilege


class PmpConfig:
    """The entry table. Mutations are gated on Machine privilege and logged."""

    def __init__(self, max_entries: int = 16):
        if max_entries not in (8, 16):
            raise ValueError("entry count is 8 or 16")
        self.max_entries = max_entries
        self.entries: dict[int, PmpEntry] = {}
        self.audit_log: list[AuditRecord] = []

    def _gate(self, privilege: Privilege) -> None:
        if privilege is not Privilege.MACHINE:
            raise NotMachineMode("entry tables are Machine-mode state")

    def install_entry(self, entry: PmpEntry, *,
                      privilege: Privilege = Privilege.MACHINE) -> None:
        """Install or intentionally overwrite the slot at ``entry.index``.

        Raises :class:`NoFreeEntry` when the index falls outside the table,
        or when the table is full and the slot belongs to a different owner
        (no silent eviction at capacity).
        """
        self._gate(privilege)
        if not 0 <= entry.index < self.max_entries:
            raise NoFreeEntry(
                f"index {entry.index} exceeds the {self.max_entries}-entry table"
            )
        existing = self.entries.get(entry.index)
        if (existing is not None and existing.tag != entry.tag
                and len(self.entries) == self.max_entries):
            raise NoFreeEntry(
                f"table full; slot {entry.index} is held by {existing.tag!r}"
            )
        self.entries[entry.index] = entry
        self.audit_log.append(AuditRecord("install", (entry.index,), privilege))

    def clear_entry(self, index: int, *,
                    privilege: Privilege = Privilege.MACHINE) -> None:
        """Remove the slot; clearing an empty slot is a no-op success."""
        self._gate(privilege)
        self.entries.pop(index, None)
        self.audit_log.append(AuditRecord("clear", (index,), privilege))

    def apply_view(self, perms_by_index: dict[int, Perms], *,
                   privilege: Privilege = Privilege.MACHINE) -> None:
        """Bulk permission update used on context switches.

        Only permissions change; ranges and tags stay, so the entry budget is
        unaffected. Every referenced slot must be populated.
        """
        self._gate(privilege)
        for index, perms in perms_by_index.items():
            entry = self.entries[index]
            self.entries[index] = PmpEntry(index, entry.range, perms, entry.tag)
        self.audit_log.append(
            AuditRecord("apply_view", tuple(sorted(perms_by_index)), privilege))

    def free_entry_count(self) -> int:
        return self.max_entries - len(self.entries)

    def free_index(self) -> int | None:
        """Lowest unpopulated slot, or None when the table is full."""
        for index in range(self.max_entries):
            if index not in self.entries:
                return index
        return None

    def check_access(self, privilege: Privilege, addr: int, length: int,
                     kind: AccessKind) -> AccessDecision:
        """Decide one access of ``length`` bytes at ``addr``.

        Machine privilege always passes. Otherwise the lowest-index entry
        intersecting [addr, addr+length) decides: full containment plus the
        requested grant, or denial. No intersecting entry means denial.
        """
        if length <= 0:
            raise ValueError("length must be positive")
        if privilege is Privilege.MACHINE:
            return ALLOW
        end = addr + length
        for index in range(self.max_entries):
            entry = self.entries.get(index)
            if entry is None:
                continue
            if entry.range.base < end and addr < entry.range.end:
                contained = entry.range.base <= addr and end <= entry.range.end
                return AccessDecision(contained and entry.perms.allows(kind),
                                      index)
        return AccessDecision(False, None)
