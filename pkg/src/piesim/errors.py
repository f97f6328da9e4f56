"""Exception types shared across the simulator.

Every error exposes a stable ``kind`` string (its class name) so scenario
files and trace records can name failures symbolically.
"""


class SimError(Exception):
    """Base class for all simulator errors."""

    @property
    def kind(self) -> str:
        return type(self).__name__


class ParseError(SimError):
    """A structured document (device tree, scenario, report) is malformed."""


class OverlapError(SimError):
    """Two memory ranges intersect where disjointness is required."""


class OutOfSpan(SimError):
    """Raw memory access outside the platform's physical span."""


class NoFreeEntry(SimError):
    """The PMP table has no slot left for another policy range."""


class NotMachineMode(SimError):
    """A PMP mutation was attempted below Machine privilege."""


class UnknownEnclave(SimError):
    """No live enclave carries the given identifier."""


class BadState(SimError):
    """A lifecycle transition or context switch from an incompatible state."""


class ThirdParty(SimError):
    """A connect targeted a range already shared between two parties."""


class MustSyncDisconnectFirst(SimError):
    """The party must observe a synchronous disconnect before a new connect."""


class BadRegionState(SimError):
    """A disconnect was issued against a region in an incompatible status."""


class AccessFault(SimError):
    """A checked memory access was denied by the range-policy engine."""


class SignatureInvalid(SimError):
    """A signed statement failed verification."""


class NotConnected(SimError):
    pass


class NoSession(SimError):
    pass


class NotDmaCapable(SimError):
    pass


class DmaNotVerified(SimError):
    """A DMA-backed connect was attempted without a prior verified range."""


class MmioRangeMismatch(SimError):
    """An MMIO connect range does not match the peripheral's device-tree node."""


class NotAttested(SimError):
    """The controller refuses service before a successful local attestation."""


class DisconnectedError(SimError):
    """The peer vanished mid-conversation; the caller saw the disconnect."""


class RingFull(SimError):
    """A request/reply ring buffer has no room for the record."""


class ScenarioInvalid(SimError):
    """A scenario file failed validation before execution."""
