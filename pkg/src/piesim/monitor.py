"""The security monitor: enclave lifecycle, shared-memory connect and
disconnect, context switching with range-policy reconfiguration, DMA
verification, and platform-awareness notifications.

The monitor is the only Machine-mode actor. It owns the entry budget:

    slot 0                  the monitor's own memory, denied to S/U mode
    slots 1 .. N-2          one per live enclave, one per live shared region
    slot N-1                OS background entry over the whole span, lowest
                            priority so protection slots always win

With one shared region per enclave this reproduces the (N-2)/2 bound: a
16-entry table carries at most 7 enclaves, an 8-entry table at most 3.

Teardown of a shared region is two-phase. When a party dies unexpectedly
the region drops to sole ownership of the survivor (asynchronous
disconnect): contents are preserved and the OS still cannot touch them.
Only the OS-issued synchronous disconnect zeroes and frees the region and
queues a notification for every surviving party; a party that went through
an asynchronous disconnect must see that notification before it can be part
of any new connect.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .attestation import Measurement, measure
from .entities import OS, EntityId, EntityKind
from .errors import (
    AccessFault,
    BadRegionState,
    BadState,
    DmaNotVerified,
    MmioRangeMismatch,
    MustSyncDisconnectFirst,
    NoFreeEntry,
    NotDmaCapable,
    OverlapError,
    SignatureInvalid,
    ThirdParty,
    UnknownEnclave,
)
from .peripherals import (
    AcceleratorModel,
    DmaBinding,
    MmioBinding,
    PeripheralModel,
    reassemble,
)
from .platform import DeviceTree, MemRange, NodeKind, PhysicalMemory
from .pmp import (
    PERMS_NONE,
    PERMS_RW,
    PERMS_RWX,
    AccessKind,
    Perms,
    PmpConfig,
    PmpEntry,
    Privilege,
)
from .trace import TraceLog

import struct

DEFAULT_SM_CODE = b"security-monitor-firmware"
DEFAULT_SM_SIZE = 2 * 1024 * 1024


class EnclaveState(Enum):
    IDLE = "idle"
    RUNNING = "running"
    PAUSED = "paused"
    DESTROYED = "destroyed"


class EnclaveKind(Enum):
    APPLICATION = "ae"
    CONTROLLER = "ce"


class NotificationKind(Enum):
    PEER_DESTROYED = "PeerDestroyed"
    SYNC_DISCONNECTED = "SyncDisconnected"
    PERIPHERAL_REATTACHED = "PeripheralReattached"
    PERIPHERAL_FIRMWARE_CHANGED = "PeripheralFirmwareChanged"


@dataclass(frozen=True)
class Notification:
    kind: NotificationKind
    region: int
    peer: EntityId


@dataclass
class EnclaveDescriptor:
    id: EntityId
    kind: EnclaveKind
    state: EnclaveState
    private_range: MemRange
    measurement: Measurement
    config_digest: bytes
    connections: set[tuple[EntityId, int]] = field(default_factory=set)
    pending_events: list[Notification] = field(default_factory=list)
    inbox: list[Notification] = field(default_factory=list)
    pmp_index: int = -1
    established_secret: bytes | None = None


class RegionStatus(Enum):
    SHARED = "shared"
    SOLE_OWNED = "sole-owned"
    FREED = "freed"


@dataclass
class SharedRegion:
    region_id: int
    range: MemRange
    status: RegionStatus
    parties: tuple[EntityId, ...]
    pmp_index: int | None


class IdentifierPolicy(Enum):
    MONOTONIC = "monotonic"
    REUSE = "reuse"


class DmaVerdict(Enum):
    VERIFIED = "Verified"
    MISMATCH = "Mismatch"


class SecurityMonitor:
    """Single Machine-mode authority over one simulated platform."""

    def __init__(self, device_tree: DeviceTree, provider, *,
                 max_entries: int = 16,
                 sm_range: MemRange | None = None,
                 identifier_policy: IdentifierPolicy = IdentifierPolicy.MONOTONIC,
                 platform_key_seed=b"device-root-key",
                 sm_code: bytes = DEFAULT_SM_CODE,
                 trace: TraceLog | None = None):
        self.device_tree = device_tree
        self.provider = provider
        self.memory = PhysicalMemory(device_tree.span())
        self.pmp = PmpConfig(max_entries)
        self.trace = trace if trace is not None else TraceLog()
        self.identifier_policy = identifier_policy
        self.platform_keys = provider.keygen(platform_key_seed)
        self.sm_measurement = measure(provider, sm_code, b"")
        self.current: EntityId = OS

        if sm_range is None:
            dram = device_tree.nodes_of_kind(NodeKind.DRAM)
            if not dram:
                raise ValueError("device tree has no DRAM node for the monitor")
            node = dram[0].range
            sm_range = MemRange(node.base, min(DEFAULT_SM_SIZE, node.size))
        self.sm_range = sm_range

        self.enclaves: dict[int, EnclaveDescriptor] = {}
        self.destroyed: list[EnclaveDescriptor] = []
        self.regions: dict[int, SharedRegion] = {}
        self.peripherals: dict[int, PeripheralModel] = {}
        self._verified_dma: dict[int, MemRange] = {}
        self._id_counter = 0
        self._region_counter = 0
        self._peripheral_counter = 0

        self.pmp.install_entry(
            PmpEntry(0, self.sm_range, PERMS_NONE, "SM"))
        self.pmp.install_entry(
            PmpEntry(max_entries - 1, self.memory.total_span, PERMS_RWX,
                     "OS-background"))
        self._reconfigure()
        self.trace.emit("sm", "boot",
                        {"max_entries": max_entries,
                         "sm_range": self.sm_range.describe(),
                         "identifier_policy": identifier_policy.value}, "ok")

    # ------------------------------------------------------------------
    # lookups
    # ------------------------------------------------------------------

    def live_descriptor(self, ident) -> EnclaveDescriptor | None:
        num = ident.num if isinstance(ident, EntityId) else ident
        return self.enclaves.get(num)

    def _require_live(self, ident) -> EnclaveDescriptor:
        desc = self.live_descriptor(ident)
        if desc is None:
            raise UnknownEnclave(f"enclave {ident} is not live")
        return desc

    def peripheral_model(self, ident) -> PeripheralModel:
        num = ident.num if isinstance(ident, EntityId) else ident
        try:
            return self.peripherals[num]
        except KeyError:
            raise UnknownEnclave(f"peripheral {ident} is unknown") from None

    def _is_live(self, entity: EntityId) -> bool:
        if entity.kind is EntityKind.ENCLAVE:
            return entity.num in self.enclaves
        if entity.kind is EntityKind.PERIPHERAL:
            model = self.peripherals.get(entity.num)
            return model is not None and model.attached
        return False

    def live_regions(self):
        return [r for r in self.regions.values()
                if r.status is not RegionStatus.FREED]

    def region(self, region_id: int) -> SharedRegion:
        try:
            return self.regions[region_id]
        except KeyError:
            raise BadRegionState(f"region {region_id} does not exist") from None

    def connected_ids(self, subject) -> tuple[EntityId, ...]:
        desc = self._require_live(subject)
        peers = {peer for peer, _ in desc.connections}
        return tuple(sorted(peers, key=EntityId.sort_key))

    # ------------------------------------------------------------------
    # identifier assignment
    # ------------------------------------------------------------------

    def assign_identifier(self) -> int:
        """Next enclave number under the configured policy.

        Monotonic never reuses numbers; reuse hands out the smallest number
        not held by a live enclave (dead identifiers come back, which is
        exactly what the identifier-reuse adversary needs).
        """
        if self.identifier_policy is IdentifierPolicy.MONOTONIC:
            self._id_counter += 1
            return self._id_counter
        num = 1
        while num in self.enclaves:
            num += 1
        return num

    # ------------------------------------------------------------------
    # PMP view maintenance
    # ------------------------------------------------------------------

    def _protection_slot(self) -> int | None:
        for index in range(1, self.pmp.max_entries - 1):
            if index not in self.pmp.entries:
                return index
        return None

    def _view_perms(self) -> dict[int, Perms]:
        """Permission set for the current context.

        Exactly the current entity's private range plus its live shared
        ranges are accessible; everything else is protected. The OS sees
        only the background entry.
        """
        current = self.current
        perms: dict[int, Perms] = {0: PERMS_NONE}
        for desc in self.enclaves.values():
            perms[desc.pmp_index] = (
                PERMS_RWX if desc.id == current else PERMS_NONE)
        for region in self.live_regions():
            if region.pmp_index is not None:
                party = any(p == current for p in region.parties)
                perms[region.pmp_index] = PERMS_RW if party else PERMS_NONE
        perms[self.pmp.max_entries - 1] = (
            PERMS_RWX if current == OS else PERMS_NONE)
        return perms

    def _reconfigure(self) -> None:
        self.pmp.apply_view(self._view_perms())

    # ------------------------------------------------------------------
    # enclave lifecycle
    # ------------------------------------------------------------------

    def _require_os_context(self, what: str) -> None:
        if self.current != OS:
            raise BadState(f"{what} requires OS context, not {self.current}")

    def _check_disjoint(self, rng: MemRange, *, skip_region: int | None = None
                        ) -> None:
        if rng.overlaps(self.sm_range):
            raise OverlapError(f"{rng.describe()} overlaps monitor memory")
        for desc in self.enclaves.values():
            if rng.overlaps(desc.private_range):
                raise OverlapError(
                    f"{rng.describe()} overlaps private memory of {desc.id}")
        for region in self.live_regions():
            if region.region_id != skip_region and rng.overlaps(region.range):
                raise OverlapError(
                    f"{rng.describe()} overlaps shared region {region.region_id}")

    def create_enclave(self, code: bytes, config: bytes,
                       private_range: MemRange,
                       kind: EnclaveKind = EnclaveKind.APPLICATION) -> EntityId:
        """Create an enclave in the idle state behind a fresh policy entry."""
        self._require_os_context("create_enclave")
        if not self.memory.total_span.contains(private_range):
            raise OverlapError(
                f"{private_range.describe()} falls outside physical memory")
        if len(code) + len(config) > private_range.size:
            raise ValueError("image larger than the private range")
        self._check_disjoint(private_range)
        slot = self._protection_slot()
        if slot is None:
            raise NoFreeEntry("no policy slot left for another enclave")

        num = self.assign_identifier()
        ident = EntityId.enclave(num)
        desc = EnclaveDescriptor(
            id=ident, kind=kind, state=EnclaveState.IDLE,
            private_range=private_range,
            measurement=measure(self.provider, code, config),
            config_digest=self.provider.hash(config),
            pmp_index=slot)
        self.memory.write(private_range.base, code + config)
        self.pmp.install_entry(
            PmpEntry(slot, private_range, PERMS_NONE, f"enclave:{num}"))
        self.enclaves[num] = desc
        self._reconfigure()
        self.trace.emit("os", "create_enclave",
                        {"range": private_range.describe(), "kind": kind.value,
                         "measurement": desc.measurement.hex()[:16]},
                        str(ident))
        return ident

    def destroy_enclave(self, ident) -> None:
        """Flush and tear down: private memory zeroed, shared regions drop to
        survivors (asynchronous-disconnect semantics), sole-owned regions are
        zeroed and freed, the identifier is relinquished."""
        self._require_os_context("destroy_enclave")
        desc = self._require_live(ident)
        dead = desc.id

        for region in list(self.live_regions()):
            if dead not in region.parties:
                continue
            if region.status is RegionStatus.SHARED:
                self._async_disconnect(region, dead)
            else:  # sole owner dying: nobody left to notify
                self._zero_region(region)

        self.memory.zero_range(desc.private_range)
        self.trace.emit("sm", "zero_fill",
                        {"range": desc.private_range.describe()}, "ok")
        self.pmp.clear_entry(desc.pmp_index)
        desc.state = EnclaveState.DESTROYED
        desc.connections.clear()
        del self.enclaves[dead.num]
        self.destroyed.append(desc)
        self._reconfigure()
        self.trace.emit("os", "destroy_enclave", {"enclave": dead}, "ok")

    def enter_enclave(self, ident) -> None:
        """Switch the hart into the enclave; queued notifications land in its
        visible inbox exactly once, in FIFO order."""
        self._require_os_context("enter_enclave")
        desc = self._require_live(ident)
        if desc.state not in (EnclaveState.IDLE, EnclaveState.PAUSED):
            raise BadState(f"cannot enter {desc.id} in state {desc.state.value}")
        desc.state = EnclaveState.RUNNING
        self.current = desc.id
        if desc.pending_events:
            desc.inbox.extend(desc.pending_events)
            desc.pending_events.clear()
        self._reconfigure()
        self.trace.emit("sm", "enter_enclave", {"enclave": desc.id},
                        f"delivered:{len(desc.inbox)}")

    def exit_to_os(self) -> None:
        if self.current.kind is not EntityKind.ENCLAVE:
            raise BadState("no enclave is running")
        desc = self._require_live(self.current)
        desc.state = EnclaveState.IDLE
        self.current = OS
        self._reconfigure()
        self.trace.emit("sm", "exit_to_os", {"enclave": desc.id}, "ok")

    def pause(self, ident) -> None:
        desc = self._require_live(ident)
        if desc.state is not EnclaveState.RUNNING or self.current != desc.id:
            raise BadState(f"cannot pause {desc.id} in state {desc.state.value}")
        desc.state = EnclaveState.PAUSED
        self.current = OS
        self._reconfigure()
        self.trace.emit("sm", "pause", {"enclave": desc.id}, "ok")

    def resume(self, ident) -> None:
        desc = self._require_live(ident)
        if desc.state is not EnclaveState.PAUSED:
            raise BadState(f"cannot resume {desc.id} in state {desc.state.value}")
        self.enter_enclave(ident)

    # ------------------------------------------------------------------
    # shared memory
    # ------------------------------------------------------------------

    def _pending_sync_disconnect(self, entity: EntityId) -> bool:
        if entity.kind is EntityKind.ENCLAVE:
            desc = self.enclaves.get(entity.num)
            if desc and any(n.kind is NotificationKind.SYNC_DISCONNECTED
                            for n in desc.pending_events):
                return True
        return any(region.status is RegionStatus.SOLE_OWNED
                   and entity in region.parties
                   for region in self.regions.values())

    def _validate_peripheral_binding(self, entity: EntityId, rng: MemRange
                                     ) -> None:
        model = self.peripheral_model(entity)
        binding = model.descriptor.binding
        if isinstance(binding, MmioBinding):
            if rng != binding.range:
                raise MmioRangeMismatch(
                    f"{rng.describe()} is not the device-tree window "
                    f"{binding.range.describe()}")
        elif isinstance(binding, DmaBinding):
            if self._verified_dma.get(entity.num) != rng:
                raise DmaNotVerified(
                    f"no verified DMA configuration for {entity} at "
                    f"{rng.describe()}")

    def connect_enclaves(self, a: EntityId, b: EntityId,
                         rng: MemRange) -> int:
        """Bind two live entities over a fresh one-to-one shared region."""
        self._require_os_context("connect_enclaves")
        if a == b:
            raise ValueError("cannot connect an entity to itself")
        if a.kind is EntityKind.PERIPHERAL and b.kind is EntityKind.PERIPHERAL:
            raise ValueError("at least one party must be an enclave")
        for party in (a, b):
            if not self._is_live(party):
                raise UnknownEnclave(f"{party} is not live")
        for region in self.live_regions():
            if region.range == rng:
                raise ThirdParty(
                    f"{rng.describe()} is already shared (region "
                    f"{region.region_id})")
        self._check_disjoint(rng)
        if not self.memory.total_span.contains(rng):
            raise OverlapError(f"{rng.describe()} falls outside physical memory")
        for party in (a, b):
            if self._pending_sync_disconnect(party):
                raise MustSyncDisconnectFirst(
                    f"{party} must receive a synchronous disconnect first")
        for party in (a, b):
            if party.kind is EntityKind.PERIPHERAL:
                self._validate_peripheral_binding(party, rng)
        slot = self._protection_slot()
        if slot is None:
            raise NoFreeEntry("no policy slot left for another shared region")

        self._region_counter += 1
        rid = self._region_counter
        self.regions[rid] = SharedRegion(rid, rng, RegionStatus.SHARED,
                                         (a, b), slot)
        self.pmp.install_entry(PmpEntry(slot, rng, PERMS_NONE, f"region:{rid}"))
        # fresh channels start clean: the OS cannot pre-stage bytes in them
        self.memory.zero_range(rng)
        self.trace.emit("sm", "zero_fill", {"range": rng.describe()}, "ok")
        for party, other in ((a, b), (b, a)):
            if party.kind is EntityKind.ENCLAVE:
                self.enclaves[party.num].connections.add((other, rid))
            else:
                model = self.peripherals[party.num]
                model.bound_region = rid
                if other.kind is EntityKind.ENCLAVE:
                    model.last_enclave_peer = other
        self._reconfigure()
        self.trace.emit("os", "connect_enclaves",
                        {"a": a, "b": b, "range": rng.describe()}, f"region:{rid}")
        return rid

    def _drop_connection(self, entity: EntityId, region_id: int) -> None:
        if entity.kind is EntityKind.ENCLAVE:
            desc = self.enclaves.get(entity.num)
            if desc:
                desc.connections = {(p, r) for p, r in desc.connections
                                    if r != region_id}
        elif entity.kind is EntityKind.PERIPHERAL:
            model = self.peripherals.get(entity.num)
            if model and model.bound_region == region_id:
                model.bound_region = None

    def _queue_notification(self, target: EntityId, note: Notification) -> None:
        if target.kind is EntityKind.ENCLAVE:
            desc = self.enclaves.get(target.num)
            if desc:
                desc.pending_events.append(note)
                self.trace.emit("sm", "notify_queued",
                                {"target": target, "kind": note.kind.value,
                                 "region": note.region, "peer": note.peer},
                                "ok")

    def notify(self, target: EntityId, kind: NotificationKind, region: int,
               peer: EntityId) -> None:
        """Queue a platform-awareness notification on behalf of the monitor."""
        self._queue_notification(target, Notification(kind, region, peer))

    def _async_disconnect(self, region: SharedRegion, dead: EntityId) -> None:
        survivor = region.parties[0] if region.parties[1] == dead \
            else region.parties[1]
        region.status = RegionStatus.SOLE_OWNED
        region.parties = (survivor,)
        self._drop_connection(dead, region.region_id)
        self._drop_connection(survivor, region.region_id)
        self._queue_notification(
            survivor, Notification(NotificationKind.PEER_DESTROYED,
                                   region.region_id, dead))
        self._reconfigure()
        self.trace.emit("sm", "async_disconnect",
                        {"region": region.region_id, "dead": dead,
                         "survivor": survivor}, "sole-owned")

    def async_disconnect_enclaves(self, region_id: int, dead: EntityId) -> None:
        """Unexpected death of one party: the survivor gains sole ownership,
        contents stay intact, and the OS still cannot reach the range."""
        region = self.region(region_id)
        if region.status is not RegionStatus.SHARED or dead not in region.parties:
            raise BadRegionState(
                f"region {region_id} is {region.status.value}; asynchronous "
                f"disconnect needs a shared region with {dead} as a party")
        self._async_disconnect(region, dead)

    def _zero_region(self, region: SharedRegion) -> None:
        self.memory.zero_range(region.range)
        self.trace.emit("sm", "zero_fill", {"range": region.range.describe()},
                        "ok")
        if region.pmp_index is not None:
            self.pmp.clear_entry(region.pmp_index)
            region.pmp_index = None
        region.status = RegionStatus.FREED
        region.parties = ()

    def sync_disconnect_enclaves(self, region_id: int) -> None:
        """OS-issued release: zero the region, free its entry, notify every
        surviving party."""
        self._require_os_context("sync_disconnect_enclaves")
        region = self.region(region_id)
        if region.status is RegionStatus.FREED:
            raise BadRegionState(f"region {region_id} is already freed")
        survivors = region.parties
        self.memory.zero_range(region.range)
        self.trace.emit("sm", "zero_fill", {"range": region.range.describe()},
                        "ok")
        if region.pmp_index is not None:
            self.pmp.clear_entry(region.pmp_index)
            region.pmp_index = None
        region.status = RegionStatus.FREED
        region.parties = ()
        for party in survivors:
            other = next((p for p in survivors if p != party), OS)
            self._drop_connection(party, region_id)
            if party.kind is EntityKind.ENCLAVE:
                self._queue_notification(
                    party, Notification(NotificationKind.SYNC_DISCONNECTED,
                                        region_id, other))
            elif party.kind is EntityKind.PERIPHERAL:
                # zeroing the window is what the device observes; it resets
                self.peripherals[party.num].reset()
        self._reconfigure()
        self.trace.emit("os", "sync_disconnect", {"region": region_id}, "freed")

    # ------------------------------------------------------------------
    # checked memory access
    # ------------------------------------------------------------------

    def _privilege_of(self, actor: EntityId) -> Privilege:
        return Privilege.SUPERVISOR if actor == OS else Privilege.USER

    def _checked(self, actor: EntityId, addr: int, length: int,
                 kind: AccessKind):
        if actor != self.current:
            raise BadState(f"{actor} is not scheduled (current: {self.current})")
        return self.pmp.check_access(self._privilege_of(actor), addr, length,
                                     kind)

    def checked_read(self, actor: EntityId, addr: int, length: int) -> bytes:
        decision = self._checked(actor, addr, length, AccessKind.READ)
        self.trace.emit(actor, "read",
                        {"addr": addr, "len": length,
                         "deciding": decision.matched_index},
                        "allow" if decision.allowed else "deny")
        if not decision.allowed:
            raise AccessFault(f"read [{addr:#x}+{length:#x}) denied for {actor}")
        return self.memory.read(addr, length)

    def checked_write(self, actor: EntityId, addr: int, data: bytes) -> None:
        decision = self._checked(actor, addr, len(data), AccessKind.WRITE)
        self.trace.emit(actor, "write",
                        {"addr": addr, "len": len(data),
                         "deciding": decision.matched_index},
                        "allow" if decision.allowed else "deny")
        if not decision.allowed:
            raise AccessFault(
                f"write [{addr:#x}+{len(data):#x}) denied for {actor}")
        self.memory.write(addr, data)

    def sm_read(self, addr: int, length: int) -> bytes:
        """Machine-mode read; bypasses the table by definition."""
        return self.memory.read(addr, length)

    def sm_write(self, addr: int, data: bytes) -> None:
        self.memory.write(addr, data)

    # ------------------------------------------------------------------
    # peripherals
    # ------------------------------------------------------------------

    def attach_peripheral(self, model: PeripheralModel) -> EntityId:
        """Register a device model; MMIO bindings must match the device tree."""
        binding = model.descriptor.binding
        if isinstance(binding, MmioBinding):
            windows = [n.range for n in self.device_tree.nodes
                       if n.kind in (NodeKind.MMIO_PERIPHERAL,
                                     NodeKind.BUS_CONTROLLER)]
            if binding.range not in windows:
                raise MmioRangeMismatch(
                    f"{binding.range.describe()} is not a device-tree window")
        self._peripheral_counter += 1
        ident = EntityId.peripheral(self._peripheral_counter)
        model.descriptor.id = ident
        model.attached = True
        model.trace = self.trace
        self.peripherals[ident.num] = model
        self.trace.emit("os", "attach_peripheral",
                        {"kind": model.descriptor.kind.name.lower(),
                         "firmware": model.descriptor.firmware_version},
                        str(ident))
        return ident

    def negotiate_dma(self, peripheral: EntityId, rng: MemRange) -> None:
        """OS proposes the DMA window; untrusted until verified."""
        model = self.peripheral_model(peripheral)
        if not isinstance(model, AcceleratorModel):
            raise NotDmaCapable(f"{peripheral} has no DMA channel")
        model.negotiate_dma(rng)
        self.trace.emit("os", "negotiate_dma",
                        {"peripheral": peripheral, "range": rng.describe()},
                        "proposed")

    def verify_dma_region(self, peripheral: EntityId, enclave: EntityId,
                          claimed: MemRange) -> DmaVerdict:
        """Ask the device for its signed DMA view and compare with the claim.

        Only an exact match under a valid device signature marks the range
        connectable; a well-signed different range is the manipulation the
        check exists to catch.
        """
        model = self.peripheral_model(peripheral)
        if not isinstance(model.descriptor.binding, DmaBinding):
            raise NotDmaCapable(f"{peripheral} has no DMA channel")
        frames = model.report_dma_config()
        _, payload = reassemble(frames)
        base, size = struct.unpack_from(">QQ", payload)
        signature = payload[16:]
        if not self.provider.verify(
                model.descriptor.certificate.peripheral_public_key,
                payload[:16], signature):
            raise SignatureInvalid("DMA configuration signature is invalid")
        reported = MemRange(base, size)
        if reported == claimed:
            self._verified_dma[peripheral.num] = claimed
            verdict = DmaVerdict.VERIFIED
        else:
            verdict = DmaVerdict.MISMATCH
            self.trace.mark_attack_detected()
        self.trace.emit("sm", "verify_dma_region",
                        {"peripheral": peripheral, "claimed": claimed.describe(),
                         "reported": reported.describe()}, verdict.value)
        return verdict

    def unplug_peripheral(self, peripheral: EntityId) -> None:
        """External detach: shared regions fall to their surviving party."""
        model = self.peripheral_model(peripheral)
        model.attached = False
        self._verified_dma.pop(peripheral.num, None)
        for region in list(self.live_regions()):
            if (region.status is RegionStatus.SHARED
                    and peripheral in region.parties):
                self._async_disconnect(region, peripheral)
        self.trace.emit("env", "unplug", {"peripheral": peripheral}, "ok")

    def replug_peripheral(self, peripheral: EntityId, *,
                          firmware_version: str | None = None,
                          manufacturer_keypair=None,
                          certified: bool = True) -> None:
        """Reattach (optionally with new firmware); the bound controller is
        notified so it can drop its transcript and sessions."""
        model = self.peripheral_model(peripheral)
        was_attached = model.attached
        for region in list(self.live_regions()):
            if (region.status is RegionStatus.SHARED
                    and peripheral in region.parties):
                self._async_disconnect(region, peripheral)
        model.attached = True
        self._verified_dma.pop(peripheral.num, None)
        kind = NotificationKind.PERIPHERAL_REATTACHED
        if firmware_version is not None:
            if manufacturer_keypair is None:
                raise ValueError("new firmware needs a signer keypair")
            from .peripherals import provision_peripheral
            keypair, cert, fw_digest = provision_peripheral(
                self.provider, manufacturer_keypair, model.descriptor.kind,
                firmware_version,
                b"refw:" + firmware_version.encode(), certified)
            model.descriptor.keypair = keypair
            model.descriptor.certificate = cert
            model.descriptor.firmware_digest = fw_digest
            model.descriptor.firmware_version = firmware_version
            kind = NotificationKind.PERIPHERAL_FIRMWARE_CHANGED
        model.reset()
        peer = model.last_enclave_peer
        if peer is not None and self._is_live(peer):
            self._queue_notification(peer, Notification(kind, 0, peripheral))
        self.trace.emit("env", "replug",
                        {"peripheral": peripheral,
                         "firmware": firmware_version or "unchanged",
                         "was_attached": was_attached}, "ok")

    # ------------------------------------------------------------------
    # attestation support
    # ------------------------------------------------------------------

    def store_established_secret(self, ident, secret: bytes) -> None:
        """Bind a verifier-derived secret to the live enclave instance."""
        self._require_live(ident).established_secret = secret

    def established_secret(self, ident) -> bytes | None:
        return self._require_live(ident).established_secret

    # ------------------------------------------------------------------
    # invariants
    # ------------------------------------------------------------------

    def check_invariants(self) -> None:
        """One-to-one sharing, global disjointness, and entry accounting."""
        protected: list[tuple[str, MemRange]] = [("sm", self.sm_range)]
        for desc in self.enclaves.values():
            protected.append((f"enclave:{desc.id.num}", desc.private_range))
        for region in self.live_regions():
            if region.status is RegionStatus.SHARED:
                assert len(set(region.parties)) == 2, \
                    f"region {region.region_id} lacks two distinct parties"
            protected.append((f"region:{region.region_id}", region.range))
        for i, (name_a, a) in enumerate(protected):
            for name_b, b in protected[i + 1:]:
                assert not a.overlaps(b), f"{name_a} overlaps {name_b}"
        for region in self.regions.values():
            if region.status is RegionStatus.FREED:
                assert region.pmp_index is None, \
                    f"freed region {region.region_id} still holds an entry"
        expected_free = self.pmp.max_entries - (
            2 + len(self.enclaves) + len(self.live_regions()))
        assert self.pmp.free_entry_count() == expected_free, \
            "entry accounting drifted"
