"""Randomized isolation fuzzer.

Drives long seeded sequences of lifecycle operations, enclave writes, and
OS probes against one simulation, while an independent shadow bookkeeper
tracks which ranges should currently be unreachable from the OS and which
bytes carry enclave-written taint. Two things may never happen:

* an OS access succeeds inside a live private range or a live (shared or
  sole-owned) region, or
* an OS read returns a tainted byte -- one written by an enclave while the
  range was protected and not since zeroized.

The shadow state is derived only from the *requested* operations and the
documented teardown semantics, never from the monitor's internals, so it
cross-checks the engine rather than echoing it.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .crypto import HashProvider
from .entities import OS, EntityId
from .errors import AccessFault, SimError
from .harness import DEFAULT_DEVICE_TREE
from .monitor import EnclaveKind, SecurityMonitor
from .platform import MemRange, load_device_tree

_BLOCK = 4096

_ENCLAVE_SLOTS = 48
_REGION_SLOTS = 96
_ENCLAVE_BASE = 0x8020_0000
_ENCLAVE_SIZE = 0x1_0000
_REGION_BASE = 0x8600_0000
_REGION_SIZE = 0x1000


class _TaintMap:
    """Byte taint, block-chunked so large zeroizations stay cheap."""

    def __init__(self):
        self._blocks: dict[int, set[int]] = {}

    def add(self, addr: int, length: int) -> None:
        for a in range(addr, addr + length):
            self._blocks.setdefault(a // _BLOCK, set()).add(a % _BLOCK)

    def clear_range(self, rng: MemRange) -> None:
        first = rng.base // _BLOCK
        last = (rng.end - 1) // _BLOCK
        for blk in range(first, last + 1):
            start = blk * _BLOCK
            if rng.base <= start and start + _BLOCK <= rng.end:
                self._blocks.pop(blk, None)
            else:
                offsets = self._blocks.get(blk)
                if offsets:
                    lo = max(rng.base, start) - start
                    hi = min(rng.end, start + _BLOCK) - start
                    offsets.difference_update(range(lo, hi))

    def any_in(self, addr: int, length: int) -> bool:
        for a in range(addr, addr + length):
            offsets = self._blocks.get(a // _BLOCK)
            if offsets and (a % _BLOCK) in offsets:
                return True
        return False


@dataclass
class _ShadowRegion:
    rng: MemRange
    parties: set[int]     # enclave nums; empty set == freed
    sole: bool = False


@dataclass
class FuzzReport:
    seed: int
    steps: int
    violations: list[str] = field(default_factory=list)
    action_counts: dict[str, int] = field(default_factory=dict)
    denied_os_probes: int = 0

    @property
    def clean(self) -> bool:
        return not self.violations


def run_isolation_fuzz(seed: int, steps: int = 10_000, *,
                       max_entries: int = 16) -> FuzzReport:
    rng = random.Random(seed)
    monitor = SecurityMonitor(
        load_device_tree(DEFAULT_DEVICE_TREE), HashProvider(seed),
        max_entries=max_entries,
        platform_key_seed=b"fuzz:" + str(seed).encode())
    report = FuzzReport(seed=seed, steps=steps)
    taint = _TaintMap()

    shadow_enclaves: dict[int, MemRange] = {}
    shadow_regions: dict[int, _ShadowRegion] = {}

    def protected_ranges() -> list[MemRange]:
        out = list(shadow_enclaves.values())
        out.extend(s.rng for s in shadow_regions.values() if s.parties)
        return out

    def count(op: str) -> None:
        report.action_counts[op] = report.action_counts.get(op, 0) + 1

    def enclave_slot() -> MemRange:
        i = rng.randrange(_ENCLAVE_SLOTS)
        return MemRange(_ENCLAVE_BASE + i * _ENCLAVE_SIZE, _ENCLAVE_SIZE)

    def region_slot() -> MemRange:
        i = rng.randrange(_REGION_SLOTS)
        return MemRange(_REGION_BASE + i * _REGION_SIZE, _REGION_SIZE)

    def probe_target() -> tuple[int, int]:
        live = protected_ranges()
        length = rng.choice((1, 4, 16, 64))
        if live and rng.random() < 0.6:
            target = rng.choice(live)
            # straddle the edge sometimes to probe partial containment
            offset = rng.randrange(-8, target.size)
            addr = max(monitor.memory.total_span.base, target.base + offset)
        else:
            addr = 0x8000_0000 + rng.randrange(64 * 1024 * 1024)
        return addr, length

    def os_violation(addr: int, length: int, op: str) -> None:
        span = MemRange(addr, length)
        for protected in protected_ranges():
            if span.overlaps(protected):
                report.violations.append(
                    f"step allowed OS {op} [{addr:#x}+{length:#x}) inside "
                    f"{protected.describe()}")
                return

    def do_create() -> None:
        count("create")
        rng_mem = enclave_slot()
        try:
            ident = monitor.create_enclave(b"c", b"", rng_mem,
                                           EnclaveKind.APPLICATION)
        except SimError:
            return
        shadow_enclaves[ident.num] = rng_mem

    def do_destroy() -> None:
        count("destroy")
        if not shadow_enclaves:
            return
        num = rng.choice(sorted(shadow_enclaves))
        monitor.destroy_enclave(EntityId.enclave(num))
        # shadow teardown mirrors the contract: private memory zeroized,
        # shared regions fall to the survivor, sole-owned ones are zeroized
        taint.clear_range(shadow_enclaves.pop(num))
        for shadow in shadow_regions.values():
            if num in shadow.parties:
                shadow.parties.discard(num)
                if shadow.sole or not shadow.parties:
                    taint.clear_range(shadow.rng)
                    shadow.parties.clear()
                    shadow.sole = False
                else:
                    shadow.sole = True

    def do_connect() -> None:
        count("connect")
        if len(shadow_enclaves) < 2:
            return
        a, b = rng.sample(sorted(shadow_enclaves), 2)
        rng_mem = region_slot()
        try:
            rid = monitor.connect_enclaves(EntityId.enclave(a),
                                           EntityId.enclave(b), rng_mem)
        except SimError:
            return
        taint.clear_range(rng_mem)  # the monitor zeroes fresh channels
        shadow_regions[rid] = _ShadowRegion(rng_mem, {a, b})

    def do_sync_disconnect() -> None:
        count("sync_disconnect")
        if not shadow_regions:
            return
        rid = rng.choice(sorted(shadow_regions))
        try:
            monitor.sync_disconnect_enclaves(rid)
        except SimError:
            return
        shadow = shadow_regions[rid]
        taint.clear_range(shadow.rng)
        shadow.parties.clear()
        shadow.sole = False

    def do_enclave_write() -> None:
        count("enclave_write")
        if not shadow_enclaves:
            return
        num = rng.choice(sorted(shadow_enclaves))
        ident = EntityId.enclave(num)
        targets = [shadow_enclaves[num]]
        targets.extend(s.rng for s in shadow_regions.values()
                       if num in s.parties)
        target = rng.choice(targets)
        length = rng.choice((1, 8, 32, 64))
        offset = rng.randrange(max(1, target.size - length))
        data = bytes(rng.randrange(1, 256) for _ in range(length))
        monitor.enter_enclave(ident)
        try:
            monitor.checked_write(ident, target.base + offset, data)
            taint.add(target.base + offset, length)
        except AccessFault:
            pass
        finally:
            monitor.exit_to_os()

    def do_os_read() -> None:
        count("os_read")
        addr, length = probe_target()
        try:
            data = monitor.checked_read(OS, addr, length)
        except SimError:
            report.denied_os_probes += 1
            return
        os_violation(addr, length, "read")
        if taint.any_in(addr, length):
            report.violations.append(
                f"OS read [{addr:#x}+{length:#x}) returned tainted bytes")
        del data

    def do_os_write() -> None:
        count("os_write")
        addr, length = probe_target()
        try:
            monitor.checked_write(OS, addr, bytes(length))
        except SimError:
            report.denied_os_probes += 1
            return
        os_violation(addr, length, "write")

    def do_cross_probe() -> None:
        count("cross_probe")
        if len(shadow_enclaves) < 2:
            return
        reader, victim = rng.sample(sorted(shadow_enclaves), 2)
        ident = EntityId.enclave(reader)
        target = shadow_enclaves[victim]
        monitor.enter_enclave(ident)
        try:
            monitor.checked_read(ident, target.base, 16)
            report.violations.append(
                f"enclave {reader} read private memory of {victim}")
        except AccessFault:
            pass
        finally:
            monitor.exit_to_os()

    def do_schedule() -> None:
        count("schedule")
        if not shadow_enclaves:
            return
        num = rng.choice(sorted(shadow_enclaves))
        monitor.enter_enclave(EntityId.enclave(num))
        monitor.exit_to_os()

    moves = (
        (0.12, do_create),
        (0.08, do_destroy),
        (0.10, do_connect),
        (0.08, do_sync_disconnect),
        (0.20, do_enclave_write),
        (0.22, do_os_read),
        (0.10, do_os_write),
        (0.05, do_cross_probe),
        (0.05, do_schedule),
    )
    weights = [w for w, _ in moves]
    actions = [a for _, a in moves]

    for _ in range(steps):
        rng.choices(actions, weights=weights)[0]()
        monitor.check_invariants()
    return report
