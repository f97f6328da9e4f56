"""Physical platform substrate: address ranges, sparse memory, device tree.

Everything here is policy-free. Access control lives in the range-policy
engine and the security monitor; this module only provides the byte store
(zero-filled by default, like cleared DRAM) and the trusted, immutable
catalog of the platform's physical address layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

from .errors import OutOfSpan, OverlapError, ParseError

ADDR_SPACE = 1 << 64


@dataclass(frozen=True)
class MemRange:
    """Half-open physical byte range [base, base + size)."""

    base: int
    size: int

    def __post_init__(self) -> None:
        if not 0 <= self.base < ADDR_SPACE:
            raise ValueError(f"base outside the 64-bit space: {self.base:#x}")
        if self.size <= 0:
            raise ValueError("size must be positive")
        if self.base + self.size > ADDR_SPACE:
            raise ValueError("range overflows the 64-bit address space")

    @property
    def end(self) -> int:
        """First address past the range."""
        return self.base + self.size

    def contains_addr(self, addr: int) -> bool:
        return self.base <= addr < self.end

    def contains(self, other: "MemRange") -> bool:
        return self.base <= other.base and other.end <= self.end

    def overlaps(self, other: "MemRange") -> bool:
        return range_overlaps(self, other)

    def describe(self) -> str:
        return f"[{self.base:#x}+{self.size:#x})"


def range_overlaps(a: MemRange, b: MemRange) -> bool:
    """True iff the half-open intervals share at least one byte."""
    return a.base < b.end and b.base < a.end


class NodeKind(Enum):
    CPU = "cpu"
    DRAM = "dram"
    BUS_CONTROLLER = "bus-controller"
    MMIO_PERIPHERAL = "mmio-peripheral"


@dataclass(frozen=True)
class DeviceNode:
    name: str
    kind: NodeKind
    range: MemRange
    model: str


@dataclass(frozen=True)
class DeviceTree:
    """Trusted, ROM-resident catalog of physical memory mappings.

    Immutable after load: the dataclass is frozen and holds a tuple, so any
    mutation attempt is rejected at the interface level.
    """

    nodes: tuple[DeviceNode, ...]

    def node(self, name: str) -> DeviceNode:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def nodes_of_kind(self, kind: NodeKind) -> tuple[DeviceNode, ...]:
        return tuple(n for n in self.nodes if n.kind is kind)

    def span(self) -> MemRange:
        """Smallest range covering every node."""
        lo = min(n.range.base for n in self.nodes)
        hi = max(n.range.end for n in self.nodes)
        return MemRange(lo, hi - lo)


def _parse_base(value) -> int:
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        return int(value, 16)
    raise ParseError(f"node base must be an integer or hex string, got {value!r}")


def load_device_tree(doc) -> DeviceTree:
    """Parse a device-tree document into an immutable :class:`DeviceTree`.

    ``doc`` is either a JSON string or an already-decoded mapping with a
    top-level ``nodes`` list, each entry carrying ``name``, ``kind``,
    ``base`` (hex string or integer), ``size`` (bytes), and ``model``.

    Raises :class:`ParseError` for malformed documents and
    :class:`OverlapError` when two node ranges intersect.
    """
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise ParseError(f"device tree is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("nodes"), list):
        raise ParseError("device tree document needs a top-level 'nodes' list")
    if not doc["nodes"]:
        raise ParseError("device tree has no nodes")

    nodes: list[DeviceNode] = []
    for i, raw in enumerate(doc["nodes"]):
        if not isinstance(raw, dict):
            raise ParseError(f"node {i} is not an object")
        try:
            name = raw["name"]
            kind = NodeKind(raw["kind"])
            rng = MemRange(_parse_base(raw["base"]), int(raw["size"]))
            model = raw.get("model", "")
        except (KeyError, ValueError) as exc:
            raise ParseError(f"node {i} is malformed: {exc}") from exc
        if any(n.name == name for n in nodes):
            raise ParseError(f"duplicate node name {name!r}")
        nodes.append(DeviceNode(name, kind, rng, model))

    for i, a in enumerate(nodes):
        for b in nodes[i + 1:]:
            if range_overlaps(a.range, b.range):
                raise OverlapError(
                    f"nodes {a.name!r} and {b.name!r} share addresses"
                )
    return DeviceTree(tuple(nodes))


_BLOCK = 4096


class PhysicalMemory:
    """Sparse byte store over a fixed physical span.

    Unwritten bytes read back as 0x00. Storage is chunked in 4 KiB blocks so
    zeroing a multi-megabyte range drops whole blocks instead of visiting
    every byte.
    """

    def __init__(self, total_span: MemRange):
        self.total_span = total_span
        self._blocks: dict[int, bytearray] = {}

    def _check(self, addr: int, length: int) -> None:
        if length <= 0:
            raise ValueError("length must be positive")
        if addr < self.total_span.base or addr + length > self.total_span.end:
            raise OutOfSpan(
                f"[{addr:#x}+{length:#x}) outside span {self.total_span.describe()}"
            )

    def read(self, addr: int, length: int) -> bytes:
        self._check(addr, length)
        out = bytearray(length)
        pos = 0
        while pos < length:
            a = addr + pos
            blk, off = divmod(a, _BLOCK)
            take = min(_BLOCK - off, length - pos)
            block = self._blocks.get(blk)
            if block is not None:
                out[pos:pos + take] = block[off:off + take]
            pos += take
        return bytes(out)

    def write(self, addr: int, data: bytes) -> None:
        self._check(addr, len(data))
        pos = 0
        while pos < len(data):
            a = addr + pos
            blk, off = divmod(a, _BLOCK)
            take = min(_BLOCK - off, len(data) - pos)
            block = self._blocks.get(blk)
            if block is None:
                block = self._blocks.setdefault(blk, bytearray(_BLOCK))
            block[off:off + take] = data[pos:pos + take]
            pos += take

    def zero_range(self, rng: MemRange) -> None:
        self._check(rng.base, rng.size)
        first_blk = rng.base // _BLOCK
        last_blk = (rng.end - 1) // _BLOCK
        for blk in range(first_blk, last_blk + 1):
            block_start = blk * _BLOCK
            lo = max(rng.base, block_start) - block_start
            hi = min(rng.end, block_start + _BLOCK) - block_start
            if lo == 0 and hi == _BLOCK:
                self._blocks.pop(blk, None)
            else:
                block = self._blocks.get(blk)
                if block is not None:
                    block[lo:hi] = bytes(hi - lo)

    def stored_block_count(self) -> int:
        return len(self._blocks)
