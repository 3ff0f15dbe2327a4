"""Simulated process loader.

Objects are placed at randomized, page-aligned, non-overlapping bases and
relocations are applied as 64-bit little-endian words, either by replaying a
materialized table or by resolving every relocation online.  Writes are
buffered and only committed when the whole load succeeds.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from types import MappingProxyType
from typing import Iterable, Mapping, NamedTuple, Union

from ._hashing import MASK64, SplitMix64
from .errors import (
    AmbiguousAddressError,
    BoundsError,
    ExhaustedError,
    UnresolvedSymbolError,
    UuidMismatchError,
)
from .resolver import LookupCost, Strategy, build_index, compute_load_order
from .sof import PAGE_SIZE, WORD_SIZE, RelocType, SharedObject, format_uuid, hex_i64
from .table import LoadEntry, RelocationTable

BASE_MIN = 1 << 24
BASE_LIMIT = 1 << 46
MAX_REJECTIONS = 10_000


class Placement(NamedTuple):
    name: str
    uuid: int
    base: int
    image_size: int

    @property
    def end(self) -> int:
        return self.base + self.image_size


@dataclass(frozen=True, eq=False)
class AddressSpace:
    seed: int
    placements: Mapping[int, Placement]
    writes: Mapping[int, int]

    @property
    def bases(self) -> dict[int, int]:
        return {uuid: p.base for uuid, p in self.placements.items()}

    def base_of(self, name: str) -> int:
        for p in self.placements.values():
            if p.name == name:
                return p.base
        raise KeyError(name)

    def read_word(self, address: int) -> int | None:
        return self.writes.get(address)

    def _with_writes(self, writes: dict[int, int]) -> "AddressSpace":
        return AddressSpace(self.seed, self.placements, MappingProxyType(writes))

    def __eq__(self, other):
        if not isinstance(other, AddressSpace):
            return NotImplemented
        return (self.seed, dict(self.placements), dict(self.writes)) == \
            (other.seed, dict(other.placements), dict(other.writes))


def assign_bases(load_set: Iterable[LoadEntry | tuple], seed: int) -> AddressSpace:
    """Place each object at a splitmix64-drawn page in [2**24, 2**46).

    A draw that overlaps an earlier placement is rejected and redrawn;
    10**4 rejections in total raise ExhaustedError.
    """
    entries = [LoadEntry(*e) for e in load_set]
    if not entries:
        raise ValueError("load_set must be non-empty")
    rng = SplitMix64(seed)
    starts: list[int] = []
    ends: list[int] = []
    placements: dict[int, Placement] = {}
    rejections = 0
    for entry in entries:
        if entry.uuid in placements:
            raise UuidMismatchError(f"uuid {format_uuid(entry.uuid)} appears twice in the load set")
        slots = (BASE_LIMIT - BASE_MIN - entry.image_size) // PAGE_SIZE + 1
        if slots <= 0:
            raise ExhaustedError(f"{entry.name!r} ({entry.image_size:#x} bytes) cannot fit the address range")
        while True:
            base = BASE_MIN + (rng.next() % slots) * PAGE_SIZE
            end = base + entry.image_size
            i = bisect.bisect_right(starts, base)
            if (i > 0 and ends[i - 1] > base) or (i < len(starts) and starts[i] < end):
                rejections += 1
                if rejections >= MAX_REJECTIONS:
                    raise ExhaustedError(f"no disjoint placement after {rejections} rejected draws")
                continue
            starts.insert(i, base)
            ends.insert(i, end)
            placements[entry.uuid] = Placement(entry.name, entry.uuid, base, entry.image_size)
            break
    return AddressSpace(seed, MappingProxyType(placements), MappingProxyType({}))


def format_trace(req_name: str, offset: int, prov_name: str, st_value: int, addend: int) -> str:
    sign_hex = hex_i64(addend)
    if not sign_hex.startswith("-"):
        sign_hex = "+" + sign_hex
    return f"REQ={req_name}+0x{offset:x} <- PROV={prov_name}+0x{st_value:x}{sign_hex}"


def replay(table: RelocationTable, space: AddressSpace, trace: list[str] | None = None) -> AddressSpace:
    """Apply every table item in order; returns a new space, ``space`` is untouched."""
    placements = space.placements
    for entry in table.load_set:
        p = placements.get(entry.uuid)
        if p is None or p.image_size != entry.image_size:
            raise UuidMismatchError(f"{entry.name!r} ({format_uuid(entry.uuid)}) is not mapped in this address space")
    if len(placements) != len(table.load_set):
        raise UuidMismatchError("address space maps objects outside the table's load set")

    writes = dict(space.writes)
    for item in table.items:
        req = placements.get(item.requires_so_uuid)
        prov = placements.get(item.provides_so_uuid)
        if req is None or prov is None:
            missing = item.requires_so_uuid if req is None else item.provides_so_uuid
            raise UuidMismatchError(f"table references unmapped uuid {format_uuid(missing)}")
        if item.offset % WORD_SIZE or item.offset + WORD_SIZE > req.image_size:
            raise BoundsError(f"write at {item.requires_so_name}+{item.offset:#x} leaves the object")
        if item.type is RelocType.DIRECT:
            word = (prov.base + item.st_value + item.addend) & MASK64
        else:
            word = (req.base + item.addend) & MASK64
        writes[req.base + item.offset] = word
        if trace is not None:
            trace.append(format_trace(item.requires_so_name, item.offset, item.provides_so_name,
                                      item.st_value, item.addend))
    return space._with_writes(writes)


def dynamic_load(objects: Mapping[str, SharedObject], exe: str, space: AddressSpace,
                 strategy: Strategy | str = Strategy.HASHED,
                 cost: LookupCost | None = None,
                 trace: list[str] | None = None) -> AddressSpace:
    """Resolve and apply every relocation online, the way a dynamic linker would."""
    order = compute_load_order(objects, exe)
    placements = space.placements
    for obj, uuid in zip(order.objects, order.uuids):
        p = placements.get(uuid)
        if p is None or p.image_size != obj.image_size:
            raise UuidMismatchError(f"{obj.name!r} ({format_uuid(uuid)}) is not mapped in this address space")
    index = build_index(order, strategy)
    by_name = {placements[u].name: placements[u] for u in order.uuids}

    writes = dict(space.writes)
    lines: list[str] = []
    for obj, uuid in zip(order.objects, order.uuids):
        req = placements[uuid]
        for rel in sorted(obj.relocs, key=lambda r: r.offset):
            if rel.type is RelocType.RELATIVE:
                word = (req.base + rel.addend) & MASK64
                prov_name, st_value = obj.name, 0
            else:
                try:
                    sym, provider = index.lookup(rel.symbol_name, cost)
                except UnresolvedSymbolError:
                    raise UnresolvedSymbolError(rel.symbol_name, obj.name) from None
                word = (by_name[provider.name].base + sym.st_value + rel.addend) & MASK64
                prov_name, st_value = provider.name, sym.st_value
            writes[req.base + rel.offset] = word
            if trace is not None:
                lines.append(format_trace(obj.name, rel.offset, prov_name, st_value, rel.addend))
    if trace is not None:
        trace.extend(lines)
    return space._with_writes(writes)


class AbsInto(NamedTuple):
    object: str
    offset: int


class Raw(NamedTuple):
    value: int


class ImageEntry(NamedTuple):
    object: str
    offset: int
    value: Union[AbsInto, Raw]


NormalizedImage = tuple  # tuple[ImageEntry, ...], sorted by (object, offset)


class _Locator:
    def __init__(self, placements: Iterable[Placement]):
        self.sorted = sorted(placements, key=lambda p: p.base)
        self.starts = [p.base for p in self.sorted]
        self.disjoint = all(a.end <= b.base for a, b in zip(self.sorted, self.sorted[1:]))

    def find(self, address: int) -> Placement | None:
        if self.disjoint:
            i = bisect.bisect_right(self.starts, address) - 1
            if i >= 0 and address < self.sorted[i].end:
                return self.sorted[i]
            return None
        hits = [p for p in self.sorted if p.base <= address < p.end]
        if len(hits) > 1:
            raise AmbiguousAddressError(f"{address:#x} falls inside {len(hits)} objects")
        return hits[0] if hits else None


def normalize(space: AddressSpace) -> NormalizedImage:
    """Rewrite every written word relative to object bases.

    Each slot becomes (object, offset); each value becomes ABS_INTO(object,
    offset) when it points into exactly one loaded extent, else RAW.
    """
    locator = _Locator(space.placements.values())
    entries = []
    if locator.disjoint:
        # inlined bisect over sorted, non-overlapping extents (the common case)
        starts = locator.starts
        ends = [p.end for p in locator.sorted]
        names = [p.name for p in locator.sorted]
        right = bisect.bisect_right
        for address, word in space.writes.items():
            i = right(starts, address) - 1
            if i < 0 or address >= ends[i]:
                raise BoundsError(f"write at {address:#x} lies outside every loaded object")
            j = right(starts, word) - 1
            if j >= 0 and word < ends[j]:
                value = AbsInto(names[j], word - starts[j])
            else:
                value = Raw(word)
            entries.append(ImageEntry(names[i], address - starts[i], value))
    else:
        for address, word in space.writes.items():
            slot = locator.find(address)
            if slot is None:
                raise BoundsError(f"write at {address:#x} lies outside every loaded object")
            target = locator.find(word)
            value = AbsInto(target.name, word - target.base) if target is not None else Raw(word)
            entries.append(ImageEntry(slot.name, address - slot.base, value))
    entries.sort(key=lambda e: (e.object, e.offset))
    return tuple(entries)
