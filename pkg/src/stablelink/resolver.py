"""Dynamic-linking semantics: load order, first-match lookup, materialization.

The search scope is breadth-first from the executable over ``needed`` lists,
children in declaration order, each object visited once.  A symbol resolves to
the first object in that order exporting it; later exporters are shadowed.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Iterator, Mapping

from ._hashing import djb2_64, fnv1a64
from .errors import (
    MissingDependencyError,
    NotExecutableError,
    UnknownObjectError,
    UnresolvedSymbolError,
    UuidCollisionError,
)
from .sof import RelocType, SharedObject, SymbolDef, format_uuid
from .table import LoadEntry, RelocationTable, RelocationTableItem


class Strategy(str, Enum):
    LINEAR = "LINEAR"
    HASHED = "HASHED"


@dataclass
class LookupCost:
    """Probe counters accumulated across lookups.

    For LINEAR every export-list comparison counts as a bucket comparison
    (the whole list is one bucket).
    """

    lookups: int = 0
    objects_visited: int = 0
    bucket_comparisons: int = 0
    bloom_rejections: int = 0

    @property
    def probes(self) -> int:
        return self.objects_visited + self.bucket_comparisons


@dataclass(frozen=True)
class LoadOrder:
    objects: tuple[SharedObject, ...]
    uuids: tuple[int, ...]

    def __iter__(self) -> Iterator[SharedObject]:
        return iter(self.objects)

    def __len__(self) -> int:
        return len(self.objects)

    @property
    def executable(self) -> SharedObject:
        return self.objects[0]

    @property
    def names(self) -> list[str]:
        return [o.name for o in self.objects]

    def load_set(self) -> tuple[LoadEntry, ...]:
        return tuple(LoadEntry(o.name, u, o.image_size) for o, u in zip(self.objects, self.uuids))


def compute_load_order(objects: Mapping[str, SharedObject], exe: str) -> LoadOrder:
    root = objects.get(exe)
    if root is None:
        raise UnknownObjectError(f"no object named {exe!r}")
    if not root.is_executable:
        raise NotExecutableError(f"{exe!r} is a {root.kind.value}, not an EXECUTABLE")

    order = [root]
    seen = {exe}
    queue = deque([root])
    while queue:
        obj = queue.popleft()
        for dep in obj.needed:
            if dep in seen:
                continue
            child = objects.get(dep)
            if child is None:
                raise MissingDependencyError(dep, obj.name)
            seen.add(dep)
            order.append(child)
            queue.append(child)

    uuids = tuple(o.uuid for o in order)
    if len(set(uuids)) != len(uuids):
        owners: dict[int, str] = {}
        for o, u in zip(order, uuids):
            if u in owners:
                raise UuidCollisionError(f"{owners[u]!r} and {o.name!r} share uuid {format_uuid(u)}")
            owners[u] = o.name
    return LoadOrder(tuple(order), uuids)


def transitive_closure(objects: Mapping[str, SharedObject], exe: str) -> set[str]:
    """Names reachable from ``exe`` (inclusive); missing names are included too."""
    seen = {exe}
    stack = [exe]
    while stack:
        obj = objects.get(stack.pop())
        if obj is None:
            continue
        for dep in obj.needed:
            if dep not in seen:
                seen.add(dep)
                stack.append(dep)
    return seen


def _next_pow2(n: int) -> int:
    return 1 << max(n - 1, 0).bit_length()


class _HashedObject:
    """Bloom filter plus bucketed hash map over one object's exports.

    Filter size m is the next power of two >= 16 * exports, with k=2 bits per
    name (FNV-1a and mixed djb2); buckets number the next power of two >=
    exports and are chosen from the high half of the FNV-1a hash.
    """

    __slots__ = ("bloom", "bloom_mask", "buckets", "bucket_mask")

    def __init__(self, exports: tuple[SymbolDef, ...]):
        nbits = _next_pow2(16 * len(exports))
        nbuckets = _next_pow2(len(exports))
        self.bloom_mask = nbits - 1
        self.bucket_mask = nbuckets - 1
        bloom = bytearray((nbits + 7) // 8)
        buckets: list[list[SymbolDef]] = [[] for _ in range(nbuckets)]
        for sym in exports:
            raw = sym.name.encode("utf-8")
            h1, h2 = fnv1a64(raw), djb2_64(raw)
            for pos in (h1 & self.bloom_mask, h2 & self.bloom_mask):
                bloom[pos >> 3] |= 1 << (pos & 7)
            buckets[(h1 >> 32) & self.bucket_mask].append(sym)
        self.bloom = bytes(bloom)
        self.buckets = buckets

    def might_contain(self, h1: int, h2: int) -> bool:
        p1 = h1 & self.bloom_mask
        p2 = h2 & self.bloom_mask
        bloom = self.bloom
        return bool(bloom[p1 >> 3] & (1 << (p1 & 7))) and bool(bloom[p2 >> 3] & (1 << (p2 & 7)))


class ResolutionIndex:
    def __init__(self, order: LoadOrder, strategy: Strategy | str = Strategy.HASHED):
        self.order = order
        self.strategy = Strategy(strategy)
        if self.strategy is Strategy.HASHED:
            self._hashed = [_HashedObject(o.exports) for o in order.objects]
        else:
            self._hashed = None
        # per-load memo: a name referenced by many relocations is hashed once
        self._hash_memo: dict[str, tuple[int, int]] = {}

    def lookup(self, name: str, cost: LookupCost | None = None) -> tuple[SymbolDef, SharedObject]:
        if not name:
            raise ValueError("symbol name must be non-empty")
        if self._hashed is None:
            found = self._lookup_linear(name, cost)
        else:
            found = self._lookup_hashed(name, cost)
        if found is None:
            raise UnresolvedSymbolError(name)
        return found

    def _lookup_linear(self, name, cost):
        visited = comparisons = 0
        result = None
        for obj in self.order.objects:
            visited += 1
            for sym in obj.exports:
                comparisons += 1
                if sym.name == name:
                    result = (sym, obj)
                    break
            if result is not None:
                break
        if cost is not None:
            cost.lookups += 1
            cost.objects_visited += visited
            cost.bucket_comparisons += comparisons
        return result

    def _lookup_hashed(self, name, cost):
        hashes = self._hash_memo.get(name)
        if hashes is None:
            raw = name.encode("utf-8")
            hashes = self._hash_memo[name] = (fnv1a64(raw), djb2_64(raw))
        h1, h2 = hashes
        bucket_shift = h1 >> 32
        visited = comparisons = rejections = 0
        result = None
        for obj, table in zip(self.order.objects, self._hashed):
            visited += 1
            if not table.might_contain(h1, h2):
                rejections += 1
                continue
            for sym in table.buckets[bucket_shift & table.bucket_mask]:
                comparisons += 1
                if sym.name == name:
                    result = (sym, obj)
                    break
            if result is not None:
                break
        if cost is not None:
            cost.lookups += 1
            cost.objects_visited += visited
            cost.bucket_comparisons += comparisons
            cost.bloom_rejections += rejections
        return result


def build_index(order: LoadOrder, strategy: Strategy | str = Strategy.HASHED) -> ResolutionIndex:
    return ResolutionIndex(order, strategy)


def lookup_symbol(order: LoadOrder, index: ResolutionIndex, name: str,
                  cost: LookupCost | None = None) -> tuple[SymbolDef, SharedObject]:
    if index.order is not order:
        raise ValueError("index was built for a different load order")
    return index.lookup(name, cost)


def count_lookup_cost(order: LoadOrder, strategy: Strategy | str, workload: Iterable[str]) -> LookupCost:
    """Resolve every name in ``workload`` and return the probe counters.

    Unresolvable names are counted (they visit every object) but not raised.
    """
    index = build_index(order, strategy)
    cost = LookupCost()
    for name in workload:
        try:
            index.lookup(name, cost)
        except UnresolvedSymbolError:
            pass
    return cost


def relocation_workload(order: LoadOrder) -> list[str]:
    """Symbol names of every DIRECT relocation, in resolution order."""
    return [
        rel.symbol_name
        for obj in order.objects
        for rel in sorted(obj.relocs, key=lambda r: r.offset)
        if rel.type is RelocType.DIRECT
    ]


def materialize(objects: Mapping[str, SharedObject], exe: str, epoch_id: int,
                strategy: Strategy | str = Strategy.HASHED,
                cost: LookupCost | None = None) -> RelocationTable:
    """Resolve every relocation of ``exe``'s closure eagerly into a table.

    All-or-nothing: the first unresolved symbol raises and no table results.
    """
    order = compute_load_order(objects, exe)
    index = build_index(order, strategy)
    items = []
    for obj, uuid in zip(order.objects, order.uuids):
        for rel in sorted(obj.relocs, key=lambda r: r.offset):
            if rel.type is RelocType.RELATIVE:
                items.append(RelocationTableItem(
                    RelocType.RELATIVE, rel.addend, rel.offset, 0, 0,
                    uuid, uuid, "", obj.name, obj.name,
                ))
                continue
            try:
                sym, provider = index.lookup(rel.symbol_name, cost)
            except UnresolvedSymbolError:
                raise UnresolvedSymbolError(rel.symbol_name, obj.name) from None
            items.append(RelocationTableItem(
                RelocType.DIRECT, rel.addend, rel.offset, sym.st_value, sym.st_size,
                uuid, provider.uuid, rel.symbol_name, obj.name, provider.name,
            ))
    return RelocationTable(exe, order.uuids[0], epoch_id, order.load_set(), tuple(items))
