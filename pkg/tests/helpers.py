"""Fixtures, random generators and brute-force oracles shared by the tests.

The oracles here deliberately avoid the package's resolver/executor code paths.
"""

from __future__ import annotations

import random

from stablelink.sof import Kind, RelocInstruction, RelocType, SharedObject, SymbolDef
from stablelink.table import LoadEntry, RelocationTable, RelocationTableItem

PAGE = 4096
D, R = RelocType.DIRECT, RelocType.RELATIVE


def lib(name, exports=(), needed=(), relocs=(), image_size=PAGE):
    return SharedObject(name, Kind.LIBRARY, image_size, tuple(needed),
                        tuple(SymbolDef(*e) for e in exports), tuple(relocs))


def exe(name, needed=(), relocs=(), exports=(), image_size=PAGE):
    return SharedObject(name, Kind.EXECUTABLE, image_size, tuple(needed),
                        tuple(SymbolDef(*e) for e in exports), tuple(relocs))


def direct(offset, symbol, addend=0):
    return RelocInstruction(D, offset, addend, symbol)


def relative(offset, addend=0):
    return RelocInstruction(R, offset, addend, "")


def paradox_objects() -> dict[str, SharedObject]:
    """app needs [liba, libb]; both libraries export foo and bar."""
    return {
        "app": exe("app", ["liba", "libb"], [direct(0x10, "foo"), direct(0x18, "bar")]),
        "liba": lib("liba", [("foo", 0x100, 8), ("bar", 0x200, 8)]),
        "libb": lib("libb", [("foo", 0x300, 8), ("bar", 0x400, 8)]),
    }


# random generation

def random_object(rng: random.Random, name=None, kind=None, max_relocs=40) -> SharedObject:
    """Arbitrary valid object; used for format round-trips (not resolvable)."""
    pages = rng.randint(1, 4)
    size = pages * PAGE
    name = name or "o" + "".join(rng.choice("abcdefgh_.0123") for _ in range(rng.randint(1, 8)))
    kind = kind or rng.choice(list(Kind))
    exports = []
    for i in range(rng.randint(0, 12)):
        st_size = rng.choice([0, 8, 16, rng.randint(0, 200)])
        st_value = rng.randint(0, size - st_size)
        exports.append(SymbolDef(f"sym{i}_{rng.randint(0, 999)}", st_value, st_size))
    slots = rng.sample(range(size // 8), rng.randint(0, min(max_relocs, size // 8)))
    relocs = []
    for slot in slots:
        addend = rng.choice([0, rng.randint(-(1 << 63), (1 << 63) - 1), rng.randint(-64, 64)])
        if rng.random() < 0.7:
            relocs.append(RelocInstruction(D, slot * 8, addend, f"ext{rng.randint(0, 50)}"))
        else:
            relocs.append(RelocInstruction(R, slot * 8, addend, ""))
    needed = rng.sample([f"dep{i}" for i in range(10)], rng.randint(0, 4))
    return SharedObject(name, kind, size, tuple(needed), tuple(exports), tuple(relocs))


def _closure(objects, root):
    seen, stack = {root}, [root]
    while stack:
        for dep in objects[stack.pop()]["needed"]:
            if dep not in seen:
                seen.add(dep)
                stack.append(dep)
    return seen


def random_registry(rng: random.Random, max_objects=20, max_relocs=200, pool=30,
                    unresolvable=False) -> dict[str, SharedObject]:
    """A resolvable registry rooted at executable ``app``.

    Symbol names come from a small shared pool so shadowing is common.
    Export values keep ``st_value + addend`` inside the provider's image for
    the addends generated here, so every DIRECT word points into an extent.
    """
    count = rng.randint(1, max_objects)
    names = ["app"] + [f"lib{i}" for i in range(1, count)]
    spec = {}
    for name in names:
        pages = rng.randint(1, 3)
        size = pages * PAGE
        exported = rng.sample(range(pool), rng.randint(0, min(12, pool)))
        exports = []
        for s in exported:
            st_size = rng.choice([8, 16, 32, 64])
            exports.append(SymbolDef(f"s{s}", rng.randrange(16, size - st_size - 16, 8), st_size))
        others = [n for n in names if n != name]
        needed = rng.sample(others, rng.randint(0, min(4, len(others))))
        spec[name] = {"size": size, "exports": exports, "needed": needed}

    reachable = _closure(spec, "app")
    available = sorted({e.name for n in reachable for e in spec[n]["exports"]})
    objects = {}
    for name in names:
        size = spec[name]["size"]
        nrelocs = rng.randint(0, min(max_relocs, size // 8))
        relocs = []
        for slot in sorted(rng.sample(range(size // 8), nrelocs), key=lambda _: rng.random()):
            if available and rng.random() < 0.8:
                relocs.append(RelocInstruction(D, slot * 8, rng.randint(-16, 16), rng.choice(available)))
            else:
                relocs.append(RelocInstruction(R, slot * 8, rng.randrange(0, size), ""))
        kind = Kind.EXECUTABLE if name == "app" else Kind.LIBRARY
        objects[name] = SharedObject(name, kind, size, tuple(spec[name]["needed"]),
                                     tuple(spec[name]["exports"]), tuple(relocs))

    if not any(o.relocs for n, o in objects.items() if n in reachable):
        app = objects["app"]
        objects["app"] = SharedObject(app.name, app.kind, app.image_size, app.needed, app.exports,
                                      (RelocInstruction(R, 0, 8, ""),))
    if unresolvable:
        app = objects["app"]
        free = sorted(set(range(0, app.image_size, 8)) - {r.offset for r in app.relocs})
        objects["app"] = SharedObject(app.name, app.kind, app.image_size, app.needed, app.exports,
                                      app.relocs + (RelocInstruction(D, free[0], 0, "missing_symbol"),))
    return objects


def random_table(rng: random.Random) -> RelocationTable:
    """A structurally valid table with arbitrary field values (full 64-bit range)."""
    n = rng.randint(1, 6)
    load_set = [LoadEntry(f"obj{i}", rng.getrandbits(64), rng.randint(1, 8) * PAGE) for i in range(n)]
    if len({e.uuid for e in load_set}) != n:
        return random_table(rng)
    items = []
    for pos, req in enumerate(load_set):
        for slot in sorted(rng.sample(range(req.image_size // 8), rng.randint(0, 15))):
            addend = rng.choice([0, rng.randint(-(1 << 63), (1 << 63) - 1)])
            if rng.random() < 0.75:
                prov = rng.choice(load_set)
                st_size = rng.randint(0, 64)
                st_value = rng.randint(0, prov.image_size - st_size)
                items.append(RelocationTableItem(D, addend, slot * 8, st_value, st_size, req.uuid, prov.uuid,
                                                 f"s{rng.randint(0, 20)}", req.name, prov.name))
            else:
                items.append(RelocationTableItem(R, addend, slot * 8, 0, 0, req.uuid, req.uuid, "",
                                                 req.name, req.name))
    return RelocationTable("obj0", load_set[0].uuid, rng.getrandbits(64), tuple(load_set), tuple(items))


# oracles

def oracle_load_order(objects, exe_name) -> list[str]:
    """Level-by-level breadth-first expansion with a visited set."""
    order = [exe_name]
    level = [exe_name]
    while level:
        nxt = []
        for name in level:
            for dep in objects[name].needed:
                if dep not in order:
                    order.append(dep)
                    nxt.append(dep)
        level = nxt
    return order


def oracle_resolve(objects, order, symbol):
    for name in order:
        for sym in objects[name].exports:
            if sym.name == symbol:
                return name, sym
    return None


def oracle_items(objects, exe_name) -> list[tuple]:
    """Brute-force materialization: naive per-relocation linear search."""
    order = oracle_load_order(objects, exe_name)
    rows = []
    for name in order:
        obj = objects[name]
        for rel in sorted(obj.relocs, key=lambda r: r.offset):
            if rel.type is R:
                rows.append((R, rel.addend, rel.offset, 0, 0, obj.uuid, obj.uuid, "", name, name))
            else:
                hit = oracle_resolve(objects, order, rel.symbol_name)
                if hit is None:
                    raise LookupError(rel.symbol_name)
                prov, sym = hit
                rows.append((D, rel.addend, rel.offset, sym.st_value, sym.st_size, obj.uuid,
                             objects[prov].uuid, rel.symbol_name, name, prov))
    return rows


def oracle_image(objects, exe_name) -> dict[tuple[str, int], tuple[str, int]]:
    """Expected base-independent image: slot -> (target object, offset)."""
    order = oracle_load_order(objects, exe_name)
    image = {}
    for name in order:
        for rel in objects[name].relocs:
            if rel.type is R:
                image[(name, rel.offset)] = (name, rel.addend)
            else:
                prov, sym = oracle_resolve(objects, order, rel.symbol_name)
                image[(name, rel.offset)] = (prov, sym.st_value + rel.addend)
    return image


def oracle_abi_compat(table, old_name, abi):
    out = []
    for item in table.items:
        if item.provides_so_name != old_name:
            continue
        found = False
        for row in abi.rows:
            if row.symbol_name == item.symbol_name:
                found = True
        if not found:
            out.append((item.symbol_name, item.requires_so_name))
    return out


def oracle_cve(tables, library, symbol):
    hits = []
    for exe_name, table in tables.items():
        for item in table.items:
            if item.provides_so_name == library and item.symbol_name == symbol and exe_name not in hits:
                hits.append(exe_name)
    return sorted(hits)
