"""Materialized relocation tables and their canonical ``.rtab`` encoding.

Tables hold offsets, sizes, names and object UUIDs only, never absolute
addresses, so a table stays valid under any base-address assignment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, NamedTuple

from . import _canonjson, sof
from .errors import InvariantError, TableFormatError
from .sof import RelocType, SharedObject, format_uuid, hex_i64, hex_u64, parse_uuid

# column order of the exported item schema
ITEM_COLUMNS = (
    "type",
    "addend",
    "offset",
    "st_value",
    "st_size",
    "requires_so_UUID",
    "provides_so_UUID",
    "symbol_name",
    "requires_so_name",
    "provides_so_name",
)


@dataclass(frozen=True)
class RelocationTableItem:
    type: RelocType
    addend: int
    offset: int
    st_value: int
    st_size: int
    requires_so_uuid: int
    provides_so_uuid: int
    symbol_name: str
    requires_so_name: str
    provides_so_name: str

    def as_row(self) -> tuple:
        return (
            self.type, self.addend, self.offset, self.st_value, self.st_size,
            self.requires_so_uuid, self.provides_so_uuid,
            self.symbol_name, self.requires_so_name, self.provides_so_name,
        )


class LoadEntry(NamedTuple):
    name: str
    uuid: int
    image_size: int


@dataclass(frozen=True)
class RelocationTable:
    executable: str
    uuid: int
    epoch_id: int
    load_set: tuple[LoadEntry, ...]
    items: tuple[RelocationTableItem, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "load_set", tuple(LoadEntry(*e) for e in self.load_set))
        object.__setattr__(self, "items", tuple(self.items))

    def with_epoch(self, epoch_id: int) -> "RelocationTable":
        return replace(self, epoch_id=epoch_id)

    def load_entry(self, name: str) -> LoadEntry | None:
        for entry in self.load_set:
            if entry.name == name:
                return entry
        return None


def validate_table(table: RelocationTable, objects: Mapping[str, SharedObject] | None = None) -> RelocationTable:
    """Check structural table invariants.

    With ``objects`` given, DIRECT items are also checked against the
    provider's export list and every item against the requirer's relocs.
    """
    if not table.load_set:
        raise InvariantError("load_set", "empty load set")
    first = table.load_set[0]
    if first.name != table.executable or first.uuid != table.uuid:
        raise InvariantError("load_set[0]", "load set must start with the executable")

    by_uuid: dict[int, LoadEntry] = {}
    position: dict[str, int] = {}
    for i, entry in enumerate(table.load_set):
        if entry.name in position:
            raise InvariantError(f"load_set[{i}].name", f"duplicate object {entry.name!r}")
        if entry.uuid in by_uuid:
            raise InvariantError(f"load_set[{i}].uuid", f"duplicate uuid {format_uuid(entry.uuid)}")
        position[entry.name] = i
        by_uuid[entry.uuid] = entry

    prev_key = None
    for i, item in enumerate(table.items):
        path = f"items[{i}]"
        req = by_uuid.get(item.requires_so_uuid)
        prov = by_uuid.get(item.provides_so_uuid)
        if req is None:
            raise InvariantError(f"{path}.requires_so_uuid", "uuid not in load set")
        if prov is None:
            raise InvariantError(f"{path}.provides_so_uuid", "uuid not in load set")
        if req.name != item.requires_so_name:
            raise InvariantError(f"{path}.requires_so_name", "name does not match uuid")
        if prov.name != item.provides_so_name:
            raise InvariantError(f"{path}.provides_so_name", "name does not match uuid")
        if item.offset % sof.WORD_SIZE or item.offset + sof.WORD_SIZE > req.image_size:
            raise InvariantError(f"{path}.offset", f"{item.offset:#x} is not a valid slot")
        if not (sof.I64_MIN <= item.addend <= sof.I64_MAX):
            raise InvariantError(f"{path}.addend", "not a signed 64-bit value")
        key = (position[req.name], item.offset)
        if prev_key is not None and key <= prev_key:
            raise InvariantError(path, "items are not in (load position, offset) order")
        prev_key = key

        if item.type is RelocType.RELATIVE:
            if item.provides_so_uuid != item.requires_so_uuid or item.symbol_name or item.st_value or item.st_size:
                raise InvariantError(path, "RELATIVE item must be self-referential with no symbol")
        elif item.type is RelocType.DIRECT:
            if not sof.is_valid_name(item.symbol_name):
                raise InvariantError(f"{path}.symbol_name", "DIRECT item needs a symbol name")
            if item.st_value + item.st_size > prov.image_size:
                raise InvariantError(path, "symbol extends past provider image")
        else:
            raise InvariantError(f"{path}.type", f"invalid type {item.type!r}")

        if objects is not None:
            _check_against_objects(item, path, objects)
    return table


def _check_against_objects(item: RelocationTableItem, path: str, objects: Mapping[str, SharedObject]) -> None:
    requirer = objects.get(item.requires_so_name)
    provider = objects.get(item.provides_so_name)
    if requirer is None or requirer.uuid != item.requires_so_uuid:
        raise InvariantError(f"{path}.requires_so_uuid", "requiring object is not current")
    if provider is None or provider.uuid != item.provides_so_uuid:
        raise InvariantError(f"{path}.provides_so_uuid", "providing object is not current")
    for rel in requirer.relocs:
        if rel.offset == item.offset:
            if rel.type is not item.type or rel.addend != item.addend:
                raise InvariantError(path, "item disagrees with the relocation instruction")
            if rel.type is RelocType.DIRECT and rel.symbol_name != item.symbol_name:
                raise InvariantError(f"{path}.symbol_name", "item disagrees with the relocation instruction")
            break
    else:
        raise InvariantError(f"{path}.offset", "requiring object has no relocation at this offset")
    if item.type is RelocType.DIRECT:
        sym = provider.export_map.get(item.symbol_name)
        if sym is None or (sym.st_value, sym.st_size) != (item.st_value, item.st_size):
            raise InvariantError(path, f"{item.provides_so_name!r} does not export a matching {item.symbol_name!r}")


# .rtab encoding

def table_to_document(table: RelocationTable) -> dict:
    return {
        "executable": table.executable,
        "uuid": format_uuid(table.uuid),
        "epoch_id": hex_u64(table.epoch_id),
        "load_set": [
            {"name": e.name, "uuid": format_uuid(e.uuid), "image_size": hex_u64(e.image_size)}
            for e in table.load_set
        ],
        "items": [
            {
                "type": it.type.name,
                "addend": hex_i64(it.addend),
                "offset": hex_u64(it.offset),
                "st_value": hex_u64(it.st_value),
                "st_size": hex_u64(it.st_size),
                "requires_so_uuid": format_uuid(it.requires_so_uuid),
                "provides_so_uuid": format_uuid(it.provides_so_uuid),
                "symbol_name": it.symbol_name,
                "requires_so_name": it.requires_so_name,
                "provides_so_name": it.provides_so_name,
            }
            for it in table.items
        ],
    }


def serialize_table(table: RelocationTable) -> bytes:
    return (_canonjson.dumps(table_to_document(table)) + "\n").encode("utf-8")


def _hex(value: Any, path: str, signed: bool = False) -> int:
    if not isinstance(value, str):
        raise TableFormatError(f"{path}: expected hex string")
    text = value[1:] if signed and value.startswith("-") else value
    if not text.startswith("0x"):
        raise TableFormatError(f"{path}: expected hex string, got {value!r}")
    try:
        return int(value, 16)
    except ValueError:
        raise TableFormatError(f"{path}: bad hex {value!r}") from None


def _uuid(value: Any, path: str) -> int:
    try:
        return parse_uuid(value)
    except ValueError as exc:
        raise TableFormatError(f"{path}: {exc}") from None


def table_from_document(doc: Any) -> RelocationTable:
    try:
        load_set = [
            LoadEntry(e["name"], _uuid(e["uuid"], f"load_set[{i}].uuid"), _hex(e["image_size"], f"load_set[{i}].image_size"))
            for i, e in enumerate(doc["load_set"])
        ]
        items = []
        for i, it in enumerate(doc["items"]):
            p = f"items[{i}]"
            items.append(RelocationTableItem(
                RelocType[it["type"]],
                _hex(it["addend"], f"{p}.addend", signed=True),
                _hex(it["offset"], f"{p}.offset"),
                _hex(it["st_value"], f"{p}.st_value"),
                _hex(it["st_size"], f"{p}.st_size"),
                _uuid(it["requires_so_uuid"], f"{p}.requires_so_uuid"),
                _uuid(it["provides_so_uuid"], f"{p}.provides_so_uuid"),
                it["symbol_name"],
                it["requires_so_name"],
                it["provides_so_name"],
            ))
        return RelocationTable(
            doc["executable"],
            _uuid(doc["uuid"], "uuid"),
            _hex(doc["epoch_id"], "epoch_id"),
            tuple(load_set),
            tuple(items),
        )
    except (KeyError, TypeError) as exc:
        raise TableFormatError(f"malformed table document: {exc!r}") from None


def parse_table(data: bytes | str) -> RelocationTable:
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise TableFormatError(f"malformed table: {exc}") from None
    return table_from_document(doc)
