"""Relocation-table inspection: exports, ABI tables, audit queries, patching."""

from __future__ import annotations

import csv
import io
import json
import os
import sqlite3
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, NamedTuple

from .errors import (
    NoMatchError,
    StaleTablesError,
    SymbolNotExportedError,
    TableFormatError,
    UnknownObjectError,
)
from .sof import RelocType, SharedObject, format_uuid, load_sof, parse_uuid
from .table import ITEM_COLUMNS, LoadEntry, RelocationTable, RelocationTableItem, validate_table


class ExportFormat(str, Enum):
    JSON = "json"
    CSV = "csv"
    RELATIONAL = "db"


def table_rows(table: RelocationTable) -> list[tuple]:
    return [item.as_row() for item in table.items]


# JSON

def to_json(table: RelocationTable) -> bytes:
    doc = {
        "executable": table.executable,
        "uuid": format_uuid(table.uuid),
        "epoch_id": table.epoch_id,
        "load_set": [
            {"name": e.name, "uuid": format_uuid(e.uuid), "image_size": e.image_size}
            for e in table.load_set
        ],
        "items": [
            {
                "type": it.type.name,
                "addend": it.addend,
                "offset": it.offset,
                "st_value": it.st_value,
                "st_size": it.st_size,
                "requires_so_UUID": format_uuid(it.requires_so_uuid),
                "provides_so_UUID": format_uuid(it.provides_so_uuid),
                "symbol_name": it.symbol_name,
                "requires_so_name": it.requires_so_name,
                "provides_so_name": it.provides_so_name,
            }
            for it in table.items
        ],
    }
    return (json.dumps(doc, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def from_json(data: bytes | str) -> RelocationTable:
    try:
        doc = json.loads(data)
        load_set = tuple(LoadEntry(e["name"], parse_uuid(e["uuid"]), int(e["image_size"])) for e in doc["load_set"])
        items = tuple(
            RelocationTableItem(
                RelocType[it["type"]], int(it["addend"]), int(it["offset"]),
                int(it["st_value"]), int(it["st_size"]),
                parse_uuid(it["requires_so_UUID"]), parse_uuid(it["provides_so_UUID"]),
                it["symbol_name"], it["requires_so_name"], it["provides_so_name"],
            )
            for it in doc["items"]
        )
        return RelocationTable(doc["executable"], parse_uuid(doc["uuid"]), int(doc["epoch_id"]), load_set, items)
    except (ValueError, KeyError, TypeError) as exc:
        raise TableFormatError(f"malformed JSON table: {exc!r}") from None


# CSV: '#'-prefixed metadata lines, then a header row and one row per item.
# Names never contain commas, whitespace or newlines, so no quoting occurs.

def to_csv(table: RelocationTable) -> bytes:
    out = io.StringIO()
    out.write(f"# executable: {table.executable}\n")
    out.write(f"# uuid: {format_uuid(table.uuid)}\n")
    out.write(f"# epoch_id: {table.epoch_id}\n")
    for e in table.load_set:
        out.write(f"# load: {e.name} {format_uuid(e.uuid)} {e.image_size}\n")
    writer = csv.writer(out, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
    writer.writerow(ITEM_COLUMNS)
    for it in table.items:
        writer.writerow([
            it.type.name, it.addend, it.offset, it.st_value, it.st_size,
            format_uuid(it.requires_so_uuid), format_uuid(it.provides_so_uuid),
            it.symbol_name, it.requires_so_name, it.provides_so_name,
        ])
    return out.getvalue().encode("utf-8")


def from_csv(data: bytes | str) -> RelocationTable:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    meta: dict[str, str] = {}
    load_set = []
    body = []
    for line in data.splitlines():
        if line.startswith("# "):
            key, _, value = line[2:].partition(": ")
            if key == "load":
                name, uuid, size = value.split(" ")
                load_set.append(LoadEntry(name, parse_uuid(uuid), int(size)))
            else:
                meta[key] = value
        else:
            body.append(line)
    rows = list(csv.reader(body))
    if not rows or tuple(rows[0]) != ITEM_COLUMNS:
        raise TableFormatError("CSV header does not match the relocation table columns")
    try:
        items = tuple(
            RelocationTableItem(
                RelocType[r[0]], int(r[1]), int(r[2]), int(r[3]), int(r[4]),
                parse_uuid(r[5]), parse_uuid(r[6]), r[7], r[8], r[9],
            )
            for r in rows[1:]
        )
        return RelocationTable(meta["executable"], parse_uuid(meta["uuid"]), int(meta["epoch_id"]),
                               tuple(load_set), items)
    except (KeyError, ValueError, IndexError) as exc:
        raise TableFormatError(f"malformed CSV table: {exc!r}") from None


# SQLite.  INTEGER columns are signed 64-bit, so unsigned fields at or above
# 2**63 are stored in two's complement and folded back on read.

_SCHEMA = """
CREATE TABLE relocation_table (
    type INTEGER, addend INTEGER, offset INTEGER, st_value INTEGER, st_size INTEGER,
    requires_so_uuid TEXT, provides_so_uuid TEXT,
    symbol_name TEXT, requires_so_name TEXT, provides_so_name TEXT
);
CREATE TABLE load_set (name TEXT, uuid TEXT, image_size INTEGER);
CREATE TABLE table_info (key TEXT PRIMARY KEY, value TEXT);
"""


def _to_sql_int(value: int) -> int:
    return value - (1 << 64) if value >= 1 << 63 else value


def _from_sql_uint(value: int) -> int:
    return value + (1 << 64) if value < 0 else value


def to_sqlite(table: RelocationTable, path) -> Path:
    path = Path(path)
    if path.exists():
        path.unlink()
    con = sqlite3.connect(path)
    try:
        with con:
            con.executescript(_SCHEMA)
            con.executemany("INSERT INTO table_info VALUES (?, ?)", [
                ("executable", table.executable),
                ("uuid", format_uuid(table.uuid)),
                ("epoch_id", str(table.epoch_id)),
            ])
            con.executemany("INSERT INTO load_set VALUES (?, ?, ?)", [
                (e.name, format_uuid(e.uuid), _to_sql_int(e.image_size)) for e in table.load_set
            ])
            con.executemany("INSERT INTO relocation_table VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?)", [
                (int(it.type), it.addend, _to_sql_int(it.offset), _to_sql_int(it.st_value),
                 _to_sql_int(it.st_size), format_uuid(it.requires_so_uuid), format_uuid(it.provides_so_uuid),
                 it.symbol_name, it.requires_so_name, it.provides_so_name)
                for it in table.items
            ])
    finally:
        con.close()
    return path


def from_sqlite(path) -> RelocationTable:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    con = sqlite3.connect(f"file:{path}?mode=ro", uri=True)
    try:
        info = dict(con.execute("SELECT key, value FROM table_info"))
        load_set = tuple(
            LoadEntry(name, parse_uuid(uuid), _from_sql_uint(size))
            for name, uuid, size in con.execute("SELECT name, uuid, image_size FROM load_set ORDER BY rowid")
        )
        items = tuple(
            RelocationTableItem(
                RelocType(t), addend, _from_sql_uint(off), _from_sql_uint(val), _from_sql_uint(size),
                parse_uuid(req), parse_uuid(prov), sym, req_name, prov_name,
            )
            for t, addend, off, val, size, req, prov, sym, req_name, prov_name in con.execute(
                "SELECT * FROM relocation_table ORDER BY rowid")
        )
        return RelocationTable(info["executable"], parse_uuid(info["uuid"]), int(info["epoch_id"]), load_set, items)
    except (sqlite3.Error, KeyError, ValueError) as exc:
        raise TableFormatError(f"malformed relocation database: {exc!r}") from None
    finally:
        con.close()


def export_table(table: RelocationTable, fmt: ExportFormat | str, out=None) -> bytes | Path:
    """Export in JSON, CSV or SQLite form.

    JSON/CSV return the encoded bytes (and write them to ``out`` if given);
    the relational form needs ``out`` and returns the database path.
    """
    fmt = ExportFormat(fmt)
    if fmt is ExportFormat.RELATIONAL:
        if out is None:
            raise ValueError("relational export needs an output path")
        return to_sqlite(table, out)
    data = to_json(table) if fmt is ExportFormat.JSON else to_csv(table)
    if out is not None:
        Path(out).write_bytes(data)
    return data


def import_table(path, fmt: ExportFormat | str | None = None) -> RelocationTable:
    path = Path(path)
    if fmt is None:
        fmt = {".json": "json", ".csv": "csv"}.get(path.suffix, "db")
    fmt = ExportFormat(fmt)
    if fmt is ExportFormat.RELATIONAL:
        return from_sqlite(path)
    data = path.read_bytes()
    return from_json(data) if fmt is ExportFormat.JSON else from_csv(data)


# ABI tables and audit queries

class AbiRow(NamedTuple):
    symbol_name: str
    st_value: int
    st_size: int


@dataclass(frozen=True)
class AbiTable:
    library: str
    uuid: int
    rows: tuple[AbiRow, ...]

    @property
    def symbols(self) -> frozenset[str]:
        return frozenset(r.symbol_name for r in self.rows)


def abi_of(obj: SharedObject) -> AbiTable:
    rows = sorted(AbiRow(s.name, s.st_value, s.st_size) for s in obj.exports)
    return AbiTable(obj.name, obj.uuid, tuple(rows))


def abi_table(objects: Mapping[str, SharedObject] | None, library: str) -> AbiTable:
    """ABI of a registry object, or of a standalone ``.sof`` file path."""
    if objects is not None and library in objects:
        return abi_of(objects[library])
    if library.endswith(".sof") and os.path.isfile(library):
        return abi_of(load_sof(library))
    raise UnknownObjectError(f"no object {library!r} in the registry and no such .sof file")


def query_abi_compat(table: RelocationTable, old_name: str, new_abi: AbiTable) -> list[tuple[str, str]]:
    """Bindings against ``old_name`` whose symbol the new ABI no longer exports."""
    exported = new_abi.symbols
    return [
        (it.symbol_name, it.requires_so_name)
        for it in table.items
        if it.provides_so_name == old_name and it.symbol_name not in exported
    ]


def find_bindings(tables: Mapping[str, RelocationTable], library: str, symbol: str) -> list[str]:
    return sorted({
        exe for exe, table in tables.items()
        if any(it.provides_so_name == library and it.symbol_name == symbol for it in table.items)
    })


def query_cve(registry, library: str, symbol: str) -> list[str]:
    """Executables whose current table binds ``symbol`` to ``library``."""
    from .registry import Mode

    if registry.mode is not Mode.EPOCH:
        raise StaleTablesError("tables are stale during management time; run end-mgmt first")
    return find_bindings(registry.tables(), library, symbol)


# Patching

@dataclass(frozen=True)
class Patch:
    symbol_name: str
    new_provider: str
    requires_so_name: str | None = None

    def matches(self, item: RelocationTableItem) -> bool:
        return (item.type is RelocType.DIRECT
                and item.symbol_name == self.symbol_name
                and (self.requires_so_name is None or item.requires_so_name == self.requires_so_name))

    def to_dict(self) -> dict:
        return {"symbol": self.symbol_name, "provider": self.new_provider, "requires": self.requires_so_name}

    @classmethod
    def from_dict(cls, d: dict) -> "Patch":
        return cls(d["symbol"], d["provider"], d.get("requires"))


def patch_table(table: RelocationTable, patch: Patch, objects: Mapping[str, SharedObject]) -> RelocationTable:
    """Rebind the selected DIRECT items to ``patch.new_provider``."""
    provider = objects.get(patch.new_provider)
    if provider is None:
        raise UnknownObjectError(f"no object named {patch.new_provider!r}")
    sym = provider.export_map.get(patch.symbol_name)
    if sym is None:
        raise SymbolNotExportedError(patch.new_provider, patch.symbol_name)

    load_set = list(table.load_set)
    entry = table.load_entry(provider.name)
    if entry is None:
        load_set.append(LoadEntry(provider.name, provider.uuid, provider.image_size))
    elif entry.uuid != provider.uuid:
        raise StaleTablesError(f"table predates the current {provider.name!r}; run end-mgmt first")

    matched = 0
    items = []
    for it in table.items:
        if patch.matches(it):
            matched += 1
            it = replace(it, provides_so_uuid=provider.uuid, provides_so_name=provider.name,
                         st_value=sym.st_value, st_size=sym.st_size)
        items.append(it)
    if not matched:
        who = f" required by {patch.requires_so_name!r}" if patch.requires_so_name else ""
        raise NoMatchError(f"no DIRECT item binds {patch.symbol_name!r}{who} in {table.executable!r}")
    return validate_table(replace(table, load_set=tuple(load_set), items=tuple(items)))


def apply_patch(registry, exe: str, patch: Patch):
    return registry.apply_patch(exe, patch)
