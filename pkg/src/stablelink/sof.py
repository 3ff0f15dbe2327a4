"""Shared-object format (SOF): the portable stand-in for an ELF shared object.

A ``.sof`` file is a UTF-8 JSON document::

    {
      "name": "liba",
      "kind": "LIBRARY",              # or "EXECUTABLE"
      "image_size": "0x1000",         # bytes, multiple of 4096
      "needed": ["libc"],             # load-order significant
      "exports": [{"name": "foo", "st_value": "0x100", "st_size": "0x8"}],
      "relocs": [{"type": "DIRECT", "offset": "0x10", "addend": "0x0",
                  "symbol_name": "foo"}]
    }

Integers may be written either as JSON numbers or as ``0x``-prefixed hex
strings (``addend`` may carry a leading ``-``).  ``needed``, ``exports`` and
``relocs`` may be omitted, as may ``addend`` (0) and ``symbol_name`` (empty).
The canonical form written by :func:`serialize_sof` uses exactly the key order
above, hex strings for every integer, 2-space indentation and a trailing
newline.  Object UUIDs are the 64-bit FNV-1a hash of the canonical bytes.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum, IntEnum
from functools import cached_property
from typing import Any, Iterable

from . import _canonjson
from ._hashing import fnv1a64
from .errors import InvariantError, SofSyntaxError

WORD_SIZE = 8
PAGE_SIZE = 4096
U64_MAX = (1 << 64) - 1
I64_MIN = -(1 << 63)
I64_MAX = (1 << 63) - 1

# names end up in CSV cells, trace lines and file names
_NAME_RE = re.compile(r"[^\s,\x00]+\Z")


class Kind(str, Enum):
    EXECUTABLE = "EXECUTABLE"
    LIBRARY = "LIBRARY"


class RelocType(IntEnum):
    DIRECT = 1
    RELATIVE = 2


def format_uuid(uuid: int) -> str:
    return f"{uuid:016x}"


def parse_uuid(text: str) -> int:
    if not isinstance(text, str) or not re.fullmatch(r"[0-9a-f]{16}", text):
        raise ValueError(f"malformed uuid {text!r}")
    return int(text, 16)


def hex_u64(value: int) -> str:
    return f"0x{value:x}"


def hex_i64(value: int) -> str:
    return f"-0x{-value:x}" if value < 0 else f"0x{value:x}"


def is_valid_name(name: Any) -> bool:
    return isinstance(name, str) and bool(_NAME_RE.match(name))


def is_valid_object_name(name: Any) -> bool:
    return is_valid_name(name) and "/" not in name and name not in (".", "..")


@dataclass(frozen=True)
class SymbolDef:
    name: str
    st_value: int
    st_size: int


@dataclass(frozen=True)
class RelocInstruction:
    type: RelocType
    offset: int
    addend: int = 0
    symbol_name: str = ""


@dataclass(frozen=True)
class SharedObject:
    name: str
    kind: Kind
    image_size: int
    needed: tuple[str, ...] = ()
    exports: tuple[SymbolDef, ...] = ()
    relocs: tuple[RelocInstruction, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "needed", tuple(self.needed))
        object.__setattr__(self, "exports", tuple(self.exports))
        object.__setattr__(self, "relocs", tuple(self.relocs))

    @property
    def is_executable(self) -> bool:
        return self.kind is Kind.EXECUTABLE

    @cached_property
    def export_map(self) -> dict[str, SymbolDef]:
        return {sym.name: sym for sym in self.exports}

    @cached_property
    def uuid(self) -> int:
        return content_uuid(self)


def validate(obj: SharedObject) -> SharedObject:
    """Check every object invariant; raise InvariantError naming the field."""
    if not is_valid_object_name(obj.name):
        raise InvariantError("name", f"invalid object name {obj.name!r}")
    if not isinstance(obj.kind, Kind):
        raise InvariantError("kind", f"invalid kind {obj.kind!r}")
    size = obj.image_size
    if not _is_u64(size) or size == 0 or size % PAGE_SIZE:
        raise InvariantError("image_size", f"{size!r} is not a positive multiple of {PAGE_SIZE}")

    seen: set[str] = set()
    for i, dep in enumerate(obj.needed):
        path = f"needed[{i}]"
        if not is_valid_object_name(dep):
            raise InvariantError(path, f"invalid object name {dep!r}")
        if dep == obj.name:
            raise InvariantError(path, "object lists itself as needed")
        if dep in seen:
            raise InvariantError(path, f"duplicate needed entry {dep!r}")
        seen.add(dep)

    seen = set()
    for i, sym in enumerate(obj.exports):
        path = f"exports[{i}]"
        if not is_valid_name(sym.name):
            raise InvariantError(f"{path}.name", f"invalid symbol name {sym.name!r}")
        if sym.name in seen:
            raise InvariantError(f"{path}.name", f"duplicate export {sym.name!r}")
        seen.add(sym.name)
        if not _is_u64(sym.st_value):
            raise InvariantError(f"{path}.st_value", f"{sym.st_value!r} is not an unsigned 64-bit value")
        if not _is_u64(sym.st_size):
            raise InvariantError(f"{path}.st_size", f"{sym.st_size!r} is not an unsigned 64-bit value")
        if sym.st_value + sym.st_size > size:
            raise InvariantError(path, "symbol extends past image_size")

    offsets: set[int] = set()
    for i, rel in enumerate(obj.relocs):
        path = f"relocs[{i}]"
        if not isinstance(rel.type, RelocType):
            raise InvariantError(f"{path}.type", f"invalid relocation type {rel.type!r}")
        off = rel.offset
        if not _is_u64(off):
            raise InvariantError(f"{path}.offset", f"{off!r} is not an unsigned 64-bit value")
        if off % WORD_SIZE:
            raise InvariantError(f"{path}.offset", f"{off:#x} is not {WORD_SIZE}-aligned")
        if off + WORD_SIZE > size:
            raise InvariantError(f"{path}.offset", f"{off:#x} lies outside the image")
        if off in offsets:
            raise InvariantError(f"{path}.offset", f"second relocation at {off:#x}")
        offsets.add(off)
        if not (isinstance(rel.addend, int) and I64_MIN <= rel.addend <= I64_MAX):
            raise InvariantError(f"{path}.addend", f"{rel.addend!r} is not a signed 64-bit value")
        if rel.type is RelocType.DIRECT:
            if not is_valid_name(rel.symbol_name):
                raise InvariantError(f"{path}.symbol_name", f"invalid symbol name {rel.symbol_name!r}")
        elif rel.symbol_name != "":
            raise InvariantError(f"{path}.symbol_name", "RELATIVE relocation must not name a symbol")
    return obj


def _is_u64(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool) and 0 <= value <= U64_MAX


def to_document(obj: SharedObject) -> dict:
    return {
        "name": obj.name,
        "kind": obj.kind.value,
        "image_size": hex_u64(obj.image_size),
        "needed": list(obj.needed),
        "exports": [
            {"name": s.name, "st_value": hex_u64(s.st_value), "st_size": hex_u64(s.st_size)}
            for s in obj.exports
        ],
        "relocs": [
            {
                "type": r.type.name,
                "offset": hex_u64(r.offset),
                "addend": hex_i64(r.addend),
                "symbol_name": r.symbol_name,
            }
            for r in obj.relocs
        ],
    }


def serialize_sof(obj: SharedObject) -> bytes:
    text = _canonjson.dumps(to_document(obj))
    return (text + "\n").encode("utf-8")


def content_uuid(obj: SharedObject) -> int:
    return fnv1a64(serialize_sof(obj))


_INT_RE = re.compile(r"-?0x[0-9a-fA-F]+\Z")


def _int_field(value: Any, path: str) -> int:
    if isinstance(value, bool):
        raise SofSyntaxError(f"{path}: expected integer, got boolean")
    if isinstance(value, int):
        return value
    if isinstance(value, str) and _INT_RE.match(value):
        return int(value, 16)
    raise SofSyntaxError(f"{path}: expected integer or 0x-prefixed hex string, got {value!r}")


def _str_field(value: Any, path: str) -> str:
    if not isinstance(value, str):
        raise SofSyntaxError(f"{path}: expected string, got {value!r}")
    return value


def _record(value: Any, path: str, required: Iterable[str], optional: Iterable[str] = ()) -> dict:
    if not isinstance(value, dict):
        raise SofSyntaxError(f"{path}: expected object")
    required = tuple(required)
    allowed = set(required) | set(optional)
    for key in value:
        if key not in allowed:
            raise SofSyntaxError(f"{path}: unknown key {key!r}")
    for key in required:
        if key not in value:
            raise SofSyntaxError(f"{path}: missing key {key!r}")
    return value


def _list_field(doc: dict, key: str) -> list:
    value = doc.get(key, [])
    if not isinstance(value, list):
        raise SofSyntaxError(f"{key}: expected array")
    return value


def from_document(doc: Any) -> SharedObject:
    doc = _record(doc, "<root>", ("name", "kind", "image_size"), ("needed", "exports", "relocs"))
    name = _str_field(doc["name"], "name")
    kind_text = _str_field(doc["kind"], "kind")
    try:
        kind = Kind(kind_text)
    except ValueError:
        raise SofSyntaxError(f"kind: unknown kind {kind_text!r}") from None
    image_size = _int_field(doc["image_size"], "image_size")
    needed = tuple(_str_field(v, f"needed[{i}]") for i, v in enumerate(_list_field(doc, "needed")))

    exports = []
    for i, raw in enumerate(_list_field(doc, "exports")):
        path = f"exports[{i}]"
        rec = _record(raw, path, ("name", "st_value", "st_size"))
        exports.append(SymbolDef(
            _str_field(rec["name"], f"{path}.name"),
            _int_field(rec["st_value"], f"{path}.st_value"),
            _int_field(rec["st_size"], f"{path}.st_size"),
        ))

    relocs = []
    for i, raw in enumerate(_list_field(doc, "relocs")):
        path = f"relocs[{i}]"
        rec = _record(raw, path, ("type", "offset"), ("addend", "symbol_name"))
        type_text = _str_field(rec["type"], f"{path}.type")
        try:
            rtype = RelocType[type_text]
        except KeyError:
            raise SofSyntaxError(f"{path}.type: unknown relocation type {type_text!r}") from None
        relocs.append(RelocInstruction(
            rtype,
            _int_field(rec["offset"], f"{path}.offset"),
            _int_field(rec.get("addend", 0), f"{path}.addend"),
            _str_field(rec.get("symbol_name", ""), f"{path}.symbol_name"),
        ))

    return validate(SharedObject(name, kind, image_size, needed, exports, relocs))


def parse_sof(data: bytes | str) -> SharedObject:
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SofSyntaxError(f"not UTF-8: {exc}") from None
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise SofSyntaxError(f"malformed document: {exc}") from None
    return from_document(doc)


def load_sof(path) -> SharedObject:
    with open(path, "rb") as fh:
        return parse_sof(fh.read())
