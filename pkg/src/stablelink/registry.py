"""Persistent object registry and the management-time / epoch state machine.

Layout of a registry root::

    manifest.json         mode, epoch_id, per-object uuid + dirty flag,
                          per-table provenance + digest, recorded patches
    objects/<name>.sof    canonical SOF bytes
    tables/<exe>.rtab     canonical relocation tables
    .lock                 flock target: exclusive for writers, shared for readers

The manifest is the single commit point.  Data files are first written as
``<file>.pending``, then the manifest is atomically replaced, then pending
files are renamed into place.  Recovery promotes a pending file only if its
digest matches the committed manifest and discards it otherwise, so a crash at
any step leaves either the old or the new registry state.
"""

from __future__ import annotations

import fcntl
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator

from ._hashing import fnv1a64
from .errors import (
    AlreadyManagingError,
    EpochLockedError,
    MaterializationFailedError,
    MissingDependencyError,
    NoTableError,
    NotManagingError,
    RegistryError,
    StableLinkError,
    UnknownObjectError,
)
from .inspector import Patch, patch_table
from .resolver import Strategy, materialize, transitive_closure
from .sof import SharedObject, format_uuid, parse_sof, parse_uuid, serialize_sof, validate
from .table import RelocationTable, parse_table, serialize_table, validate_table

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
LOCK = ".lock"
FORMAT = "stablelink-registry/1"
PENDING = ".pending"

# indirection so tests can simulate a crash between file operations
_replace = os.replace


class Mode(str, Enum):
    MANAGEMENT = "MANAGEMENT"
    EPOCH = "EPOCH"


@dataclass
class ObjectEntry:
    uuid: int
    dirty: bool


@dataclass
class TableEntry:
    epoch_id: int
    materialized_epoch: int
    digest: int
    stale: bool


@dataclass
class Manifest:
    mode: Mode = Mode.MANAGEMENT
    epoch_id: int = 0
    fresh: bool = True
    objects: dict[str, ObjectEntry] = field(default_factory=dict)
    tables: dict[str, TableEntry] = field(default_factory=dict)
    patches: dict[str, list[Patch]] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        doc = {
            "format": FORMAT,
            "mode": self.mode.value,
            "epoch_id": self.epoch_id,
            "fresh": self.fresh,
            "objects": {n: {"uuid": format_uuid(e.uuid), "dirty": e.dirty} for n, e in self.objects.items()},
            "tables": {
                n: {"epoch_id": t.epoch_id, "materialized_epoch": t.materialized_epoch,
                    "digest": format_uuid(t.digest), "stale": t.stale}
                for n, t in self.tables.items()
            },
            "patches": {n: [p.to_dict() for p in ps] for n, ps in self.patches.items() if ps},
        }
        return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8")

    @classmethod
    def from_bytes(cls, data: bytes) -> "Manifest":
        try:
            doc = json.loads(data)
            if doc.get("format") != FORMAT:
                raise RegistryError(f"unsupported registry format {doc.get('format')!r}")
            return cls(
                mode=Mode(doc["mode"]),
                epoch_id=int(doc["epoch_id"]),
                fresh=bool(doc["fresh"]),
                objects={n: ObjectEntry(parse_uuid(e["uuid"]), bool(e["dirty"])) for n, e in doc["objects"].items()},
                tables={
                    n: TableEntry(int(t["epoch_id"]), int(t["materialized_epoch"]), parse_uuid(t["digest"]),
                                  bool(t["stale"]))
                    for n, t in doc["tables"].items()
                },
                patches={n: [Patch.from_dict(p) for p in ps] for n, ps in doc.get("patches", {}).items()},
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise RegistryError(f"corrupt manifest: {exc!r}") from None


def _write_file(path: Path, data: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    _write_file(tmp, data)
    _replace(tmp, path)


class Registry:
    def __init__(self, root):
        self.root = Path(root)
        if not (self.root / MANIFEST).is_file():
            raise RegistryError(f"{self.root} is not a registry (no {MANIFEST}); run init first")

    @classmethod
    def init(cls, root) -> "Registry":
        root = Path(root)
        if (root / MANIFEST).exists():
            raise RegistryError(f"{root} already holds a registry")
        (root / "objects").mkdir(parents=True, exist_ok=True)
        (root / "tables").mkdir(exist_ok=True)
        (root / LOCK).touch()
        _atomic_write(root / MANIFEST, Manifest().to_bytes())
        return cls(root)

    # paths and locking

    def _object_path(self, name: str) -> Path:
        return self.root / "objects" / f"{name}.sof"

    def _table_path(self, exe: str) -> Path:
        return self.root / "tables" / f"{exe}.rtab"

    @contextmanager
    def _lock(self, exclusive: bool) -> Iterator[None]:
        with open(self.root / LOCK, "a") as fh:
            fcntl.flock(fh.fileno(), fcntl.LOCK_EX if exclusive else fcntl.LOCK_SH)
            try:
                yield
            finally:
                fcntl.flock(fh.fileno(), fcntl.LOCK_UN)

    def _manifest(self) -> Manifest:
        return Manifest.from_bytes((self.root / MANIFEST).read_bytes())

    def _commit(self, manifest: Manifest, staged: list[Path]) -> None:
        _atomic_write(self.root / MANIFEST, manifest.to_bytes())
        for pending in staged:
            _replace(pending, pending.with_name(pending.name[: -len(PENDING)]))

    def _stage(self, path: Path, data: bytes) -> Path:
        pending = path.with_name(path.name + PENDING)
        _write_file(pending, data)
        return pending

    def _recover(self, manifest: Manifest) -> None:
        """Finish or discard file operations interrupted by a crash."""
        for sub in ("objects", "tables"):
            for leftover in sorted((self.root / sub).iterdir()):
                name = leftover.name
                if name.endswith(".tmp"):
                    leftover.unlink()
                elif name.endswith(PENDING):
                    final = leftover.with_name(name[: -len(PENDING)])
                    if fnv1a64(leftover.read_bytes()) == self._expected_digest(sub, final.stem, manifest):
                        log.info("recovery: promoting %s", leftover)
                        _replace(leftover, final)
                    else:
                        log.info("recovery: discarding %s", leftover)
                        leftover.unlink()
                elif sub == "tables" and name.endswith(".rtab") and leftover.stem not in manifest.tables:
                    leftover.unlink()
        tmp = self.root / (MANIFEST + ".tmp")
        if tmp.exists():
            tmp.unlink()

    @staticmethod
    def _expected_digest(sub: str, stem: str, manifest: Manifest) -> int | None:
        if sub == "objects":
            entry = manifest.objects.get(stem)
            return entry.uuid if entry else None
        entry = manifest.tables.get(stem)
        return entry.digest if entry else None

    def _read_verified(self, path: Path, digest: int) -> bytes:
        # a committed-but-unpromoted pending file is equally authoritative
        for candidate in (path, path.with_name(path.name + PENDING)):
            if candidate.is_file():
                data = candidate.read_bytes()
                if fnv1a64(data) == digest:
                    return data
        raise RegistryError(f"{path} is missing or does not match the manifest")

    def _load_objects(self, manifest: Manifest) -> dict[str, SharedObject]:
        return {
            name: parse_sof(self._read_verified(self._object_path(name), entry.uuid))
            for name, entry in sorted(manifest.objects.items())
        }

    def _load_table(self, exe: str, manifest: Manifest) -> RelocationTable:
        entry = manifest.tables.get(exe)
        if entry is None:
            raise NoTableError(f"no relocation table for {exe!r}")
        return parse_table(self._read_verified(self._table_path(exe), entry.digest))

    # read-only accessors (shared lock)

    @property
    def mode(self) -> Mode:
        with self._lock(False):
            return self._manifest().mode

    @property
    def epoch_id(self) -> int:
        with self._lock(False):
            return self._manifest().epoch_id

    def objects(self) -> dict[str, SharedObject]:
        with self._lock(False):
            return self._load_objects(self._manifest())

    def get_object(self, name: str) -> SharedObject:
        with self._lock(False):
            entry = self._manifest().objects.get(name)
            if entry is None:
                raise UnknownObjectError(f"no object named {name!r}")
            return parse_sof(self._read_verified(self._object_path(name), entry.uuid))

    def table(self, exe: str) -> RelocationTable:
        with self._lock(False):
            return self._load_table(exe, self._manifest())

    def table_bytes(self, exe: str) -> bytes:
        with self._lock(False):
            manifest = self._manifest()
            entry = manifest.tables.get(exe)
            if entry is None:
                raise NoTableError(f"no relocation table for {exe!r}")
            return self._read_verified(self._table_path(exe), entry.digest)

    def tables(self) -> dict[str, RelocationTable]:
        with self._lock(False):
            manifest = self._manifest()
            return {exe: self._load_table(exe, manifest) for exe in sorted(manifest.tables)}

    def patches(self, exe: str) -> list[Patch]:
        with self._lock(False):
            return list(self._manifest().patches.get(exe, []))

    def status(self) -> dict:
        with self._lock(False):
            m = self._manifest()
            return {
                "mode": m.mode.value,
                "epoch_id": m.epoch_id,
                "objects": len(m.objects),
                "dirty": sorted(n for n, e in m.objects.items() if e.dirty),
                "tables": len(m.tables),
                "executables": {
                    exe: {
                        "epoch_id": t.epoch_id,
                        "materialized_epoch": t.materialized_epoch,
                        "stale": t.stale,
                        "patches": len(m.patches.get(exe, [])),
                    }
                    for exe, t in sorted(m.tables.items())
                },
            }

    # mutating operations (exclusive lock)

    def begin_mgmt(self) -> "Registry":
        with self._lock(True):
            m = self._manifest()
            self._recover(m)
            if m.mode is Mode.MANAGEMENT and not m.fresh:
                raise AlreadyManagingError("management time is already open")
            m.mode = Mode.MANAGEMENT
            m.fresh = False
            for t in m.tables.values():
                t.stale = True
            self._commit(m, [])
        return self

    def update_obj(self, obj: SharedObject) -> "Registry":
        with self._lock(True):
            m = self._manifest()
            if m.mode is not Mode.MANAGEMENT:
                raise EpochLockedError(f"cannot update {obj.name!r} during epoch {m.epoch_id}")
            self._recover(m)
            validate(obj)
            data = serialize_sof(obj)
            uuid = fnv1a64(data)
            staged = [self._stage(self._object_path(obj.name), data)]
            m.objects[obj.name] = ObjectEntry(uuid, True)
            self._commit(m, staged)
        return self

    def end_mgmt(self, strategy: Strategy | str = Strategy.HASHED) -> "Registry":
        """Close management time and materialize every affected executable.

        An executable is (re)materialized when it has no table, or when its
        dependency closure or its table's load set contains a dirty object.
        Others keep their table, re-stamped with the new epoch id.  Recorded
        patches are re-applied to freshly materialized tables.  On any failure
        nothing is written and the registry stays in management time.
        """
        with self._lock(True):
            m = self._manifest()
            if m.mode is not Mode.MANAGEMENT:
                raise NotManagingError("end-mgmt called outside management time")
            self._recover(m)
            objects = self._load_objects(m)
            for obj in objects.values():
                for dep in obj.needed:
                    if dep not in objects:
                        raise MissingDependencyError(dep, obj.name)

            new_epoch = m.epoch_id + 1
            dirty = {n for n, e in m.objects.items() if e.dirty}
            new_tables: dict[str, TableEntry] = {}
            staged: list[Path] = []
            for exe in sorted(n for n, o in objects.items() if o.is_executable):
                old_entry = m.tables.get(exe)
                old_table = self._load_table(exe, m) if old_entry else None
                rebuild = old_table is None or bool(transitive_closure(objects, exe) & dirty)
                if not rebuild:
                    rebuild = any(e.name in dirty or e.name not in objects for e in old_table.load_set)
                if rebuild:
                    try:
                        table = materialize(objects, exe, new_epoch, strategy)
                        for patch in m.patches.get(exe, []):
                            table = patch_table(table, patch, objects)
                        validate_table(table, None)
                    except StableLinkError as exc:
                        raise MaterializationFailedError(f"materializing {exe!r}: [{exc.code}] {exc}") from exc
                    materialized_epoch = new_epoch
                    log.info("materialized %s (%d items)", exe, len(table.items))
                else:
                    table = old_table.with_epoch(new_epoch)
                    materialized_epoch = old_entry.materialized_epoch
                data = serialize_table(table)
                staged.append(self._stage(self._table_path(exe), data))
                new_tables[exe] = TableEntry(new_epoch, materialized_epoch, fnv1a64(data), False)

            dropped = [exe for exe in m.tables if exe not in new_tables]
            m.tables = new_tables
            m.patches = {exe: ps for exe, ps in m.patches.items() if exe in new_tables}
            m.mode = Mode.EPOCH
            m.epoch_id = new_epoch
            m.fresh = False
            for e in m.objects.values():
                e.dirty = False
            self._commit(m, staged)
            for exe in dropped:
                self._table_path(exe).unlink(missing_ok=True)
        return self

    def apply_patch(self, exe: str, patch: Patch) -> "Registry":
        with self._lock(True):
            m = self._manifest()
            if m.mode is not Mode.MANAGEMENT:
                raise EpochLockedError("relocation tables can only be patched during management time")
            self._recover(m)
            objects = self._load_objects(m)
            table = patch_table(self._load_table(exe, m), patch, objects)
            data = serialize_table(table)
            staged = [self._stage(self._table_path(exe), data)]
            m.tables[exe].digest = fnv1a64(data)
            m.patches.setdefault(exe, []).append(patch)
            self._commit(m, staged)
        return self

    def clear_patches(self, exe: str) -> "Registry":
        """Forget recorded patches; the table is rebuilt at the next end-mgmt."""
        with self._lock(True):
            m = self._manifest()
            if m.mode is not Mode.MANAGEMENT:
                raise EpochLockedError("patches can only be cleared during management time")
            self._recover(m)
            if m.patches.pop(exe, None) and exe in m.tables:
                path = self._table_path(exe)
                del m.tables[exe]
                self._commit(m, [])
                path.unlink(missing_ok=True)
            else:
                self._commit(m, [])
        return self


# function-style aliases mirroring the operation names

def begin_mgmt(reg: Registry) -> Registry:
    return reg.begin_mgmt()


def update_obj(reg: Registry, obj: SharedObject) -> Registry:
    return reg.update_obj(obj)


def end_mgmt(reg: Registry) -> Registry:
    return reg.end_mgmt()


def status(reg: Registry) -> dict:
    return reg.status()
