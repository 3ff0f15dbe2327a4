"""Stable linking: materialized relocation tables in place of runtime symbol search."""

from .errors import StableLinkError
from .executor import AddressSpace, assign_bases, dynamic_load, normalize, replay
from .inspector import AbiTable, Patch, abi_table, export_table, query_abi_compat, query_cve
from .registry import Mode, Registry
from .resolver import (
    LoadOrder,
    LookupCost,
    ResolutionIndex,
    Strategy,
    build_index,
    compute_load_order,
    count_lookup_cost,
    lookup_symbol,
    materialize,
)
from .sof import (
    Kind,
    RelocInstruction,
    RelocType,
    SharedObject,
    SymbolDef,
    content_uuid,
    parse_sof,
    serialize_sof,
)
from .table import RelocationTable, RelocationTableItem, parse_table, serialize_table

__version__ = "0.1.0"
