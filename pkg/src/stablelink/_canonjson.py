"""Byte-exact equivalent of ``json.dumps(doc, indent=2, ensure_ascii=False)``.

The stdlib falls back to its pure-Python encoder whenever ``indent`` is set,
which dominates materialization and UUID cost on large objects.  Documents
here only hold dicts, lists, strings and ints, so a direct emitter suffices.
"""

from __future__ import annotations

from json.encoder import encode_basestring

_CONSTANTS = {True: "true", False: "false", None: "null"}


def _encode(value, indent: str) -> str:
    kind = type(value)
    if kind is str:
        return encode_basestring(value)
    if kind is int:
        return int.__repr__(value)
    if kind is dict:
        if not value:
            return "{}"
        inner = indent + "  "
        sep = ",\n" + inner
        body = sep.join(encode_basestring(k) + ": " + _encode(v, inner) for k, v in value.items())
        return "{\n" + inner + body + "\n" + indent + "}"
    if kind is list or kind is tuple:
        if not value:
            return "[]"
        inner = indent + "  "
        sep = ",\n" + inner
        return "[\n" + inner + sep.join(_encode(v, inner) for v in value) + "\n" + indent + "]"
    if value is True or value is False or value is None:
        return _CONSTANTS[value]
    if isinstance(value, str):
        return encode_basestring(value)
    if isinstance(value, int):
        return int.__repr__(value)
    raise TypeError(f"cannot encode {kind.__name__}")


def dumps(doc) -> str:
    return _encode(doc, "")
