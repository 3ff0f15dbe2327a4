"""Exception hierarchy shared by every stablelink module.

Each error carries a ``code`` naming the failure class so callers (and the
CLI) can dispatch on it without string matching.
"""


class StableLinkError(Exception):
    code = "ERROR"


class SofSyntaxError(StableLinkError):
    code = "SYNTAX"


class InvariantError(StableLinkError):
    code = "INVARIANT"

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class UuidCollisionError(StableLinkError):
    code = "UUID_COLLISION"


# registry / mode state machine
class AlreadyManagingError(StableLinkError):
    code = "ALREADY_MANAGING"


class NotManagingError(StableLinkError):
    code = "NOT_MANAGING"


class EpochLockedError(StableLinkError):
    code = "EPOCH_LOCKED"


class MissingDependencyError(StableLinkError):
    code = "MISSING_DEPENDENCY"

    def __init__(self, name, required_by=None):
        msg = f"needed object {name!r} is not in the registry"
        if required_by:
            msg += f" (required by {required_by!r})"
        super().__init__(msg)
        self.name = name
        self.required_by = required_by


class MaterializationFailedError(StableLinkError):
    code = "MATERIALIZATION_FAILED"


class UnknownObjectError(StableLinkError):
    code = "UNKNOWN_OBJECT"


class NoTableError(StableLinkError):
    code = "NO_TABLE"


class RegistryError(StableLinkError):
    code = "REGISTRY"


# resolution
class NotExecutableError(StableLinkError):
    code = "NOT_EXECUTABLE"


class UnresolvedSymbolError(StableLinkError):
    code = "UNRESOLVED"

    def __init__(self, symbol, requiring=None):
        msg = f"unresolved symbol {symbol!r}"
        if requiring:
            msg += f" required by {requiring!r}"
        super().__init__(msg)
        self.symbol = symbol
        self.requiring = requiring


class TableFormatError(StableLinkError):
    code = "TABLE_FORMAT"


# executor
class ExhaustedError(StableLinkError):
    code = "EXHAUSTED"


class UuidMismatchError(StableLinkError):
    code = "UUID_MISMATCH"


class BoundsError(StableLinkError):
    code = "BOUNDS"


class AmbiguousAddressError(StableLinkError):
    code = "AMBIGUOUS"


# inspector
class StaleTablesError(StableLinkError):
    code = "STALE_TABLES"


class SymbolNotExportedError(StableLinkError):
    code = "SYMBOL_NOT_EXPORTED"

    def __init__(self, provider, symbol):
        super().__init__(f"{provider!r} does not export {symbol!r}")
        self.provider = provider
        self.symbol = symbol


class NoMatchError(StableLinkError):
    code = "NO_MATCH"
