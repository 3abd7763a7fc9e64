"""Exception hierarchy for the weaves runtime.

Every failure mode raised by the runtime derives from WeavesError so callers
can catch broadly; the CLI maps subtrees onto exit codes.
"""


class WeavesError(Exception):
    """Base class for all runtime errors."""


# --- composition / model errors -------------------------------------------

class DuplicateModuleError(WeavesError):
    pass


class InvalidDefinitionError(WeavesError):
    pass


class UnknownModuleError(WeavesError):
    pass


class UnknownBeadError(WeavesError):
    pass


class EmptyWeaveError(WeavesError):
    pass


class UnknownWeaveError(WeavesError):
    pass


class UnknownEntryError(WeavesError):
    pass


# --- namespace errors -------------------------------------------------------

class UnknownSymbolError(WeavesError):
    pass


class LateSharingError(WeavesError):
    pass


class UnknownFunctionError(WeavesError):
    pass


class SignatureMismatchError(WeavesError):
    pass


# --- scheduling errors -------------------------------------------------------

class AllBlockedError(WeavesError):
    """No string can be dispatched; carries the blocked string ids."""

    def __init__(self, blocked):
        super().__init__(f"no dispatchable string (blocked: {sorted(blocked)})")
        self.blocked = set(blocked)


class NotHolderError(WeavesError):
    pass


class DeadlockUnrecoverableError(WeavesError):
    pass


# --- checkpoint errors -------------------------------------------------------

class ScopeMidStepError(WeavesError):
    pass


class StaleCheckpointError(WeavesError):
    pass


class MissingCheckpointError(WeavesError):
    pass


class DoubleFreeError(WeavesError):
    pass


class UnknownAddressError(WeavesError):
    pass


class ReplayDivergenceError(WeavesError):
    """Recorded resumption history does not match re-execution."""


# --- recommender errors ------------------------------------------------------

class NoLegalActionError(WeavesError):
    pass


class NoFeasibleCompositionError(WeavesError):
    pass


class EmptyDatabaseError(WeavesError):
    pass


# --- grid errors -------------------------------------------------------------

class InvalidSplitError(WeavesError):
    pass


class UnknownChannelError(WeavesError):
    pass


class NotClosedError(WeavesError):
    def __init__(self, edge, msg=""):
        super().__init__(msg or f"island not closed: violating edge {edge}")
        self.edge = edge


class MissingModuleError(WeavesError):
    pass


class RegionOverflowError(WeavesError):
    pass


# --- application errors ------------------------------------------------------

class NoConvergenceError(WeavesError):
    pass


class BudgetExceededError(WeavesError):
    pass


class StepUnderflowError(WeavesError):
    pass


# --- config / monitor errors -------------------------------------------------

class ParseError(WeavesError):
    def __init__(self, line, col, expected):
        super().__init__(f"line {line}, col {col}: expected {expected}")
        self.line = line
        self.col = col
        self.expected = expected


class UnresolvedReferenceError(WeavesError):
    def __init__(self, name, line=None):
        loc = f" (line {line})" if line is not None else ""
        super().__init__(f"unresolved reference: {name}{loc}")
        self.name = name
        self.line = line


class UnknownQueryError(WeavesError):
    pass
