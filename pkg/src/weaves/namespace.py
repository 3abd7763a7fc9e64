"""Per-weave namespaces: context tables, function tables, tuple sharing.

A context table is the double-indirection layer (symbol -> table entry ->
cell). Each weave gets its own table; weaves sharing a bead point their
entries at the same cells, which realizes state recombination, while beads
of one module get distinct cells, which realizes state separation. Swapping
the active table is a single reference assignment, so namespace switching
cost does not depend on how many symbols a weave has.

Function bindings live in a per-weave function table folded into the same
namespace object family, so rebinding one weave's implementation of a name
never touches other weaves.
"""

import inspect
import logging

from .errors import (
    LateSharingError,
    SignatureMismatchError,
    UnknownFunctionError,
    UnknownSymbolError,
    UnknownWeaveError,
)

log = logging.getLogger("weaves")


class ContextTable:
    __slots__ = ("weave_id", "entries")

    def __init__(self, weave_id, entries):
        self.weave_id = weave_id
        self.entries = entries  # symbol -> DataCell

    def resolve(self, symbol):
        try:
            return self.entries[symbol]
        except KeyError:
            raise UnknownSymbolError(f"weave {self.weave_id} has no symbol {symbol!r}") from None

    def __repr__(self):
        return f"ContextTable(weave={self.weave_id}, symbols={len(self.entries)})"


class FunctionTable:
    __slots__ = ("weave_id", "bindings")

    def __init__(self, weave_id, bindings):
        self.weave_id = weave_id
        # name -> (bead_id, module_name, callable, arity)
        self.bindings = bindings

    def lookup(self, name):
        try:
            return self.bindings[name]
        except KeyError:
            raise UnknownFunctionError(f"weave {self.weave_id} binds no function {name!r}") from None


class TupleSpaceDecl:
    __slots__ = ("symbols", "bead_ids")

    def __init__(self, symbols, bead_ids):
        self.symbols = list(symbols)
        self.bead_ids = list(bead_ids)

    def __repr__(self):
        return f"TupleSpaceDecl(symbols={self.symbols}, beads={self.bead_ids})"


class ActiveContext:
    """The executor's current namespace; swap is one reference assignment."""

    __slots__ = ("current",)

    def __init__(self):
        self.current = None

    def activate(self, table):
        prev = self.current
        self.current = table
        return prev


def _arity(fn):
    try:
        params = inspect.signature(fn).parameters
    except (TypeError, ValueError):
        return -1
    n = 0
    for p in params.values():
        if p.kind in (p.POSITIONAL_ONLY, p.POSITIONAL_OR_KEYWORD):
            n += 1
        elif p.kind == p.VAR_POSITIONAL:
            return -1  # variadic: accept any call
    return n - 1  # first parameter is the context handle


def build_context_table(tapestry, weave_id) -> ContextTable:
    if weave_id not in tapestry.weaves:
        raise UnknownWeaveError(f"no weave {weave_id}")
    weave = tapestry.weaves[weave_id]
    entries = {}
    for bead_id in weave.bead_ids:
        bead = tapestry.beads[bead_id]
        for sym, cell in bead.cells.items():
            if sym in entries:
                log.warning(
                    "weave %s: symbol %r of bead %s shadows bead %s",
                    weave_id, sym, bead_id, entries[sym].owner_bead,
                )
            entries[sym] = cell
    return ContextTable(weave_id, entries)


def build_function_table(tapestry, weave_id) -> FunctionTable:
    if weave_id not in tapestry.weaves:
        raise UnknownWeaveError(f"no weave {weave_id}")
    weave = tapestry.weaves[weave_id]
    bindings = {}
    for bead_id in weave.bead_ids:  # later bead shadows earlier, as for symbols
        bead = tapestry.beads[bead_id]
        for name, fn in bead.module.exports.items():
            bindings[name] = (bead_id, bead.module.name, fn, _arity(fn))
    return FunctionTable(weave_id, bindings)


def share_tuple(tapestry, decl: TupleSpaceDecl):
    """Merge the declared symbols to one cell across the listed beads.

    Must run before any string has executed; the merged cell keeps the
    first-listed bead's value and address.
    """
    if tapestry.started:
        raise LateSharingError("tuple sharing must be declared before strings run")
    beads = [tapestry.beads[b] for b in decl.bead_ids]
    for sym in decl.symbols:
        for bead in beads:
            if sym not in bead.cells:
                raise UnknownSymbolError(
                    f"bead {bead.bead_id} ({bead.module.name}) declares no symbol {sym!r}"
                )
    for sym in decl.symbols:
        merged = beads[0].cells[sym]
        for bead in beads[1:]:
            orphan = bead.cells[sym]
            bead.cells[sym] = merged
            # repoint every table entry that referenced the orphan cell
            for table in tapestry.tables.values():
                if table.entries.get(sym) is orphan:
                    table.entries[sym] = merged
    tapestry.tuple_decls.append(decl)
    return decl


def rebind_function(tapestry, weave_id, name, module_name, fn_name):
    """Swap one weave's binding of `name` to module_name.fn_name.

    Takes effect at the next call boundary; invocations already in flight
    finish under the binding they resolved.
    """
    if weave_id not in tapestry.ftables:
        raise UnknownWeaveError(f"no weave {weave_id}")
    ftable = tapestry.ftables[weave_id]
    old = ftable.lookup(name)
    mdef = tapestry.module(module_name)
    try:
        fn = mdef.exports[fn_name]
    except KeyError:
        raise UnknownFunctionError(f"module {module_name!r} exports no {fn_name!r}") from None
    new_arity = _arity(fn)
    if old[3] != -1 and new_arity != -1 and old[3] != new_arity:
        raise SignatureMismatchError(
            f"{name!r}: bound arity {old[3]}, replacement {module_name}.{fn_name} takes {new_arity}"
        )
    ftable.bindings[name] = (old[0], module_name, fn, new_arity)


def insert_module_runtime(tapestry, mdef):
    """Register a module while the tapestry is running (or idle).

    Inserted modules behave exactly like ones registered before start; the
    registration interface is the same, this entry point exists so the
    monitor can queue insertions between dispatches.
    """
    return tapestry.register_module(mdef)
