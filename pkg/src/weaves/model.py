"""Core domain types: modules, beads, weaves, strings, and the tapestry.

A module declares named global cells and functions. A bead instantiates a
module with a private copy of the globals (the data context) while sharing
the function objects (the code context). A weave picks a set of beads and
becomes a namespace over their cells; a string is a resumable flow of
control bound to one weave for its whole life. The tapestry is the composed
application: all of the above plus tuple-space declarations and per-weave
function bindings.

Construction operations run on the control path only (loader, monitor, CLI)
while no string is mid-step; they are not safe for concurrent callers.
"""

import logging

from . import codec
from . import namespace as _ns
from .checkpoint import AllocationTable, CheckpointManager
from .errors import (
    DuplicateModuleError,
    EmptyWeaveError,
    InvalidDefinitionError,
    UnknownBeadError,
    UnknownEntryError,
    UnknownModuleError,
    UnknownWeaveError,
)
from .regions import NodeRegion

log = logging.getLogger("weaves")

# string statuses
READY = "ready"
RUNNING = "running"
BLOCKED = "blocked"
FINISHED = "finished"
FAILED = "failed"


def validate_symbol(name) -> str:
    if not isinstance(name, str) or not name:
        raise InvalidDefinitionError(f"symbol name must be non-empty text, got {name!r}")
    if any(c.isspace() for c in name):
        raise InvalidDefinitionError(f"symbol name may not contain whitespace: {name!r}")
    return name


class DataCell:
    """One named global: an opaque byte payload at an abstract address."""

    __slots__ = ("cell_id", "value", "owner_bead", "region_address")

    def __init__(self, cell_id, value, owner_bead, region_address):
        self.cell_id = cell_id
        self.value = bytes(value)
        self.owner_bead = owner_bead
        self.region_address = region_address

    def __repr__(self):
        return f"DataCell(id={self.cell_id}, bead={self.owner_bead}, len={len(self.value)})"


class ModuleDef:
    """Declared shape of a module: globals, entry points, exported functions.

    entries and exports map names to callables taking a context handle.
    Instantiating the module never copies the callables (code context is
    shared); only the globals are copied per bead.
    """

    def __init__(self, name, globals_=(), entries=None, exports=None):
        self.name = name
        self.globals_ = [(sym, bytes(init)) for sym, init in globals_]
        self.entries = dict(entries or {})
        self.exports = dict(exports or {})

    def validate(self):
        if not isinstance(self.name, str) or not self.name or any(c.isspace() for c in self.name):
            raise InvalidDefinitionError(f"bad module name {self.name!r}")
        if not self.entries:
            raise InvalidDefinitionError(f"module {self.name!r} declares no entry points")
        seen = set()
        for sym, _ in self.globals_:
            validate_symbol(sym)
            if sym in seen:
                raise InvalidDefinitionError(f"module {self.name!r} declares symbol {sym!r} twice")
            seen.add(sym)

    def function(self, fn_name):
        try:
            return self.exports[fn_name]
        except KeyError:
            try:
                return self.entries[fn_name]
            except KeyError:
                raise UnknownEntryError(f"{self.name} has no function {fn_name!r}") from None


class Bead:
    """An instantiation of a module with its own data context."""

    __slots__ = ("bead_id", "module", "cells", "entry_count")

    def __init__(self, bead_id, module, cells):
        self.bead_id = bead_id
        self.module = module
        self.cells = cells  # symbol -> DataCell
        self.entry_count = 0  # live strings currently executing inside this bead

    def __repr__(self):
        return f"Bead(id={self.bead_id}, module={self.module.name})"


class Weave:
    __slots__ = ("weave_id", "bead_ids")

    def __init__(self, weave_id, bead_ids):
        self.weave_id = weave_id
        self.bead_ids = list(bead_ids)

    def __repr__(self):
        return f"Weave(id={self.weave_id}, beads={self.bead_ids})"


class StringTask:
    """A resumable flow of control bound to exactly one weave.

    The interaction log doubles as the resumption state: re-executing the
    entry while feeding recorded interaction results rebuilds the live
    Python frames up to any recorded instant (see scheduler.rebuild_string).
    """

    def __init__(self, string_id, weave_id, entry, entry_ref):
        self.string_id = string_id
        self.weave_id = weave_id
        self.entry = entry
        self.entry_ref = entry_ref
        self.status = READY
        self.shared_bead_depth = 0
        self.bead_stack = []  # bead ids, innermost last
        self.frame_copy = {}  # symbol -> bytes snapshot taken at spawn
        self.log = []  # completed interactions: (op, data)
        self.replay_limit = 0  # interactions served from the log, 0 = live
        self.replay_cursor = 0
        self.gen = None
        self.pending = None  # request yielded by gen, awaiting a response
        self.has_response = False
        self.response = None
        self.blocked_on = None  # ("lock", name) | ("recv", channel)
        self.call_count = 0  # completed cross-bead calls
        self.needs_rebuild = False  # frames must be replayed before next dispatch

    @property
    def replaying(self):
        return self.replay_cursor < self.replay_limit

    def __repr__(self):
        return f"StringTask(id={self.string_id}, weave={self.weave_id}, status={self.status})"


class Tapestry:
    """The composed application and its construction operations."""

    def __init__(self, region: NodeRegion | None = None, node_id: int = 0):
        self.node_id = node_id
        self.region = region if region is not None else NodeRegion.for_node(node_id)
        self.modules = {}  # name -> ModuleDef
        self.beads = {}  # id -> Bead
        self.weaves = {}  # id -> Weave
        self.strings = {}  # id -> StringTask
        self.tables = {}  # weave id -> namespace.ContextTable
        self.ftables = {}  # weave id -> namespace.FunctionTable
        self.tuple_decls = []
        self.addr_cells = {}  # cell id -> cell holding an address value
        self.allocs = AllocationTable(self.region)
        self.checkpoints = CheckpointManager(self)
        self.ext_functions = {}  # name -> host callable (integrands, rhs, ...)
        self.started = False  # set once the executor dispatches a step
        self.mid_step = False  # true only while the executor drives a string frame
        self.restore_epoch = 0  # bumped by checkpoint restores so schedulers refresh
        self._next_bead = 0
        self._next_weave = 0
        self._next_string = 0

    # --- module registration -------------------------------------------------

    def register_module(self, mdef: ModuleDef) -> ModuleDef:
        mdef.validate()
        if mdef.name in self.modules:
            raise DuplicateModuleError(f"module {mdef.name!r} already registered")
        self.modules[mdef.name] = mdef
        return mdef

    def module(self, name) -> ModuleDef:
        try:
            return self.modules[name]
        except KeyError:
            raise UnknownModuleError(f"no module {name!r}") from None

    def register_ext(self, name, fn):
        self.ext_functions[name] = fn

    # --- bead / weave construction --------------------------------------------

    def instantiate_bead(self, module_name) -> Bead:
        mdef = self.module(module_name)
        bead_id = self._next_bead
        self._next_bead += 1
        cells = {}
        for sym, init in mdef.globals_:
            addr = self.region.take(max(len(init), 1))
            cells[sym] = DataCell(self.allocs.next_cell_id(), init, bead_id, addr)
        bead = Bead(bead_id, mdef, cells)
        self.beads[bead_id] = bead
        return bead

    def define_weave(self, bead_ids) -> Weave:
        ids = list(bead_ids)
        if not ids:
            raise EmptyWeaveError("a weave needs at least one bead")
        if len(set(ids)) != len(ids):
            raise InvalidDefinitionError(f"duplicate bead ids in weave: {ids}")
        for b in ids:
            if b not in self.beads:
                raise UnknownBeadError(f"no bead {b}")
        weave = Weave(self._next_weave, ids)
        self._next_weave += 1
        self.weaves[weave.weave_id] = weave
        self.tables[weave.weave_id] = _ns.build_context_table(self, weave.weave_id)
        self.ftables[weave.weave_id] = _ns.build_function_table(self, weave.weave_id)
        return weave

    def weave(self, weave_id) -> Weave:
        try:
            return self.weaves[weave_id]
        except KeyError:
            raise UnknownWeaveError(f"no weave {weave_id}") from None

    def spawn_string(self, weave_id, entry) -> StringTask:
        weave = self.weave(weave_id)
        provider = None
        for bead_id in reversed(weave.bead_ids):  # later bead shadows earlier
            bead = self.beads[bead_id]
            if entry in bead.module.entries:
                provider = bead
                break
        if provider is None:
            raise UnknownEntryError(f"weave {weave_id} has no entry point {entry!r}")
        s = StringTask(self._next_string, weave_id, entry, f"{provider.module.name}.{entry}")
        self._next_string += 1
        # copy the weave's current global values into the string's context
        # frame record; creation cost therefore scales with payload size
        # (memoryview forces a real copy, plain bytes() would alias)
        table = self.tables[weave_id]
        s.frame_copy = {sym: bytes(memoryview(cell.value)) for sym, cell in table.entries.items()}
        s.bead_stack = [provider.bead_id]
        self.strings[s.string_id] = s
        return s

    # --- state access ----------------------------------------------------------

    def resolve(self, weave_id, symbol) -> DataCell:
        return self.tables[weave_id].resolve(symbol)

    def read_cell(self, cell: DataCell) -> bytes:
        return cell.value

    def write_cell(self, cell: DataCell, data, writer=None):
        self.checkpoints.record_write(cell, writer)
        cell.value = bytes(data)

    def alloc(self, bead_id, size, writer=None) -> int:
        return self.allocs.track_alloc(bead_id, size)

    def free(self, addr, writer=None):
        self.allocs.track_free(addr, self.checkpoints, writer)

    def mem_read(self, addr, offset=0, length=None) -> bytes:
        rec = self.allocs.live_record(addr)
        end = len(rec.buffer) if length is None else offset + length
        return bytes(rec.buffer[offset:end])

    def mem_write(self, addr, data, offset=0, writer=None):
        rec = self.allocs.live_record(addr)
        if offset + len(data) > rec.size:
            raise ValueError(f"write of {len(data)} at +{offset} overruns allocation of {rec.size}")
        self.checkpoints.record_mem_write(rec, writer)
        rec.buffer[offset : offset + len(data)] = data

    # --- typed helpers (cells hold uninterpreted bytes) -------------------------

    def get_int(self, weave_id, sym):
        return codec.dec_int(self.resolve(weave_id, sym).value)

    def set_int(self, weave_id, sym, v, writer=None):
        self.write_cell(self.resolve(weave_id, sym), codec.enc_int(v), writer)

    def get_float(self, weave_id, sym):
        return codec.dec_float(self.resolve(weave_id, sym).value)

    def set_float(self, weave_id, sym, v, writer=None):
        self.write_cell(self.resolve(weave_id, sym), codec.enc_float(v), writer)

    # --- introspection -----------------------------------------------------------

    def shared_bead_ids(self):
        """Beads that belong to more than one weave."""
        count = {}
        for weave in self.weaves.values():
            for b in weave.bead_ids:
                count[b] = count.get(b, 0) + 1
        return {b for b, n in count.items() if n > 1}

    def live_strings(self):
        return [s for s in self.strings.values() if s.status in (READY, RUNNING, BLOCKED)]
