"""Transparent checkpoint and rollback of tapestry state.

State lives in three places, all of them tracked: named cells (reached
through context tables), heap allocations (reached through the tracked
allocation table), and each string's resumption history. Because every
mutation flows through the tapestry's write paths, a checkpoint can either
copy everything eagerly (naive mode) or copy nothing and intercept first
writes per cell (cow mode), which bounds its memory to the data actually
modified afterwards.

Restore puts cells and allocation buffers back, garbage-collects
allocations made after the checkpoint, resurrects allocations freed after
it, rewinds the region cursor, and truncates each in-scope string's
interaction log to the recorded watermark so the scheduler can rebuild the
string's frames at exactly the checkpoint instant.

Checkpoint file layout (all integers little-endian):

    magic   "WVCK"
    version u32 (currently 1)
    then sections, each:  tag[4] u32-length payload
      "META"  counters: next bead/weave/string ids, region cursor, alloc seq
      "CELS"  one record per (bead, symbol): value + region address
      "ALOC"  allocation records incl. liveness and buffer contents
      "RESU"  per string: identity, status, watermark, interaction log
"""

import struct

from . import codec
from .errors import (
    DoubleFreeError,
    ScopeMidStepError,
    StaleCheckpointError,
    UnknownAddressError,
)

_U32 = struct.Struct("<I")

NAIVE = "naive"
COW = "cow"
TAPESTRY_SCOPE = "tapestry"

MAGIC = b"WVCK"
VERSION = 1


class AllocationRecord:
    __slots__ = ("sequence", "bead_id", "start", "size", "buffer", "live")

    def __init__(self, sequence, bead_id, start, size):
        self.sequence = sequence
        self.bead_id = bead_id
        self.start = start
        self.size = size
        self.buffer = bytearray(size)
        self.live = True

    def __repr__(self):
        state = "live" if self.live else "dead"
        return f"AllocationRecord(seq={self.sequence}, bead={self.bead_id}, start={self.start}, size={self.size}, {state})"


class AllocationTable:
    """Append-only record of every dynamic allocation, keyed by sequence."""

    def __init__(self, region):
        self.region = region
        self.records = {}  # sequence -> AllocationRecord
        self.by_addr = {}  # start -> live AllocationRecord
        self._all_by_addr = {}  # start -> AllocationRecord, survives frees
        self.sequence = 0
        self._cell_counter = 0

    def next_cell_id(self):
        self._cell_counter += 1
        return self._cell_counter

    def track_alloc(self, bead_id, size) -> int:
        if size <= 0:
            raise ValueError("allocation size must be positive")
        start = self.region.take(size)
        self.sequence += 1
        rec = AllocationRecord(self.sequence, bead_id, start, size)
        self.records[rec.sequence] = rec
        self.by_addr[start] = rec
        self._all_by_addr[start] = rec
        return start

    def track_free(self, addr, manager=None, writer=None):
        rec = self.by_addr.get(addr)
        if rec is None:
            if addr in self._all_by_addr:
                raise DoubleFreeError(f"address {addr} already freed")
            raise UnknownAddressError(f"address {addr} was never allocated")
        if manager is not None:
            manager.record_free(rec, writer)
        rec.live = False
        del self.by_addr[addr]

    def live_record(self, addr) -> AllocationRecord:
        rec = self.by_addr.get(addr)
        if rec is None:
            raise UnknownAddressError(f"no live allocation at {addr}")
        return rec

    def record_for(self, addr):
        """Live record whose [start, start+size) range contains addr, or None."""
        for rec in self.by_addr.values():
            if rec.start <= addr < rec.start + rec.size:
                return rec
        return None

    def live_bytes(self):
        return sum(rec.size for rec in self.by_addr.values())


class Checkpoint:
    def __init__(self, cp_id, scope, mode):
        self.cp_id = cp_id
        self.scope = scope  # TAPESTRY_SCOPE or a string id
        self.mode = mode
        self.alloc_watermark = 0
        self.region_cursor = 0
        self.frame_snapshot = {}  # cell_id -> (cell, bytes); eager, naive only
        self.write_log = {}  # cell_id -> (cell, bytes); lazy, cow only
        self.alloc_snapshot = {}  # sequence -> bytes; eager, naive only
        self.alloc_log = {}  # sequence -> bytes; lazy, cow only
        self.freed = {}  # sequence -> buffer bytes captured at free time
        self.resumption = {}  # string id -> (log watermark, status)
        self.structure_mark = None

    def __repr__(self):
        return f"Checkpoint(id={self.cp_id}, scope={self.scope}, mode={self.mode})"


class CheckpointManager:
    def __init__(self, tapestry):
        self.tapestry = tapestry
        self.live = {}  # id -> Checkpoint
        self._next_id = 0

    # --- scope helpers ---------------------------------------------------------

    def _scope_cells(self, scope):
        t = self.tapestry
        seen = {}
        if scope == TAPESTRY_SCOPE:
            for bead in t.beads.values():
                for cell in bead.cells.values():
                    seen[cell.cell_id] = cell
        else:
            s = t.strings[scope]
            for cell in t.tables[s.weave_id].entries.values():
                seen[cell.cell_id] = cell
        return seen

    def _covers(self, cp, writer):
        if cp.scope == TAPESTRY_SCOPE:
            return True
        # string-scoped checkpoints roll back only that string's own writes,
        # so concurrent strings' progress survives a victim rollback
        return writer == cp.scope

    # --- lifecycle ---------------------------------------------------------------

    def take(self, scope=TAPESTRY_SCOPE, mode=COW) -> Checkpoint:
        t = self.tapestry
        if getattr(t, "mid_step", False):
            raise ScopeMidStepError("checkpoint requested while a string is mid-step")
        if scope != TAPESTRY_SCOPE and scope not in t.strings:
            raise StaleCheckpointError(f"no string {scope}")
        cp = Checkpoint(self._next_id, scope, mode)
        self._next_id += 1
        cp.alloc_watermark = t.allocs.sequence
        cp.region_cursor = t.region.cursor
        cp.structure_mark = (len(t.beads), len(t.weaves), tuple(sorted(t.modules)))
        if mode == NAIVE:
            for cell_id, cell in self._scope_cells(scope).items():
                cp.frame_snapshot[cell_id] = (cell, bytes(cell.value))
            for seq, rec in t.allocs.records.items():
                if rec.live and seq <= cp.alloc_watermark:
                    cp.alloc_snapshot[seq] = bytes(rec.buffer)
        if scope == TAPESTRY_SCOPE:
            for s in t.strings.values():
                cp.resumption[s.string_id] = (len(s.log), s.status)
        else:
            s = t.strings[scope]
            cp.resumption[s.string_id] = (len(s.log), s.status)
        self.live[cp.cp_id] = cp
        return cp

    def drop(self, cp_id):
        self.live.pop(cp_id, None)

    def get(self, cp_id) -> Checkpoint:
        try:
            return self.live[cp_id]
        except KeyError:
            raise StaleCheckpointError(f"checkpoint {cp_id} is not live") from None

    # --- write interception --------------------------------------------------------

    def record_write(self, cell, writer=None):
        for cp in self.live.values():
            if cp.mode != COW or not self._covers(cp, writer):
                continue
            if cell.cell_id not in cp.write_log:
                cp.write_log[cell.cell_id] = (cell, bytes(cell.value))

    def record_mem_write(self, rec, writer=None):
        for cp in self.live.values():
            if cp.mode != COW or not self._covers(cp, writer):
                continue
            if rec.sequence <= cp.alloc_watermark and rec.sequence not in cp.alloc_log:
                cp.alloc_log[rec.sequence] = bytes(rec.buffer)

    def record_free(self, rec, writer=None):
        for cp in self.live.values():
            if not self._covers(cp, writer):
                continue
            if rec.sequence <= cp.alloc_watermark and rec.sequence not in cp.freed:
                cp.freed[rec.sequence] = bytes(rec.buffer)

    # --- restore -----------------------------------------------------------------

    def restore(self, cp: Checkpoint):
        """Put the tapestry back to the checkpoint instant; idempotent.

        Returns the ids of strings whose frames must be rebuilt before they
        run again (the scheduler replays their logs lazily).
        """
        t = self.tapestry
        if cp.cp_id not in self.live:
            raise StaleCheckpointError(f"checkpoint {cp.cp_id} is not live")
        mark = (len(t.beads), len(t.weaves), tuple(sorted(t.modules)))
        if cp.scope == TAPESTRY_SCOPE and mark != cp.structure_mark:
            raise StaleCheckpointError("tapestry structure changed since the checkpoint")
        for sid in cp.resumption:
            if sid not in t.strings:
                raise StaleCheckpointError(f"string {sid} destroyed since the checkpoint")

        # garbage-collect allocations made after the checkpoint; their
        # timeline is erased, so the sequence counter rewinds with them and
        # a re-execution reproduces the allocation table exactly
        for seq in sorted(t.allocs.records):
            if seq > cp.alloc_watermark:
                rec = t.allocs.records.pop(seq)
                rec.live = False
                t.allocs.by_addr.pop(rec.start, None)
                if t.allocs._all_by_addr.get(rec.start) is rec:
                    del t.allocs._all_by_addr[rec.start]
        t.allocs.sequence = cp.alloc_watermark
        # undo frees issued after the checkpoint on earlier allocations; the
        # free-time contents are provisional, pre-images below win over them
        for seq, buf in cp.freed.items():
            rec = t.allocs.records[seq]
            rec.live = True
            rec.buffer[:] = buf
            t.allocs.by_addr[rec.start] = rec

        if cp.mode == NAIVE:
            for cell, orig in cp.frame_snapshot.values():
                cell.value = orig
            for seq, buf in cp.alloc_snapshot.items():
                t.allocs.records[seq].buffer[:] = buf
        else:
            for cell, orig in cp.write_log.values():
                cell.value = orig
            for seq, buf in cp.alloc_log.items():
                t.allocs.records[seq].buffer[:] = buf
        t.region.cursor = cp.region_cursor

        rebuilt = []
        shared = t.shared_bead_ids()
        for sid, (watermark, status) in cp.resumption.items():
            s = t.strings[sid]
            # the string may be abandoned mid-call; put bead entry counts back
            # (each distinct call-entered bead was counted once per string)
            base = s.bead_stack[0] if s.bead_stack else None
            for bead_id in set(s.bead_stack[1:]) - {base}:
                if bead_id in shared and t.beads[bead_id].entry_count > 0:
                    t.beads[bead_id].entry_count -= 1
            s.log = s.log[:watermark]
            s.replay_limit = watermark
            s.replay_cursor = 0
            s.gen = None
            s.pending = None
            s.has_response = False
            s.response = None
            s.blocked_on = None
            s.shared_bead_depth = 0
            s.bead_stack = []
            s.needs_rebuild = status not in ("finished", "failed")
            s.status = "ready" if s.needs_rebuild else status
            rebuilt.append(sid)
        t.restore_epoch += 1
        return rebuilt


# --- checkpoint file serialization ---------------------------------------------


def _section(tag: bytes, payload: bytes) -> bytes:
    return tag + _U32.pack(len(payload)) + payload


def serialize_tapestry_state(tapestry, executor=None) -> bytes:
    t = tapestry
    meta = codec.dumps_value(
        (t._next_bead, t._next_weave, t._next_string, t.region.cursor, t.allocs.sequence, t.started)
    )

    cells = []
    for bead in t.beads.values():
        for sym, cell in bead.cells.items():
            cells.append((bead.bead_id, sym, cell.region_address, bytes(cell.value)))
    cels = codec.dumps_value(tuple(cells))

    allocs = []
    for seq in sorted(t.allocs.records):
        rec = t.allocs.records[seq]
        allocs.append((seq, rec.bead_id, rec.start, rec.size, rec.live, bytes(rec.buffer)))
    aloc = codec.dumps_value(tuple(allocs))

    strings = []
    for s in t.strings.values():
        strings.append(
            (s.string_id, s.weave_id, s.entry, s.entry_ref, s.status, len(s.log), tuple(s.log))
        )
    resu = codec.dumps_value(tuple(strings))

    out = bytearray()
    out += MAGIC
    out += _U32.pack(VERSION)
    out += _section(b"META", meta)
    out += _section(b"CELS", cels)
    out += _section(b"ALOC", aloc)
    out += _section(b"RESU", resu)
    if executor is not None:
        out += _section(b"SCHD", codec.dumps_value(executor.sched_state()))
    return bytes(out)


def parse_checkpoint_blob(blob: bytes) -> dict:
    if blob[:4] != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version = _U32.unpack_from(blob, 4)[0]
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 8
    sections = {}
    while pos < len(blob):
        tag = blob[pos : pos + 4]
        length = _U32.unpack_from(blob, pos + 4)[0]
        pos += 8
        sections[tag.decode("ascii")] = codec.loads_value(blob[pos : pos + length])
        pos += length
    return sections


def apply_tapestry_state(tapestry, blob: bytes):
    """Overlay serialized state onto a structurally identical tapestry.

    The caller composes the tapestry first (same modules, beads, weaves);
    this routine then restores values, the allocation table, and string
    resumption logs. Strings come back flagged for frame rebuild.
    """
    from .model import StringTask  # local import to avoid a cycle

    t = tapestry
    sections = parse_checkpoint_blob(blob)
    next_bead, next_weave, next_string, cursor, alloc_seq, started = sections["META"]

    for bead_id, sym, region_address, value in sections["CELS"]:
        cell = t.beads[bead_id].cells[sym]
        cell.value = value
        cell.region_address = region_address

    t.allocs.records.clear()
    t.allocs.by_addr.clear()
    t.allocs._all_by_addr.clear()
    for seq, bead_id, start, size, live, buffer in sections["ALOC"]:
        rec = AllocationRecord(seq, bead_id, start, size)
        rec.buffer[:] = buffer
        rec.live = live
        t.allocs.records[seq] = rec
        t.allocs._all_by_addr[start] = rec
        if live:
            t.allocs.by_addr[start] = rec
    t.allocs.sequence = alloc_seq

    t.strings.clear()
    for sid, weave_id, entry, entry_ref, status, watermark, log_entries in sections["RESU"]:
        s = StringTask(sid, weave_id, entry, entry_ref)
        s.status = status
        s.log = [tuple(e) for e in log_entries]
        s.replay_limit = watermark
        s.needs_rebuild = status not in ("finished", "failed")
        if s.needs_rebuild:
            s.status = "ready"
        t.strings[sid] = s

    t._next_bead = next_bead
    t._next_weave = next_weave
    t._next_string = next_string
    t.region.cursor = cursor
    t.started = started
    return t
