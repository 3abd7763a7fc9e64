"""Cooperative execution of strings with simulated preemption.

Strings are Python generator frames driven by a single executor. Every
`yield` in module code is a potential preemption point; the executor counts
a step per resumption and considers switching when the quantum expires.
Switching to a string of a different equivalence class is always allowed;
switching within a class is allowed only while the outgoing string is not
inside a shared bead, which keeps non-reentrant shared code safe without
inspecting the tapestry graph (the decision reads one depth counter and the
class map).

Every interaction a string has with the world outside its own frame (cell
reads/writes, cross-bead calls, locks, allocation, host functions,
messages) flows through its context handle and is appended to the string's
interaction log. The log is the string's resumption state: re-running the
entry function while feeding recorded results rebuilds the live frames at
any logged instant. Checkpoint restore, deadlock rollback, migration, and
file restore all reuse that one mechanism.

Lock acquisition transparently records (string, bead, lock) and takes a
copy-on-write checkpoint before holding, so a deadlock victim can be rolled
back to just before the acquisition that closed the cycle.
"""

import random

from . import codec
from . import namespace as _ns
from .checkpoint import COW
from .errors import (
    AllBlockedError,
    DeadlockUnrecoverableError,
    MissingCheckpointError,
    NotHolderError,
    ReplayDivergenceError,
    UnknownChannelError,
    WeavesError,
)
from .model import BLOCKED, FAILED, FINISHED, READY, RUNNING
from .namespace import ActiveContext

ROUND_ROBIN = "round_robin_classes"
SEEDED_RANDOM = "seeded_random"

# dispatch-loop outcomes for a handled request
_CONTINUE = 0
_SWITCH = 1
_BLOCKED = 2

_FINISHED = object()  # sentinel: the frame returned (distinct from a bare yield)


def compute_equivalence_classes(tapestry):
    """Partition live strings; two strings share a class iff their weaves
    are connected through shared beads (transitively)."""
    strings = sorted(s.string_id for s in tapestry.live_strings())
    parent = {sid: sid for sid in strings}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    by_bead = {}
    for sid in strings:
        weave = tapestry.weaves[tapestry.strings[sid].weave_id]
        for bead_id in weave.bead_ids:
            by_bead.setdefault(bead_id, []).append(sid)
    for members in by_bead.values():
        for other in members[1:]:
            union(members[0], other)

    groups = {}
    for sid in strings:
        groups.setdefault(find(sid), set()).add(sid)
    return sorted(groups.values(), key=min)


class LockRecord:
    __slots__ = ("name", "holder", "waiters")

    def __init__(self, name):
        self.name = name
        self.holder = None
        self.waiters = []

    def __repr__(self):
        return f"LockRecord({self.name!r}, holder={self.holder}, waiters={self.waiters})"


class WeaveContext:
    """Handle through which module code touches everything outside its frame.

    Synchronous operations serve from the interaction log while the string
    is replaying and record their results while it is live. Operations that
    may suspend the string are generators to be used with `yield from`.
    """

    __slots__ = ("executor", "string")

    def __init__(self, executor, string):
        self.executor = executor
        self.string = string

    # --- log core ---------------------------------------------------------------

    def _sync(self, op, live_fn):
        s = self.string
        if s.replay_cursor < s.replay_limit:
            entry = s.log[s.replay_cursor]
            if entry[0] != op:
                raise ReplayDivergenceError(
                    f"string {s.string_id}: log has {entry[0]!r} at {s.replay_cursor}, re-execution did {op!r}"
                )
            s.replay_cursor += 1
            return entry[1]
        result = live_fn()
        s.log.append((op, result))
        return result

    @property
    def _replaying(self):
        s = self.string
        return s.replay_cursor < s.replay_limit

    # --- cells ---------------------------------------------------------------------

    def get(self, symbol) -> bytes:
        ex = self.executor
        return self._sync("get", lambda: ex.tapestry.read_cell(ex.active.current.resolve(symbol)))

    def set(self, symbol, data: bytes):
        ex = self.executor
        s = self.string

        def write():
            ex.tapestry.write_cell(ex.active.current.resolve(symbol), data, writer=s.string_id)
            return None

        self._sync("set", write)

    def get_int(self, symbol):
        return codec.dec_int(self.get(symbol))

    def set_int(self, symbol, v):
        self.set(symbol, codec.enc_int(v))

    def get_float(self, symbol):
        return codec.dec_float(self.get(symbol))

    def set_float(self, symbol, v):
        self.set(symbol, codec.enc_float(v))

    def get_floats(self, symbol):
        return codec.dec_floats(self.get(symbol))

    def set_floats(self, symbol, vals):
        self.set(symbol, codec.enc_floats(vals))

    def get_addr(self, symbol):
        return codec.dec_addr(self.get(symbol))

    def set_addr(self, symbol, addr):
        ex = self.executor
        s = self.string

        def write():
            cell = ex.active.current.resolve(symbol)
            ex.tapestry.write_cell(cell, codec.enc_addr(addr), writer=s.string_id)
            ex.tapestry.addr_cells[cell.cell_id] = cell
            return None

        self._sync("set_addr", write)

    # --- heap -----------------------------------------------------------------------

    def alloc(self, size) -> int:
        ex = self.executor
        s = self.string
        # attribution goes to the bead whose function is executing, so an
        # allocation made inside a callee is charged to the callee's bead
        return self._sync("alloc", lambda: ex.tapestry.alloc(s.bead_stack[-1], size, writer=s.string_id))

    def free(self, addr):
        ex = self.executor
        s = self.string

        def do_free():
            ex.tapestry.free(addr, writer=s.string_id)
            return None

        self._sync("free", do_free)

    def mem_read(self, addr, offset=0, length=None) -> bytes:
        ex = self.executor
        return self._sync("mem_read", lambda: ex.tapestry.mem_read(addr, offset, length))

    def mem_write(self, addr, data, offset=0):
        ex = self.executor
        s = self.string

        def write():
            ex.tapestry.mem_write(addr, data, offset, writer=s.string_id)
            return None

        self._sync("mem_write", write)

    # --- host functions and the recommender ---------------------------------------------

    def ext(self, name, *args):
        ex = self.executor
        return self._sync("ext", lambda: ex.tapestry.ext_functions[name](*args))

    def recommend(self, features: tuple, actions: tuple) -> str:
        ex = self.executor
        return self._sync("recommend", lambda: ex.recommender.select(features, actions))

    def reward(self, features, action, value, next_features=None, next_actions=None):
        ex = self.executor

        def apply():
            ex.recommender.observe(features, action, value, next_features, next_actions)
            return None

        self._sync("reward", apply)

    # --- transport -------------------------------------------------------------------------

    def send(self, channel, payload: bytes):
        ex = self.executor

        def do_send():
            if ex.transport is None:
                raise UnknownChannelError("tapestry has no transport attached")
            ex.transport.send(channel, payload)
            return None

        self._sync("send", do_send)

    def recv(self, channel):
        resp = yield ("recv", channel)
        return resp

    # --- suspension points --------------------------------------------------------------------

    def call(self, name, *args):
        """Invoke a function through the weave's function table.

        Entering a bead that other weaves also contain counts shared-bead
        depth; leaving it back to depth zero relinquishes control so peers
        of the same class can run.
        """
        ex = self.executor
        s = self.string

        def resolve():
            bead_id, module_name, fn, _arity = ex.tapestry.ftables[s.weave_id].lookup(name)
            shared = bead_id in ex.shared_beads
            return (bead_id, module_name, name, shared)

        bead_id, module_name, fn_name, shared = self._sync("enter", resolve)
        fn = ex.tapestry.module(module_name).function(fn_name)
        ex._enter_bead(s, bead_id, shared)
        try:
            res = fn(self, *args)
            if hasattr(res, "__iter__") and hasattr(res, "send"):
                result = yield from res
            else:
                result = res
        finally:
            left_shared = ex._exit_bead(s, bead_id, shared)
        self._sync("exit", lambda: None)
        s.call_count += 1
        if left_shared:
            yield ("exit_shared",)
        return result

    def acquire(self, name):
        resp = yield ("acquire", name)
        return resp

    def release(self, name):
        ex = self.executor
        s = self.string

        def do_release():
            ex.release_lock(s.string_id, name)
            return name

        if self._replaying:
            self._sync("release", lambda: name)
            s._replay_held.discard(name)
        else:
            self._sync("release", do_release)

    def checkpoint(self, mode=COW, scope=None):
        resp = yield ("checkpoint", mode, scope)
        return resp

    def drop_checkpoint(self, cp_id):
        ex = self.executor

        def drop():
            ex.tapestry.checkpoints.drop(cp_id)
            return None

        self._sync("drop_cp", drop)

    def rollback(self, cp_id, state_key=None, action=None, tuple_view=None):
        """Restore the checkpoint and mark (state_key, action) as a failed
        path. Never returns: the string resumes at the checkpoint instant."""
        yield ("rollback", cp_id, state_key, action, tuple_view)
        raise ReplayDivergenceError("resumed past a rollback request")

    def rebind(self, name, module_name, fn_name):
        resp = yield ("rebind", name, module_name, fn_name)
        return resp

    @property
    def string_id(self):
        return self.string.string_id

    @property
    def weave_id(self):
        return self.string.weave_id


class Executor:
    """Single logical executor running one tapestry's strings."""

    def __init__(self, tapestry, policy=ROUND_ROBIN, seed=0, quantum=64,
                 recommender=None, transport=None, keep_trace=True):
        if policy not in (ROUND_ROBIN, SEEDED_RANDOM):
            raise WeavesError(f"unknown scheduling policy {policy!r}")
        self.tapestry = tapestry
        self.policy = policy
        self.rng = random.Random(seed)
        self.quantum = max(1, int(quantum))
        self.recommender = recommender
        self.transport = transport
        self.active = ActiveContext()
        self.locks = {}  # name -> LockRecord
        self.acquisition_history = []  # (string, bead, lock, checkpoint id)
        self._recovery_counts = {}  # (victim, lock) -> rollbacks performed
        self.step_count = 0
        self.trace = [] if keep_trace else None
        self.control_queue = []
        self.shared_beads = tapestry.shared_bead_ids()
        self.insider = {}  # class id -> string id currently inside a shared bead
        self._class_of = {}
        self._queues = {}  # class id -> list of ready string ids (fifo)
        self._ring = []
        self._ring_pos = 0
        self._structure_seen = None
        self._refresh_classes()

    # --- tracing -------------------------------------------------------------------

    def _emit(self, event, string_id, reason):
        if self.trace is not None:
            cls = self._class_of.get(string_id, -1)
            self.trace.append((self.step_count, event, string_id, cls, reason))

    def trace_lines(self):
        return [
            f"{step} {event} {sid} {cls} {reason}"
            for step, event, sid, cls, reason in (self.trace or [])
        ]

    # --- classes and queues -----------------------------------------------------------

    def _structure_key(self):
        t = self.tapestry
        return (len(t.strings), len(t.weaves), len(t.beads), len(t.tuple_decls),
                t.restore_epoch)

    def _refresh_classes(self):
        key = self._structure_key()
        if key == self._structure_seen:
            return
        self._structure_seen = key
        self.shared_beads = self.tapestry.shared_bead_ids()
        partition = compute_equivalence_classes(self.tapestry)
        old_of = self._class_of
        self._class_of = {}
        self._queues = {}
        for cls_id, members in enumerate(partition):
            for sid in sorted(members):
                self._class_of[sid] = cls_id
        for sid in sorted(self._class_of):
            s = self.tapestry.strings[sid]
            if s.status == READY:
                self._queues.setdefault(self._class_of[sid], []).append(sid)
        self._ring = sorted({cls for cls in self._class_of.values()})
        self._ring_pos = self._ring_pos % max(1, len(self._ring))
        self.insider = {
            self._class_of[sid]: sid
            for sid, s in self.tapestry.strings.items()
            if s.shared_bead_depth > 0 and sid in self._class_of
        }
        _ = old_of

    def classes(self):
        self._refresh_classes()
        return compute_equivalence_classes(self.tapestry)

    def _enqueue(self, sid):
        cls = self._class_of.get(sid)
        if cls is None:
            self._refresh_classes()
            cls = self._class_of[sid]
        q = self._queues.setdefault(cls, [])
        if sid not in q:
            q.append(sid)

    # --- bead entry bookkeeping ----------------------------------------------------------

    def _enter_bead(self, s, bead_id, shared):
        first_presence = bead_id not in s.bead_stack
        s.bead_stack.append(bead_id)
        if shared:
            if first_presence:
                bead = self.tapestry.beads[bead_id]
                bead.entry_count += 1
                if bead.entry_count > 1:
                    raise WeavesError(
                        f"shared bead {bead_id} entered by two strings at once"
                    )
            s.shared_bead_depth += 1
            if s.shared_bead_depth == 1 and not s.replaying:
                self.insider[self._class_of.get(s.string_id, -1)] = s.string_id

    def _exit_bead(self, s, bead_id, shared):
        s.bead_stack.pop()
        if not shared:
            return False
        if bead_id not in s.bead_stack:
            self.tapestry.beads[bead_id].entry_count -= 1
        s.shared_bead_depth -= 1
        if s.shared_bead_depth == 0:
            self.insider.pop(self._class_of.get(s.string_id, -1), None)
            return True
        return False

    # --- locks ------------------------------------------------------------------------------

    def lock(self, name) -> LockRecord:
        rec = self.locks.get(name)
        if rec is None:
            rec = self.locks[name] = LockRecord(name)
        return rec

    def release_lock(self, sid, name):
        rec = self.locks.get(name)
        if rec is None or rec.holder != sid:
            raise NotHolderError(f"string {sid} does not hold lock {name!r}")
        rec.holder = None
        self._grant_next(rec)

    def _grant_next(self, rec):
        while rec.waiters and rec.holder is None:
            nxt = rec.waiters.pop(0)
            s = self.tapestry.strings.get(nxt)
            if s is None or s.status != BLOCKED:
                continue
            rec.holder = nxt
            s.status = READY
            s.blocked_on = None
            s.has_response = True
            s.response = rec.name
            self._enqueue(nxt)
            self._emit("wake", nxt, f"lock:{rec.name}")

    def _release_all_locks(self, sid):
        for rec in self.locks.values():
            if rec.holder == sid:
                rec.holder = None
                self._grant_next(rec)
            if sid in rec.waiters:
                rec.waiters.remove(sid)

    def _reconcile_locks_after_restore(self, s):
        """Drop lock state the string no longer owns after a log truncation.

        Acquire and release log entries both carry the lock name, so the
        truncated log says exactly which locks were held at that instant.
        """
        held = set()
        for op, data in s.log:
            if op == "acquire":
                held.add(data)
            elif op == "release":
                held.discard(data)
        for rec in self.locks.values():
            if rec.holder == s.string_id and rec.name not in held:
                rec.holder = None
                self._grant_next(rec)
            if s.string_id in rec.waiters:
                rec.waiters.remove(s.string_id)

    # --- deadlock detection and recovery ---------------------------------------------------------

    def wait_graph(self):
        """waiter string -> (lock, holder string), derived from lock records."""
        edges = {}
        for rec in self.locks.values():
            if rec.holder is None:
                continue
            for w in rec.waiters:
                edges[w] = (rec.name, rec.holder)
        return edges

    def detect_deadlock(self):
        """Return one cycle as [(waiter, lock, holder), ...] or None."""
        edges = self.wait_graph()
        for start in sorted(edges):
            path = []
            seen = {}
            node = start
            while node in edges:
                if node in seen:
                    cycle = path[seen[node] :]
                    return cycle
                seen[node] = len(path)
                lock_name, holder = edges[node]
                path.append((node, lock_name, holder))
                node = holder
        return None

    def recover(self, cycle):
        """Roll the victim back to just before acquiring the lock that closes
        the cycle, withdraw its request, and requeue it."""
        victim = min(sid for sid, _, _ in cycle)
        victim_lock = None
        for waiter, lock_name, holder in cycle:
            if holder == victim:
                victim_lock = lock_name
                break
        if victim_lock is None:  # degenerate self-cycle
            victim_lock = cycle[0][1]
        count = self._recovery_counts.get((victim, victim_lock), 0) + 1
        self._recovery_counts[(victim, victim_lock)] = count
        if count > 3:
            raise DeadlockUnrecoverableError(
                f"string {victim} deadlocks on {victim_lock!r} after every rollback"
            )
        mark = None
        for i in range(len(self.acquisition_history) - 1, -1, -1):
            sid, _bead, lock_name, cid = self.acquisition_history[i]
            if sid == victim and lock_name == victim_lock:
                mark = i
                break
        if mark is None or self.acquisition_history[mark][3] not in self.tapestry.checkpoints.live:
            raise MissingCheckpointError(
                f"no acquisition checkpoint for string {victim} on lock {victim_lock!r}"
            )
        cp_id = self.acquisition_history[mark][3]
        cp = self.tapestry.checkpoints.get(cp_id)
        self._emit("recover", victim, f"rollback:{victim_lock}")
        s = self.tapestry.strings[victim]
        self.tapestry.checkpoints.restore(cp)
        # the rollback acquisition and everything the victim did after it
        # are undone; retire their history entries and checkpoints
        kept = []
        for i, h in enumerate(self.acquisition_history):
            if h[0] == victim and i >= mark:
                self.tapestry.checkpoints.drop(h[3])
            else:
                kept.append(h)
        self.acquisition_history = kept
        self._reconcile_locks_after_restore(s)
        self.insider.pop(self._class_of.get(victim, -1), None)
        self._enqueue(victim)
        return victim

    # --- control-path submissions -------------------------------------------------------------------

    def submit(self, fn):
        """Queue a callable to run at the next dispatch boundary."""
        self.control_queue.append(fn)

    def _drain_control(self):
        while self.control_queue:
            fn = self.control_queue.pop(0)
            fn(self)
        self._refresh_classes()
        self._poll_transport()

    def _poll_transport(self):
        """Wake strings whose awaited channel now has a deliverable message;
        the parked recv request is re-issued when the string is dispatched."""
        if self.transport is None:
            return
        for s in self.tapestry.strings.values():
            if s.status == BLOCKED and s.blocked_on and s.blocked_on[0] == "recv":
                if self.transport.has_ready(s.blocked_on[1]):
                    s.status = READY
                    s.blocked_on = None
                    self._enqueue(s.string_id)
                    self._emit("wake", s.string_id, f"recv:{s.pending[1]}")

    # --- string frame management -------------------------------------------------------------------

    def _build_gen(self, s):
        module_name, entry = s.entry_ref.rsplit(".", 1)
        fn = self.tapestry.module(module_name).entries[entry]
        ctx = WeaveContext(self, s)
        res = fn(ctx)
        if not (hasattr(res, "__iter__") and hasattr(res, "send")):
            # plain function: wrap as an immediately finished frame
            def _done():
                return res
                yield  # pragma: no cover

            res = _done()
        s.gen = res

    def rebuild_string(self, s):
        """Re-execute the entry, feeding recorded results, until the log
        watermark is consumed; leaves the string parked at that instant."""
        weave = self.tapestry.weaves[s.weave_id]
        provider = None
        module_name = s.entry_ref.rsplit(".", 1)[0]
        for bead_id in reversed(weave.bead_ids):
            if self.tapestry.beads[bead_id].module.name == module_name:
                provider = bead_id
                break
        s.bead_stack = [provider if provider is not None else weave.bead_ids[-1]]
        s.shared_bead_depth = 0
        s.replay_cursor = 0
        s._replay_held = set()
        s.needs_rebuild = False
        s.gen = None
        s.pending = None
        s.has_response = False
        if s.replay_limit == 0:
            return
        prev = self.active.activate(self.tapestry.tables[s.weave_id])
        try:
            self._build_gen(s)
            try:
                req = next(s.gen)
            except StopIteration:
                raise ReplayDivergenceError(f"string {s.string_id} finished before its watermark")
            while s.replay_cursor < s.replay_limit:
                entry = s.log[s.replay_cursor]
                op = req[0] if isinstance(req, tuple) else "step"
                if entry[0] != op:
                    raise ReplayDivergenceError(
                        f"string {s.string_id}: log has {entry[0]!r} at {s.replay_cursor}, frame yielded {op!r}"
                    )
                s.replay_cursor += 1
                if op == "acquire":
                    s._replay_held.add(req[1])
                try:
                    req = s.gen.send(entry[1])
                except StopIteration:
                    if s.replay_cursor < s.replay_limit:
                        raise ReplayDivergenceError(
                            f"string {s.string_id} finished before its watermark"
                        )
                    s.status = FINISHED
                    s.gen = None
                    return
            s.pending = req if req is not None else ("step",)
            s.has_response = False
        finally:
            self.active.activate(prev)
        # adopt derived state: locks still held at the watermark, bead nesting
        for name in s._replay_held:
            rec = self.lock(name)
            if rec.holder not in (None, s.string_id):
                raise ReplayDivergenceError(
                    f"lock {name!r} held by {rec.holder} but replay of {s.string_id} also holds it"
                )
            rec.holder = s.string_id
        s._replay_held = set()
        if s.shared_bead_depth > 0:
            self.insider[self._class_of.get(s.string_id, -1)] = s.string_id

    # --- dispatch ------------------------------------------------------------------------------------

    def _dispatchable(self, sid):
        s = self.tapestry.strings[sid]
        if s.status != READY:
            return False
        ins = self.insider.get(self._class_of.get(sid))
        return ins is None or ins == sid

    def _candidates(self):
        out = []
        for cls in self._ring:
            ins = self.insider.get(cls)
            if ins is not None:
                if self.tapestry.strings[ins].status == READY:
                    out.append(ins)
                continue
            for sid in self._queues.get(cls, []):
                if self.tapestry.strings[sid].status == READY:
                    out.append(sid)
                    break
        return out

    def _pick_next(self):
        self._refresh_classes()
        if not self._ring:
            return None
        if self.policy == SEEDED_RANDOM:
            cands = self._candidates()
            if not cands:
                return None
            sid = self.rng.choice(sorted(cands))
            q = self._queues.get(self._class_of[sid])
            if q and sid in q:
                q.remove(sid)
            self._ring_pos = (self._ring.index(self._class_of[sid]) + 1) % len(self._ring)
            return sid
        n = len(self._ring)
        for i in range(n):
            cls = self._ring[(self._ring_pos + i) % n]
            ins = self.insider.get(cls)
            if ins is not None:
                if self.tapestry.strings[ins].status == READY:
                    self._ring_pos = (self._ring_pos + i + 1) % n
                    q = self._queues.get(cls)
                    if q and ins in q:
                        q.remove(ins)
                    return ins
                continue
            q = self._queues.get(cls)
            while q:
                sid = q[0]
                if self.tapestry.strings[sid].status == READY:
                    q.pop(0)
                    self._ring_pos = (self._ring_pos + i + 1) % n
                    return sid
                q.pop(0)
        return None

    def _advance(self, s):
        """Resume the string's frame once; returns the next request, or the
        finished sentinel when the frame returned."""
        t = self.tapestry
        t.started = True
        t.mid_step = True
        self.step_count += 1
        try:
            if s.gen is None:
                self._build_gen(s)
                return next(s.gen)
            resp = s.response
            s.response = None
            s.has_response = False
            s.log.append((s.pending[0], resp))
            return s.gen.send(resp)
        except StopIteration:
            return _FINISHED
        finally:
            t.mid_step = False

    def _handle(self, s, req):
        """Apply one yielded request. Returns a dispatch-loop action."""
        if req is None:
            req = ("step",)
        s.pending = req
        op = req[0]

        if op == "step":
            s.response = None
            s.has_response = True
            return _CONTINUE

        if op == "exit_shared":
            s.response = None
            s.has_response = True
            cls = self._class_of.get(s.string_id)
            peers = [sid for sid in self._queues.get(cls, []) if sid != s.string_id]
            if peers:
                return _SWITCH
            return _CONTINUE

        if op == "acquire":
            name = req[1]
            rec = self.lock(name)
            cp = self.tapestry.checkpoints.take(scope=s.string_id, mode=COW)
            self.acquisition_history.append((s.string_id, s.bead_stack[-1], name, cp.cp_id))
            if rec.holder is None:
                rec.holder = s.string_id
                s.response = name
                s.has_response = True
                return _CONTINUE
            rec.waiters.append(s.string_id)
            s.status = BLOCKED
            s.blocked_on = ("lock", name)
            self._emit("block", s.string_id, f"lock:{name}")
            return _BLOCKED

        if op == "recv":
            channel = req[1]
            if self.transport is None:
                raise UnknownChannelError("tapestry has no transport attached")
            payload = self.transport.try_recv(channel)
            if payload is not None:
                s.response = payload
                s.has_response = True
                return _CONTINUE
            s.status = BLOCKED
            s.blocked_on = ("recv", channel)
            self._emit("block", s.string_id, f"recv:{channel}")
            return _BLOCKED

        if op == "checkpoint":
            mode, scope = req[1], req[2]
            cp = self.tapestry.checkpoints.take(
                scope=s.string_id if scope is None else scope, mode=mode
            )
            self._emit("checkpoint", s.string_id, f"cp:{cp.cp_id}")
            s.response = cp.cp_id
            s.has_response = True
            return _CONTINUE

        if op == "rollback":
            _, cp_id, state_key, action, tuple_view = req
            if self.recommender is not None and state_key is not None:
                self.recommender.prune(state_key, action, tuple_view)
            cp = self.tapestry.checkpoints.get(cp_id)
            self.tapestry.checkpoints.restore(cp)
            self.tapestry.checkpoints.drop(cp_id)
            self._reconcile_locks_after_restore(s)
            self.insider.pop(self._class_of.get(s.string_id, -1), None)
            self._emit("restore", s.string_id, f"cp:{cp_id}")
            s.status = READY
            self._enqueue(s.string_id)
            return _SWITCH

        if op == "rebind":
            _, name, module_name, fn_name = req
            _ns.rebind_function(self.tapestry, s.weave_id, name, module_name, fn_name)
            self._emit("rebind", s.string_id, f"{name}->{module_name}.{fn_name}")
            s.response = None
            s.has_response = True
            return _CONTINUE

        raise WeavesError(f"string {s.string_id} yielded unknown request {req!r}")

    def _dispatch(self, s):
        if s.needs_rebuild:
            self.rebuild_string(s)
            if s.status == FINISHED:
                self._emit("finish", s.string_id, "replay")
                return
        prev = self.active.activate(self.tapestry.tables[s.weave_id])
        s.status = RUNNING
        self._emit("dispatch", s.string_id, self.policy)
        steps = 0
        try:
            while True:
                if s.pending is not None and not s.has_response:
                    # request parked by a rebuild: handle it before advancing
                    req = s.pending
                else:
                    try:
                        req = self._advance(s)
                    except Exception:
                        s.status = FAILED
                        s.gen = None
                        self._release_all_locks(s.string_id)
                        self._emit("fail", s.string_id, "error")
                        raise
                    if req is _FINISHED:
                        s.status = FINISHED
                        s.gen = None
                        self._release_all_locks(s.string_id)
                        self._emit("finish", s.string_id, "return")
                        return
                try:
                    action = self._handle(s, req)
                except Exception:
                    s.status = FAILED
                    s.gen = None
                    self._release_all_locks(s.string_id)
                    self._emit("fail", s.string_id, "request-error")
                    raise
                if action == _BLOCKED:
                    return
                if action == _SWITCH:
                    if s.status == RUNNING:
                        s.status = READY
                        self._enqueue(s.string_id)
                    self._emit("preempt", s.string_id, "continuation")
                    return
                steps += 1
                if steps >= self.quantum:
                    s.status = READY
                    self._enqueue(s.string_id)
                    self._emit("preempt", s.string_id, "quantum")
                    return
        finally:
            self.active.activate(prev)

    # --- scheduler state transfer -------------------------------------------------------------------

    def sched_state(self):
        """Snapshot of dispatch order state, so a rebuilt executor resumes
        with the same interleaving decisions."""
        self._refresh_classes()
        rng_state = self.rng.getstate()
        queues = tuple((cls, tuple(q)) for cls, q in sorted(self._queues.items()))
        return (self._ring_pos, queues, (rng_state[0], tuple(rng_state[1]), rng_state[2]))

    def restore_sched_state(self, state):
        ring_pos, queues, rng_state = state
        self._refresh_classes()
        self._ring_pos = ring_pos % max(1, len(self._ring))
        restored = {cls: list(q) for cls, q in queues}
        for cls, q in self._queues.items():
            if cls in restored:
                known = restored[cls]
                self._queues[cls] = [sid for sid in known if sid in q] + [
                    sid for sid in q if sid not in known
                ]
        self.rng.setstate((rng_state[0], tuple(rng_state[1]), rng_state[2]))

    # --- top-level driving -----------------------------------------------------------------------------

    def run_slice(self, max_dispatches=None):
        """Dispatch until nothing is runnable; returns dispatch count."""
        done = 0
        while max_dispatches is None or done < max_dispatches:
            self._drain_control()
            sid = self._pick_next()
            if sid is None:
                break
            self._dispatch(self.tapestry.strings[sid])
            done += 1
        return done

    def run(self, max_dispatches=None, recover_deadlocks=True):
        """Run to completion, transparently recovering single-cycle deadlocks."""
        total = 0
        while True:
            budget = None if max_dispatches is None else max_dispatches - total
            if budget is not None and budget <= 0:
                return total
            done = self.run_slice(budget)
            total += done
            live = self.tapestry.live_strings()
            if not live:
                return total
            blocked = [s.string_id for s in live if s.status == BLOCKED]
            if done == 0 or all(s.status == BLOCKED for s in live):
                if not recover_deadlocks:
                    raise AllBlockedError(blocked)
                cycle = self.detect_deadlock()
                if cycle is None:
                    if any(s.blocked_on and s.blocked_on[0] == "recv" for s in live):
                        return total  # waiting on the network; caller drives ticks
                    raise DeadlockUnrecoverableError(
                        f"strings blocked with no lock cycle: {sorted(blocked)}"
                    )
                self._emit("deadlock", cycle[0][0], "cycle:" + ",".join(str(c[0]) for c in cycle))
                self.recover(cycle)


def run(tapestry, policy=ROUND_ROBIN, seed=0, quantum=64, recommender=None, transport=None):
    """Convenience: build an executor, run to completion, return it."""
    ex = Executor(tapestry, policy=policy, seed=seed, quantum=quantum,
                  recommender=recommender, transport=transport)
    ex.run()
    return ex
