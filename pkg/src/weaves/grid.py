"""Simulated grid substrate: nodes, reliable transport, migration.

Each virtual node owns a disjoint slice of the abstract address space and
hosts one tapestry with its own executor. A discrete-tick network carries
messages between nodes with seeded loss; a thin reliability layer (per
channel sequence numbers, cumulative acks, interval-timed retransmission)
turns that into exactly-once in-order delivery.

Checkpoints here are partially consistent on purpose: they capture every
node's tapestry and the transport *endpoint* state (sequence counters,
unacked buffers, timer progress) and drop everything in flight. The
reliability layer recovers the dropped messages after a restore, so a
restored run reaches the same final application state as an uninterrupted
one. Loss decisions hash (seed, kind, channel, seq, attempt), never a
shared random stream, so runs stay reproducible no matter how transmissions
interleave.

Islands are closed bead subgraphs (no weave and no tracked allocation
reference crosses the boundary). Migrating one moves its cells,
allocations, and string resumption logs to another node; addresses are
preserved because node regions never overlap, so address-valued data stays
valid with no rewriting.
"""

import hashlib
import struct

from . import codec
from .checkpoint import (
    AllocationRecord,
    apply_tapestry_state,
    parse_checkpoint_blob,
    serialize_tapestry_state,
)
from .errors import (
    MissingModuleError,
    NotClosedError,
    RegionOverflowError,
    UnknownChannelError,
    WeavesError,
)
from .model import StringTask, Tapestry
from .regions import DEFAULT_TOTAL_BITS, DEFAULT_VM_BITS, NodeRegion, partition_address_space
from .scheduler import Executor

__all__ = [
    "Channel",
    "GridCheckpoint",
    "GridSim",
    "Island",
    "identify_islands",
    "migrate_island",
    "partition_address_space",
]

_U32 = struct.Struct("<I")
GRID_MAGIC = b"WVGD"
GRID_VERSION = 1


class Channel:
    __slots__ = ("cid", "src", "dst")

    def __init__(self, cid, src, dst):
        self.cid = cid
        self.src = src
        self.dst = dst


class SenderState:
    def __init__(self):
        self.next_seq = 1
        self.unacked = {}  # seq -> [payload, attempts]
        self.pending = []  # (seq, payload) waiting for window space
        self.timer = 0  # ticks since last (re)transmission burst

    def state(self):
        return (
            self.next_seq,
            tuple((seq, payload, attempts) for seq, (payload, attempts) in sorted(self.unacked.items())),
            tuple(self.pending),
            self.timer,
        )

    @classmethod
    def from_state(cls, data):
        s = cls()
        s.next_seq, unacked, pending, s.timer = data
        s.unacked = {seq: [payload, attempts] for seq, payload, attempts in unacked}
        s.pending = [tuple(p) for p in pending]
        return s


class ReceiverState:
    def __init__(self):
        self.expected = 1
        self.out_of_order = {}  # seq -> payload
        self.ready = []  # in-order payloads awaiting recv()
        self.acks_sent = 0  # makes every ack transmission hash differently

    def state(self):
        return (
            self.expected,
            tuple(sorted(self.out_of_order.items())),
            tuple(self.ready),
            self.acks_sent,
        )

    @classmethod
    def from_state(cls, data):
        r = cls()
        r.expected, oob, ready, r.acks_sent = data
        r.out_of_order = dict(oob)
        r.ready = list(ready)
        return r


class NodeTransport:
    """Per-node endpoint view handed to that node's executor."""

    def __init__(self, sim, node_id):
        self.sim = sim
        self.node_id = node_id

    def send(self, cid, payload):
        chan = self.sim.channel(cid)
        if chan.src != self.node_id:
            raise UnknownChannelError(f"channel {cid!r} does not originate at node {self.node_id}")
        self.sim._send(chan, payload)

    def try_recv(self, cid):
        chan = self.sim.channel(cid)
        if chan.dst != self.node_id:
            raise UnknownChannelError(f"channel {cid!r} does not terminate at node {self.node_id}")
        rx = self.sim.receivers[cid]
        if rx.ready:
            return rx.ready.pop(0)
        return None

    def has_ready(self, cid):
        rx = self.sim.receivers.get(cid)
        return bool(rx and rx.ready)


class GridNode:
    def __init__(self, node_id, region, policy, quantum, seed):
        self.node_id = node_id
        self.region = region
        self.tapestry = Tapestry(region=region, node_id=node_id)
        self.executor = None
        self._policy = policy
        self._quantum = quantum
        self._seed = seed
        self.alive = True

    def attach_executor(self, transport, recommender=None):
        self.executor = Executor(
            self.tapestry,
            policy=self._policy,
            quantum=self._quantum,
            seed=self._seed,
            transport=transport,
            recommender=recommender,
        )


class GridSim:
    def __init__(self, total_bits=DEFAULT_TOTAL_BITS, vm_bits=DEFAULT_VM_BITS,
                 loss=0.0, seed=0, delay=1, retransmit_interval=8, window=32,
                 policy="round_robin_classes", quantum=8, node_slice=4,
                 region_group_size=None):
        self.per_node_bytes, self.max_nodes = partition_address_space(total_bits, vm_bits)
        self.total_bits = total_bits
        self.vm_bits = vm_bits
        self.loss = loss
        self.seed = seed
        self.delay = max(1, delay)
        self.retransmit_interval = retransmit_interval
        self.window = window
        self.policy = policy
        self.quantum = quantum
        self.node_slice = node_slice
        self.region_group_size = region_group_size
        self.tick = 0
        self.nodes = {}
        self.channels = {}
        self.senders = {}  # cid -> SenderState
        self.receivers = {}  # cid -> ReceiverState
        self.in_flight = []  # (deliver_tick, kind, cid, seq, payload, attempt)
        self.events = []  # (tick, fn) run at tick start
        self.composers = {}  # node id -> callable(tapestry) rebuilding the composition
        self.dropped = 0
        self.delivered = 0

    # --- topology ----------------------------------------------------------------

    def add_node(self, node_id=None, composer=None):
        node_id = len(self.nodes) if node_id is None else node_id
        if node_id >= self.max_nodes:
            raise RegionOverflowError(f"node {node_id} exceeds the {self.max_nodes}-node split")
        region = NodeRegion.for_node(node_id, self.total_bits, self.vm_bits)
        node = GridNode(node_id, region, self.policy, self.quantum, self.seed + node_id)
        self.nodes[node_id] = node
        node.attach_executor(NodeTransport(self, node_id))
        if composer is not None:
            self.composers[node_id] = composer
            composer(node.tapestry)
        return node

    def add_channel(self, cid, src, dst):
        self.channels[cid] = Channel(cid, src, dst)
        self.senders[cid] = SenderState()
        self.receivers[cid] = ReceiverState()

    def channel(self, cid):
        try:
            return self.channels[cid]
        except KeyError:
            raise UnknownChannelError(f"no channel {cid!r}") from None

    def at_tick(self, tick, fn):
        self.events.append((tick, fn))
        self.events.sort(key=lambda e: e[0])

    def kill_node(self, node_id):
        self.nodes[node_id].alive = False

    # --- unreliable wire ------------------------------------------------------------

    def _drops(self, kind, cid, seq, attempt):
        if self.loss <= 0:
            return False
        key = f"{self.seed}|{kind}|{cid}|{seq}|{attempt}".encode()
        h = int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")
        return (h / 2**64) < self.loss

    def _transmit(self, kind, cid, seq, payload, attempt):
        if self._drops(kind, cid, seq, attempt):
            self.dropped += 1
            return
        self.in_flight.append((self.tick + self.delay, kind, cid, seq, payload, attempt))

    def _send(self, chan, payload):
        tx = self.senders[chan.cid]
        seq = tx.next_seq
        tx.next_seq += 1
        if len(tx.unacked) < self.window:
            tx.unacked[seq] = [payload, 1]
            self._transmit("data", chan.cid, seq, payload, 1)
        else:
            tx.pending.append((seq, payload))

    def _on_ack(self, cid, cum):
        tx = self.senders[cid]
        before = len(tx.unacked)
        for seq in [s for s in tx.unacked if s <= cum]:
            del tx.unacked[seq]
        if len(tx.unacked) < before:
            tx.timer = 0
        while tx.pending and len(tx.unacked) < self.window:
            seq, payload = tx.pending.pop(0)
            tx.unacked[seq] = [payload, 1]
            self._transmit("data", cid, seq, payload, 1)

    def _on_data(self, cid, seq, payload):
        rx = self.receivers[cid]
        if seq == rx.expected:
            rx.ready.append(payload)
            rx.expected += 1
            while rx.expected in rx.out_of_order:
                rx.ready.append(rx.out_of_order.pop(rx.expected))
                rx.expected += 1
            self.delivered += 1
        elif seq > rx.expected and seq not in rx.out_of_order:
            if seq - rx.expected < self.window:
                rx.out_of_order[seq] = payload
        # duplicates and stale packets fall through to the (re-)ack below
        rx.acks_sent += 1
        self._transmit("ack", cid, rx.expected - 1, b"", rx.acks_sent)

    def deliver_step(self):
        """Advance the wire one tick: deliveries, then retransmission timers."""
        now = self.tick
        arriving = [m for m in self.in_flight if m[0] <= now]
        self.in_flight = [m for m in self.in_flight if m[0] > now]
        for _, kind, cid, seq, payload, attempt in arriving:
            chan = self.channels.get(cid)
            if chan is None:
                continue
            target = chan.dst if kind == "data" else chan.src
            if not self.nodes[target].alive:
                continue
            if kind == "data":
                self._on_data(cid, seq, payload)
            else:
                self._on_ack(cid, seq)
        for cid, tx in self.senders.items():
            if not tx.unacked:
                tx.timer = 0
                continue
            if not self.nodes[self.channels[cid].src].alive:
                continue
            tx.timer += 1
            if tx.timer >= self.retransmit_interval:
                tx.timer = 0
                for seq in sorted(tx.unacked):
                    payload, attempts = tx.unacked[seq]
                    tx.unacked[seq][1] = attempts + 1
                    self._transmit("data", cid, seq, payload, attempts + 1)

    # --- main loop -----------------------------------------------------------------

    def _channel_alive(self, cid):
        chan = self.channels[cid]
        return self.nodes[chan.src].alive and self.nodes[chan.dst].alive

    def _orphaned(self, s):
        # a string waiting on a channel whose peer died can never proceed;
        # recovery is a checkpoint restore, not further ticking
        return (
            s.status == "blocked"
            and s.blocked_on
            and s.blocked_on[0] == "recv"
            and s.blocked_on[1] in self.channels
            and not self._channel_alive(s.blocked_on[1])
        )

    def all_finished(self):
        for node in self.nodes.values():
            if not node.alive:
                continue
            for s in node.tapestry.live_strings():
                if not self._orphaned(s):
                    return False
        return True

    def step_tick(self):
        while self.events and self.events[0][0] <= self.tick:
            _, fn = self.events.pop(0)
            fn(self)
        for node_id in sorted(self.nodes):
            node = self.nodes[node_id]
            if not node.alive:
                continue
            node.executor.run_slice(max_dispatches=self.node_slice)
        self.deliver_step()
        self.tick += 1

    def run(self, max_ticks=100_000):
        while self.tick < max_ticks:
            self.step_tick()
            # channels with a dead endpoint can never drain; they do not
            # block completion of the surviving nodes
            if self.all_finished() and not self.in_flight and not any(
                tx.unacked for cid, tx in self.senders.items() if self._channel_alive(cid)
            ):
                return self.tick
        raise WeavesError(f"grid run did not finish within {max_ticks} ticks")

    # --- partial-consistency checkpoint ----------------------------------------------

    def partial_checkpoint(self, node_ids=None):
        """Capture node tapestries and transport endpoints; in-flight
        messages are deliberately not part of the picture."""
        node_ids = sorted(self.nodes) if node_ids is None else sorted(node_ids)
        per_node = {}
        for nid in node_ids:
            node = self.nodes[nid]
            marks = tuple(
                (cell.owner_bead,
                 next(sym for sym, c in node.tapestry.beads[cell.owner_bead].cells.items() if c is cell))
                for cell in node.tapestry.addr_cells.values()
            )
            per_node[nid] = (
                serialize_tapestry_state(node.tapestry, executor=node.executor),
                marks,
                node.alive,
            )
        endpoints = {
            cid: (self.senders[cid].state(), self.receivers[cid].state())
            for cid in sorted(self.channels)
        }
        return GridCheckpoint(self.tick, per_node, endpoints)

    def restore_partial(self, checkpoint, node_map=None):
        """Overlay a partial-consistency checkpoint onto this (freshly
        composed) simulation. node_map optionally renames checkpointed node
        ids to this sim's node ids."""
        node_map = node_map or {}
        self.in_flight.clear()
        self.tick = checkpoint.tick
        for old_id, (blob, marks, alive) in checkpoint.per_node.items():
            nid = node_map.get(old_id, old_id)
            node = self.nodes[nid]
            apply_tapestry_state(node.tapestry, blob)
            node.alive = alive
            sections = parse_checkpoint_blob(blob)
            if "SCHD" in sections:
                node.executor.restore_sched_state(sections["SCHD"])
            node.tapestry.addr_cells.clear()
            for bead_id, sym in marks:
                cell = node.tapestry.beads[bead_id].cells[sym]
                node.tapestry.addr_cells[cell.cell_id] = cell
        for cid, (tx_state, rx_state) in checkpoint.endpoints.items():
            self.senders[cid] = SenderState.from_state(tx_state)
            self.receivers[cid] = ReceiverState.from_state(rx_state)
        return self


class GridCheckpoint:
    def __init__(self, tick, per_node, endpoints):
        self.tick = tick
        self.per_node = per_node  # node id -> (tapestry blob, addr marks, alive)
        self.endpoints = endpoints  # cid -> (sender state, receiver state)

    def serialize(self) -> bytes:
        nodes = tuple(
            (nid, blob, marks, alive) for nid, (blob, marks, alive) in sorted(self.per_node.items())
        )
        chans = tuple((cid, tx, rx) for cid, (tx, rx) in sorted(self.endpoints.items()))
        body = codec.dumps_value((self.tick, nodes, chans))
        return GRID_MAGIC + _U32.pack(GRID_VERSION) + body

    @classmethod
    def deserialize(cls, blob: bytes):
        if blob[:4] != GRID_MAGIC:
            raise ValueError("not a grid checkpoint (bad magic)")
        version = _U32.unpack_from(blob, 4)[0]
        if version != GRID_VERSION:
            raise ValueError(f"unsupported grid checkpoint version {version}")
        tick, nodes, chans = codec.loads_value(blob[8:])
        per_node = {nid: (blob_, marks, alive) for nid, blob_, marks, alive in nodes}
        endpoints = {cid: (tx, rx) for cid, tx, rx in chans}
        return cls(tick, per_node, endpoints)


# --- islands ---------------------------------------------------------------------------


class Island:
    def __init__(self, bead_ids, weave_ids, string_ids):
        self.bead_ids = set(bead_ids)
        self.weave_ids = set(weave_ids)
        self.string_ids = set(string_ids)

    def __repr__(self):
        return f"Island(beads={sorted(self.bead_ids)}, weaves={sorted(self.weave_ids)}, strings={sorted(self.string_ids)})"


def _bead_edges(tapestry):
    """Sharing edges: weave co-membership plus tracked address references."""
    edges = {b: set() for b in tapestry.beads}
    for weave in tapestry.weaves.values():
        for a in weave.bead_ids:
            for b in weave.bead_ids:
                if a != b:
                    edges[a].add(b)
    for cell in tapestry.addr_cells.values():
        addr = codec.dec_addr(cell.value)
        rec = tapestry.allocs.record_for(addr)
        if rec is not None and rec.bead_id != cell.owner_bead:
            edges[cell.owner_bead].add(rec.bead_id)
            edges[rec.bead_id].add(cell.owner_bead)
    return edges


def identify_islands(tapestry, hints=None):
    """Maximal closed bead subgraphs; hints are validated, not trusted."""
    edges = _bead_edges(tapestry)
    seen = set()
    components = []
    for start in sorted(edges):
        if start in seen:
            continue
        comp = {start}
        frontier = [start]
        while frontier:
            b = frontier.pop()
            for nxt in edges[b]:
                if nxt not in comp:
                    comp.add(nxt)
                    frontier.append(nxt)
        seen |= comp
        components.append(comp)

    if hints is not None:
        for hint in hints:
            hint = set(hint)
            for b in sorted(hint):
                for other in sorted(edges.get(b, ())):
                    if other not in hint:
                        raise NotClosedError((b, other))

    islands = []
    for comp in components:
        weave_ids = {w.weave_id for w in tapestry.weaves.values() if set(w.bead_ids) <= comp}
        string_ids = {
            s.string_id for s in tapestry.strings.values() if s.weave_id in weave_ids
        }
        islands.append(Island(comp, weave_ids, string_ids))
    return islands


def migrate_island(sim, island, src_id, dst_id):
    """Move a closed island between nodes, preserving abstract addresses."""
    src = sim.nodes[src_id].tapestry
    dst = sim.nodes[dst_id].tapestry

    # closure is validated against the current sharing graph, not the hint
    identify_islands(src, hints=[island.bead_ids])

    if sim.region_group_size:
        if src_id // sim.region_group_size != dst_id // sim.region_group_size:
            raise RegionOverflowError(
                f"nodes {src_id} and {dst_id} sit in different address-space groups"
            )

    modules = {src.beads[b].module.name for b in island.bead_ids}
    for name in sorted(modules):
        if name not in dst.modules:
            raise MissingModuleError(f"target node {dst_id} has no module {name!r}")

    # --- capture -------------------------------------------------------------------
    bead_order = sorted(island.bead_ids)
    cells_by_id = {}
    for b in bead_order:
        for sym, cell in src.beads[b].cells.items():
            cells_by_id.setdefault(cell.cell_id, (cell, []))[1].append((b, sym))
    weave_order = sorted(island.weave_ids)
    strings = [src.strings[sid] for sid in sorted(island.string_ids)]
    for s in strings:
        if s.gen is not None and s.status in ("ready", "blocked"):
            # frames do not cross nodes; the log does
            s.replay_limit = len(s.log)
            s.needs_rebuild = True
            s.gen = None
            s.pending = None
            s.has_response = False
            s.blocked_on = None
            s.status = "ready" if s.status != "finished" else s.status
    alloc_records = [
        rec for rec in src.allocs.by_addr.values() if rec.bead_id in island.bead_ids
    ]
    marked = [cid for cid in src.addr_cells if cid in cells_by_id]

    # --- rebuild at the target --------------------------------------------------------
    bead_map = {}
    for b in bead_order:
        nb = dst.instantiate_bead(src.beads[b].module.name)
        bead_map[b] = nb.bead_id
    for cell_id, (cell, referers) in sorted(cells_by_id.items()):
        first_bead, first_sym = referers[0]
        target = dst.beads[bead_map[first_bead]].cells[first_sym]
        target.value = bytes(cell.value)
        target.region_address = cell.region_address
        for b, sym in referers[1:]:
            dst.beads[bead_map[b]].cells[sym] = target
        if cell_id in marked:
            dst.addr_cells[target.cell_id] = target
    weave_map = {}
    for w in weave_order:
        new_weave = dst.define_weave([bead_map[b] for b in src.weaves[w].bead_ids])
        weave_map[w] = new_weave.weave_id
    for rec in sorted(alloc_records, key=lambda r: r.sequence):
        dst.allocs.sequence += 1
        imported = AllocationRecord(dst.allocs.sequence, bead_map[rec.bead_id], rec.start, rec.size)
        imported.buffer[:] = rec.buffer
        dst.allocs.records[imported.sequence] = imported
        dst.allocs.by_addr[imported.start] = imported
        dst.allocs._all_by_addr[imported.start] = imported
    for s in strings:
        ns = StringTask(dst._next_string, weave_map[s.weave_id], s.entry, s.entry_ref)
        dst._next_string += 1
        ns.status = s.status
        ns.log = [_remap_log_entry(e, bead_map) for e in s.log]
        ns.replay_limit = s.replay_limit
        ns.needs_rebuild = s.needs_rebuild
        ns.frame_copy = dict(s.frame_copy)
        dst.strings[ns.string_id] = ns

    # --- retire at the source -----------------------------------------------------------
    for s in strings:
        del src.strings[s.string_id]
    for w in weave_order:
        del src.weaves[w]
        del src.tables[w]
        del src.ftables[w]
    for rec in alloc_records:
        del src.allocs.records[rec.sequence]
        del src.allocs.by_addr[rec.start]
        src.allocs._all_by_addr.pop(rec.start, None)
    for b in bead_order:
        for sym, cell in src.beads[b].cells.items():
            src.addr_cells.pop(cell.cell_id, None)
        del src.beads[b]
    return bead_map, weave_map


def _remap_log_entry(entry, bead_map):
    op, data = entry
    if op == "enter" and isinstance(data, tuple):
        bead_id, module_name, fn_name, shared = data
        return (op, (bead_map.get(bead_id, bead_id), module_name, fn_name, shared))
    return entry
