"""Runtime introspection and reconfiguration.

Queries return read-only snapshots with stable field ordering and never
touch execution state, so a run with interleaved queries traces identically
to a query-free run. Reconfiguration commands go through the executor's
control queue and apply between dispatches; a command that fails validation
leaves the tapestry untouched and reports the error instead.

The text protocol is line-based: one request per line, the response is a
block of lines terminated by a blank line. `query <kind>` and
`reconfig <command...>` are the two request families.
"""

from . import codec
from .config import ENTRY_BEHAVIORS
from .errors import UnknownQueryError, WeavesError
from .grid import identify_islands
from .model import ModuleDef
from .namespace import TupleSpaceDecl, rebind_function, share_tuple

QUERIES = ("summary", "beads", "weaves", "strings", "classes", "checkpoints", "islands")


def monitor_query(executor, query) -> list:
    """Snapshot one aspect of the running tapestry as text lines."""
    t = executor.tapestry
    if query == "summary":
        finished = sum(1 for s in t.strings.values() if s.status == "finished")
        return [
            f"modules={len(t.modules)}",
            f"beads={len(t.beads)}",
            f"weaves={len(t.weaves)}",
            f"strings={len(t.strings)}",
            f"finished={finished}",
            f"classes={len(executor.classes())}",
            f"checkpoints={len(t.checkpoints.live)}",
        ]
    if query == "beads":
        return [
            f"bead {b.bead_id} module={b.module.name} cells={len(b.cells)}"
            for b in sorted(t.beads.values(), key=lambda b: b.bead_id)
        ]
    if query == "weaves":
        return [
            f"weave {w.weave_id} beads={','.join(str(b) for b in w.bead_ids)}"
            for w in sorted(t.weaves.values(), key=lambda w: w.weave_id)
        ]
    if query == "strings":
        return [
            f"string {s.string_id} weave={s.weave_id} entry={s.entry} status={s.status}"
            for s in sorted(t.strings.values(), key=lambda s: s.string_id)
        ]
    if query == "classes":
        return [
            f"class {i} strings={','.join(str(s) for s in sorted(members))}"
            for i, members in enumerate(executor.classes())
        ]
    if query == "checkpoints":
        return [
            f"checkpoint {cp.cp_id} scope={cp.scope} mode={cp.mode}"
            for cp in sorted(t.checkpoints.live.values(), key=lambda c: c.cp_id)
        ]
    if query == "islands":
        return [
            "island {i} beads={b} weaves={w} strings={s}".format(
                i=i,
                b=",".join(str(x) for x in sorted(isl.bead_ids)),
                w=",".join(str(x) for x in sorted(isl.weave_ids)),
                s=",".join(str(x) for x in sorted(isl.string_ids)),
            )
            for i, isl in enumerate(identify_islands(t))
        ]
    raise UnknownQueryError(f"no query {query!r} (expected one of {', '.join(QUERIES)})")


class MonitorSession:
    """Names the config gave to objects, plus the reconfiguration surface."""

    def __init__(self, executor, names=None):
        self.executor = executor
        self.beads = dict(getattr(names, "beads", {}) or {})
        self.weaves = dict(getattr(names, "weaves", {}) or {})
        self.strings = dict(getattr(names, "strings", {}) or {})

    def _bead_id(self, name):
        if name in self.beads:
            return self.beads[name]
        raise WeavesError(f"unknown bead name {name!r}")

    def _weave_id(self, name):
        if name in self.weaves:
            return self.weaves[name]
        raise WeavesError(f"unknown weave name {name!r}")

    def apply(self, tokens) -> list:
        """Validate and apply one reconfiguration command at a dispatch
        boundary. Returns response lines; on error nothing is changed."""
        if not tokens:
            raise WeavesError("empty reconfiguration command")
        t = self.executor.tapestry
        op = tokens[0]
        if op == "add_bead":
            name, module = tokens[1], tokens[2]
            if name in self.beads:
                raise WeavesError(f"bead name {name!r} taken")
            bead = t.instantiate_bead(module)
            self.beads[name] = bead.bead_id
            return [f"bead {bead.bead_id}"]
        if op == "add_weave":
            name, bead_names = tokens[1], tokens[2:]
            if name in self.weaves:
                raise WeavesError(f"weave name {name!r} taken")
            ids = [self._bead_id(b) for b in bead_names]
            weave = t.define_weave(ids)
            self.weaves[name] = weave.weave_id
            return [f"weave {weave.weave_id}"]
        if op == "spawn_string":
            name, weave, entry = tokens[1], tokens[2], tokens[3]
            if name in self.strings:
                raise WeavesError(f"string name {name!r} taken")
            s = t.spawn_string(self._weave_id(weave), entry)
            self.strings[name] = s.string_id
            return [f"string {s.string_id}"]
        if op == "rebind":
            weave, fn, module, impl = tokens[1], tokens[2], tokens[3], tokens[4]
            rebind_function(t, self._weave_id(weave), fn, module, impl)
            return ["rebound"]
        if op == "insert_module":
            # insert_module <name> entry <entry-name> <behavior> [args...]
            name = tokens[1]
            if len(tokens) < 5 or tokens[2] != "entry":
                raise WeavesError("insert_module <name> entry <entry> <behavior> [args...]")
            entry_name, behavior, args = tokens[3], tokens[4], tokens[5:]
            if behavior not in ENTRY_BEHAVIORS:
                raise WeavesError(f"unknown behavior {behavior!r}")
            maker, arity = ENTRY_BEHAVIORS[behavior]
            if len(args) != arity:
                raise WeavesError(f"{behavior!r} takes {arity} argument(s)")
            t.register_module(ModuleDef(name, globals_=[("pad", codec.enc_int(0))],
                                        entries={entry_name: maker(args)}))
            return [f"module {name}"]
        if op == "share_tuple":
            symbol, bead_names = tokens[1], tokens[2:]
            ids = [self._bead_id(b) for b in bead_names]
            share_tuple(t, TupleSpaceDecl([symbol], ids))
            return ["shared"]
        raise WeavesError(f"unknown reconfiguration command {op!r}")


def apply_reconfiguration(session: MonitorSession, tokens) -> list:
    """Queue the command, apply it at the next dispatch boundary, and hand
    back its response (or raise what it raised)."""
    box = {}

    def run(executor):
        try:
            box["lines"] = session.apply(tokens)
        except Exception as err:  # atomicity: nothing applied on error
            box["error"] = err

    session.executor.submit(run)
    session.executor._drain_control()
    if "error" in box:
        raise box["error"]
    return box["lines"]


def serve_line(session: MonitorSession, request: str) -> list:
    """One protocol request -> response lines (no trailing blank line)."""
    tokens = request.split()
    if not tokens:
        return ["error empty request"]
    try:
        if tokens[0] == "query":
            if len(tokens) != 2:
                return ["error usage: query <kind>"]
            return monitor_query(session.executor, tokens[1]) or ["(none)"]
        if tokens[0] == "reconfig":
            return apply_reconfiguration(session, tokens[1:])
        if tokens[0] == "step":
            n = int(tokens[1]) if len(tokens) > 1 else 1
            did = session.executor.run_slice(max_dispatches=n)
            return [f"dispatched {did}"]
        return [f"error unknown request {tokens[0]!r}"]
    except WeavesError as err:
        return [f"error {err}"]


def serve(session: MonitorSession, in_stream, out_stream):
    """Blocking text protocol: request per line, blank-line-terminated
    responses."""
    for raw in in_stream:
        line = raw.strip()
        if not line:
            continue
        if line == "quit":
            break
        for response in serve_line(session, line):
            out_stream.write(response + "\n")
        out_stream.write("\n")
        out_stream.flush()
