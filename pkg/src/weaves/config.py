"""Tapestry configuration files.

Line-oriented, '#' comments, first meaningful line must be the version
header `weaves-config v1`. Sections:

    [module] <name>
    global <symbol> int|float <value>
    global <symbol> floats <v> <v> ...
    global <symbol> bytes <hex>
    entry <name> <behavior> [args...]
    func <name> <behavior> [args...]
    [bead] <name> <module> [node=<k>]
    [weave] <name> <bead> [<bead> ...]
    [string] <name> <weave> <entry>
    [tuple] <symbol> <bead> <bead> [...]
    [grid] key=value ...
    [channel] <id> <src-node> <dst-node>
    [event] <tick> checkpoint | migrate <island> <src> <dst> | kill <node>

Entry behaviors: spin N; incr SYM N; add SYM K; call FN N;
exchange OUT_CHANNEL IN_CHANNEL ROUNDS ACC_SYM.
Function behaviors: bump SYM K; noop.

Parsing reports the first error with line and column; every referenced name
must be declared somewhere in the file.
"""

from dataclasses import dataclass, field

from . import codec
from .errors import ParseError, UnresolvedReferenceError
from .grid import GridSim, identify_islands, migrate_island
from .model import ModuleDef, Tapestry
from .namespace import TupleSpaceDecl, share_tuple

HEADER = "weaves-config v1"

GRID_KEYS = {
    "nodes": int, "total_bits": int, "vm_bits": int, "loss": float,
    "seed": int, "delay": int, "retransmit": int, "window": int,
    "quantum": int, "node_slice": int, "group_size": int,
}


@dataclass
class ConfigModule:
    name: str
    globals_: list = field(default_factory=list)  # (symbol, type, values)
    entries: list = field(default_factory=list)  # (name, behavior, args)
    funcs: list = field(default_factory=list)  # (name, behavior, args)
    line: int = 0


@dataclass
class TapestryConfig:
    modules: list = field(default_factory=list)
    beads: list = field(default_factory=list)  # (name, module, node, line)
    weaves: list = field(default_factory=list)  # (name, [bead names], line)
    strings: list = field(default_factory=list)  # (name, weave, entry, line)
    tuples: list = field(default_factory=list)  # (symbol, [bead names], line)
    grid: dict = None
    channels: list = field(default_factory=list)  # (cid, src, dst, line)
    events: list = field(default_factory=list)  # (tick, [tokens], line)


# --- behaviors -------------------------------------------------------------------


def _spin(args):
    n = int(args[0])

    def entry(ctx):
        for _ in range(n):
            yield
    return entry


def _incr(args):
    sym, n = args[0], int(args[1])

    def entry(ctx):
        for _ in range(n):
            ctx.set_int(sym, ctx.get_int(sym) + 1)
            yield
    return entry


def _add(args):
    sym, k = args[0], int(args[1])

    def entry(ctx):
        ctx.set_int(sym, ctx.get_int(sym) + k)
        yield
    return entry


def _call(args):
    fn, n = args[0], int(args[1])

    def entry(ctx):
        for _ in range(n):
            yield from ctx.call(fn)
    return entry


def _exchange(args):
    out_chan, in_chan, rounds, acc = args[0], args[1], int(args[2]), args[3]

    def entry(ctx):
        total = 0
        for r in range(rounds):
            ctx.send(out_chan, codec.enc_int(r * 13 + 1))
            payload = yield from ctx.recv(in_chan)
            total += codec.dec_int(payload) * (r + 1)
            ctx.set_int(acc, total)
            yield
    return entry


def _bump(args):
    sym, k = args[0], int(args[1])

    def fn(ctx):
        v = ctx.get_int(sym) + k
        ctx.set_int(sym, v)
        yield
        return v
    return fn


def _noop(args):
    def fn(ctx):
        yield
        return 0
    return fn


ENTRY_BEHAVIORS = {"spin": (_spin, 1), "incr": (_incr, 2), "add": (_add, 2),
                   "call": (_call, 2), "exchange": (_exchange, 4)}
FUNC_BEHAVIORS = {"bump": (_bump, 2), "noop": (_noop, 0)}


# --- parsing ----------------------------------------------------------------------


def _err(line_no, line, token, expected):
    col = (line.find(token) + 1) if token and token in line else 1
    raise ParseError(line_no, col, expected)


def _parse_int(tok, line_no, line, what):
    try:
        return int(tok)
    except ValueError:
        _err(line_no, line, tok, f"integer {what}, got {tok!r}")


def parse_tapestry_config(text: str) -> TapestryConfig:
    cfg = TapestryConfig()
    current = None  # ConfigModule while inside a [module] section
    seen_header = False
    lines = text.splitlines()
    if not lines:
        raise ParseError(1, 1, f"header {HEADER!r}")
    for line_no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        if not seen_header:
            if line.strip() != HEADER:
                _err(line_no, raw, line.strip(), f"header {HEADER!r}")
            seen_header = True
            continue
        tokens = line.split()
        head = tokens[0]

        if head == "[module]":
            if len(tokens) != 2:
                _err(line_no, raw, head, "[module] <name>")
            current = ConfigModule(tokens[1], line=line_no)
            cfg.modules.append(current)
        elif head in ("global", "entry", "func"):
            if current is None:
                _err(line_no, raw, head, f"{head!r} inside a [module] section")
            if head == "global":
                if len(tokens) < 4:
                    _err(line_no, raw, head, "global <symbol> <type> <value...>")
                sym, typ, values = tokens[1], tokens[2], tokens[3:]
                if typ == "int":
                    _parse_int(values[0], line_no, raw, "initial value")
                elif typ == "float" or typ == "floats":
                    for v in values:
                        try:
                            float(v)
                        except ValueError:
                            _err(line_no, raw, v, f"float literal, got {v!r}")
                elif typ == "bytes":
                    try:
                        bytes.fromhex(values[0])
                    except ValueError:
                        _err(line_no, raw, values[0], "hex byte string")
                else:
                    _err(line_no, raw, typ, "type int|float|floats|bytes")
                current.globals_.append((sym, typ, list(values), line_no))
            else:
                if len(tokens) < 3:
                    _err(line_no, raw, head, f"{head} <name> <behavior> [args...]")
                name, behavior, args = tokens[1], tokens[2], tokens[3:]
                table = ENTRY_BEHAVIORS if head == "entry" else FUNC_BEHAVIORS
                if behavior not in table:
                    _err(line_no, raw, behavior,
                         f"one of {sorted(table)} for {head!r}")
                if len(args) != table[behavior][1]:
                    _err(line_no, raw, behavior,
                         f"{table[behavior][1]} argument(s) for {behavior!r}")
                target = current.entries if head == "entry" else current.funcs
                target.append((name, behavior, list(args), line_no))
        elif head == "[bead]":
            current = None
            if len(tokens) not in (3, 4):
                _err(line_no, raw, head, "[bead] <name> <module> [node=<k>]")
            node = 0
            if len(tokens) == 4:
                if not tokens[3].startswith("node="):
                    _err(line_no, raw, tokens[3], "node=<k>")
                node = _parse_int(tokens[3][5:], line_no, raw, "node id")
            cfg.beads.append((tokens[1], tokens[2], node, line_no))
        elif head == "[weave]":
            current = None
            if len(tokens) < 3:
                _err(line_no, raw, head, "[weave] <name> <bead> [...]")
            cfg.weaves.append((tokens[1], tokens[2:], line_no))
        elif head == "[string]":
            current = None
            if len(tokens) != 4:
                _err(line_no, raw, head, "[string] <name> <weave> <entry>")
            cfg.strings.append((tokens[1], tokens[2], tokens[3], line_no))
        elif head == "[tuple]":
            current = None
            if len(tokens) < 4:
                _err(line_no, raw, head, "[tuple] <symbol> <bead> <bead> [...]")
            cfg.tuples.append((tokens[1], tokens[2:], line_no))
        elif head == "[grid]":
            current = None
            grid = {}
            for tok in tokens[1:]:
                if "=" not in tok:
                    _err(line_no, raw, tok, "key=value")
                key, value = tok.split("=", 1)
                if key not in GRID_KEYS:
                    _err(line_no, raw, key, f"grid key in {sorted(GRID_KEYS)}")
                try:
                    grid[key] = GRID_KEYS[key](value)
                except ValueError:
                    _err(line_no, raw, value, f"{GRID_KEYS[key].__name__} for {key!r}")
            cfg.grid = grid
        elif head == "[channel]":
            current = None
            if len(tokens) != 4:
                _err(line_no, raw, head, "[channel] <id> <src> <dst>")
            cfg.channels.append((
                tokens[1],
                _parse_int(tokens[2], line_no, raw, "source node"),
                _parse_int(tokens[3], line_no, raw, "target node"),
                line_no,
            ))
        elif head == "[event]":
            current = None
            if len(tokens) < 3:
                _err(line_no, raw, head, "[event] <tick> <command...>")
            tick = _parse_int(tokens[1], line_no, raw, "tick")
            command = tokens[2:]
            if command[0] not in ("checkpoint", "migrate", "kill"):
                _err(line_no, raw, command[0], "checkpoint|migrate|kill")
            if command[0] == "migrate" and len(command) != 4:
                _err(line_no, raw, command[0], "migrate <island> <src> <dst>")
            if command[0] == "kill" and len(command) != 2:
                _err(line_no, raw, command[0], "kill <node>")
            cfg.events.append((tick, command, line_no))
        else:
            _err(line_no, raw, head, "a section header or module item")

    if not cfg.modules:
        raise ParseError(len(lines) or 1, 1, "at least one [module] section")
    _validate(cfg)
    return cfg


def _validate(cfg: TapestryConfig):
    module_names = {}
    for m in cfg.modules:
        if m.name in module_names:
            raise ParseError(m.line, 1, f"unique module name (duplicate {m.name!r})")
        module_names[m.name] = m
    bead_names = {}
    for name, module, node, line in cfg.beads:
        if name in bead_names:
            raise ParseError(line, 1, f"unique bead name (duplicate {name!r})")
        if module not in module_names:
            raise UnresolvedReferenceError(module, line)
        bead_names[name] = (module, node)
    weave_names = {}
    for name, beads, line in cfg.weaves:
        if name in weave_names:
            raise ParseError(line, 1, f"unique weave name (duplicate {name!r})")
        nodes = set()
        for b in beads:
            if b not in bead_names:
                raise UnresolvedReferenceError(b, line)
            nodes.add(bead_names[b][1])
        if len(nodes) > 1:
            raise ParseError(line, 1, f"weave {name!r} beads on one node, got nodes {sorted(nodes)}")
        weave_names[name] = beads
    string_names = set()
    for name, weave, entry, line in cfg.strings:
        if name in string_names:
            raise ParseError(line, 1, f"unique string name (duplicate {name!r})")
        string_names.add(name)
        if weave not in weave_names:
            raise UnresolvedReferenceError(weave, line)
        entries = set()
        for b in weave_names[weave]:
            module = module_names[bead_names[b][0]]
            entries |= {e[0] for e in module.entries}
        if entry not in entries:
            raise UnresolvedReferenceError(f"{weave}.{entry}", line)
    for symbol, beads, line in cfg.tuples:
        for b in beads:
            if b not in bead_names:
                raise UnresolvedReferenceError(b, line)
            module = module_names[bead_names[b][0]]
            if symbol not in {g[0] for g in module.globals_}:
                raise UnresolvedReferenceError(f"{b}.{symbol}", line)
    n_nodes = (cfg.grid or {}).get("nodes", 1)
    for name, module, node, line in cfg.beads:
        if node >= n_nodes:
            raise UnresolvedReferenceError(f"node {node}", line)
    for cid, src, dst, line in cfg.channels:
        if src >= n_nodes or dst >= n_nodes:
            raise UnresolvedReferenceError(f"channel {cid} endpoint", line)
    for tick, command, line in cfg.events:
        if command[0] == "kill" and int(command[1]) >= n_nodes:
            raise UnresolvedReferenceError(f"node {command[1]}", line)


# --- canonical serialization ---------------------------------------------------------


def serialize_tapestry_config(cfg: TapestryConfig) -> str:
    out = [HEADER]
    for m in cfg.modules:
        out.append(f"[module] {m.name}")
        for sym, typ, values, _ in m.globals_:
            out.append(f"global {sym} {typ} " + " ".join(values))
        for name, behavior, args, _ in m.entries:
            out.append(" ".join(["entry", name, behavior] + args))
        for name, behavior, args, _ in m.funcs:
            out.append(" ".join(["func", name, behavior] + args))
    for name, module, node, _ in cfg.beads:
        suffix = f" node={node}" if node else ""
        out.append(f"[bead] {name} {module}{suffix}")
    for name, beads, _ in cfg.weaves:
        out.append(f"[weave] {name} " + " ".join(beads))
    for name, weave, entry, _ in cfg.strings:
        out.append(f"[string] {name} {weave} {entry}")
    for symbol, beads, _ in cfg.tuples:
        out.append(f"[tuple] {symbol} " + " ".join(beads))
    if cfg.grid is not None:
        pairs = " ".join(f"{k}={cfg.grid[k]}" for k in sorted(cfg.grid))
        out.append(f"[grid] {pairs}".rstrip())
    for cid, src, dst, _ in cfg.channels:
        out.append(f"[channel] {cid} {src} {dst}")
    for tick, command, _ in cfg.events:
        out.append(f"[event] {tick} " + " ".join(command))
    return "\n".join(out) + "\n"


def config_equal(a: TapestryConfig, b: TapestryConfig) -> bool:
    def strip(cfg):
        return (
            [(m.name,
              [g[:3] for g in m.globals_],
              [e[:3] for e in m.entries],
              [f[:3] for f in m.funcs]) for m in cfg.modules],
            [r[:3] for r in cfg.beads],
            [r[:2] for r in cfg.weaves],
            [r[:3] for r in cfg.strings],
            [r[:2] for r in cfg.tuples],
            cfg.grid,
            [r[:3] for r in cfg.channels],
            [r[:2] for r in cfg.events],
        )
    return strip(a) == strip(b)


# --- instantiation --------------------------------------------------------------------


def _encode_global(typ, values):
    if typ == "int":
        return codec.enc_int(int(values[0]))
    if typ == "float":
        return codec.enc_float(float(values[0]))
    if typ == "floats":
        return codec.enc_floats([float(v) for v in values])
    return bytes.fromhex(values[0])


def _module_def(cm: ConfigModule) -> ModuleDef:
    entries = {
        name: ENTRY_BEHAVIORS[behavior][0](args) for name, behavior, args, _ in cm.entries
    }
    exports = {
        name: FUNC_BEHAVIORS[behavior][0](args) for name, behavior, args, _ in cm.funcs
    }
    globals_ = [(sym, _encode_global(typ, values)) for sym, typ, values, _ in cm.globals_]
    return ModuleDef(cm.name, globals_=globals_, entries=entries, exports=exports)


@dataclass
class BuiltNames:
    beads: dict = field(default_factory=dict)
    weaves: dict = field(default_factory=dict)
    strings: dict = field(default_factory=dict)


def populate_tapestry(tapestry: Tapestry, cfg: TapestryConfig, node=0) -> BuiltNames:
    """Compose one node's share of the configuration onto a tapestry."""
    names = BuiltNames()
    for cm in cfg.modules:
        tapestry.register_module(_module_def(cm))
    on_node = {name for name, _m, n, _l in cfg.beads if n == node}
    for name, module, n, _ in cfg.beads:
        if n == node:
            names.beads[name] = tapestry.instantiate_bead(module).bead_id
    for name, beads, _ in cfg.weaves:
        if beads[0] in on_node:
            weave = tapestry.define_weave([names.beads[b] for b in beads])
            names.weaves[name] = weave.weave_id
    for symbol, beads, _ in cfg.tuples:
        if beads[0] in on_node:
            share_tuple(tapestry, TupleSpaceDecl([symbol], [names.beads[b] for b in beads]))
    for name, weave, entry, _ in cfg.strings:
        if weave in names.weaves:
            s = tapestry.spawn_string(names.weaves[weave], entry)
            names.strings[name] = s.string_id
    return names


def build_tapestry(cfg: TapestryConfig):
    """Single-process composition (the [grid] section, if any, is ignored)."""
    t = Tapestry()
    names = populate_tapestry(t, cfg, node=0)
    return t, names


def build_grid(cfg: TapestryConfig) -> GridSim:
    grid = dict(cfg.grid or {})
    sim = GridSim(
        total_bits=grid.get("total_bits", 48),
        vm_bits=grid.get("vm_bits", 40),
        loss=grid.get("loss", 0.0),
        seed=grid.get("seed", 0),
        delay=grid.get("delay", 1),
        retransmit_interval=grid.get("retransmit", 8),
        window=grid.get("window", 32),
        quantum=grid.get("quantum", 8),
        node_slice=grid.get("node_slice", 4),
        region_group_size=grid.get("group_size") or None,
    )
    for node in range(grid.get("nodes", 1)):
        def composer(t, node=node):
            populate_tapestry(t, cfg, node=node)
        sim.add_node(composer=composer)
    for cid, src, dst, _ in cfg.channels:
        sim.add_channel(cid, src, dst)
    sim.saved_checkpoints = []
    for tick, command, _ in cfg.events:
        if command[0] == "checkpoint":
            def do_checkpoint(s):
                s.saved_checkpoints.append(s.partial_checkpoint())
            sim.at_tick(tick, do_checkpoint)
        elif command[0] == "migrate":
            island_index, src, dst = int(command[1]), int(command[2]), int(command[3])

            def do_migrate(s, island_index=island_index, src=src, dst=dst):
                islands = identify_islands(s.nodes[src].tapestry)
                if island_index < len(islands):
                    migrate_island(s, islands[island_index], src, dst)
            sim.at_tick(tick, do_migrate)
        elif command[0] == "kill":
            node = int(command[1])

            def do_kill(s, node=node):
                s.kill_node(node)
            sim.at_tick(tick, do_kill)
    return sim
