import random
import time

import pytest

from weaves import (
    ActiveContext,
    ModuleDef,
    Tapestry,
    TupleSpaceDecl,
    dec_int,
    enc_int,
    insert_module_runtime,
    rebind_function,
    share_tuple,
)
from weaves.errors import (
    DuplicateModuleError,
    LateSharingError,
    SignatureMismatchError,
    UnknownFunctionError,
    UnknownSymbolError,
)
from weaves.scheduler import Executor
from util import idle, spin_entry, two_mediator_tapestry


def test_pair_tables_agree_exactly_on_mediator_symbols():
    t, s, (m12, m34), weaves, strings = two_mediator_tapestry()
    t1 = t.tables[weaves[0].weave_id]
    t2 = t.tables[weaves[1].weave_id]
    assert t1.entries["m_total"] is t2.entries["m_total"]
    assert t1.entries["local"] is not t2.entries["local"]
    t3 = t.tables[weaves[2].weave_id]
    # nothing shared across mediator pairs
    ids_a = {c.cell_id for c in t1.entries.values()}
    ids_c = {c.cell_id for c in t3.entries.values()}
    assert not ids_a & ids_c
    assert len(t.tables) == 4


def test_tuple_share_merges_named_symbol_only():
    t = Tapestry()
    t.register_module(ModuleDef(
        "m", globals_=[("counter", enc_int(4)), ("tmp", enc_int(0))],
        entries={"main": spin_entry(1)},
    ))
    b1, b2 = t.instantiate_bead("m"), t.instantiate_bead("m")
    w1, w2 = t.define_weave([b1.bead_id]), t.define_weave([b2.bead_id])
    b2.cells["counter"].value = enc_int(9)
    share_tuple(t, TupleSpaceDecl(["counter"], [b1.bead_id, b2.bead_id]))
    ta, tb = t.tables[w1.weave_id], t.tables[w2.weave_id]
    assert ta.entries["counter"] is tb.entries["counter"]
    # merged value comes from the first-listed bead
    assert dec_int(ta.entries["counter"].value) == 4
    assert ta.entries["tmp"] is not tb.entries["tmp"]
    t.write_cell(ta.entries["counter"], enc_int(7))
    assert dec_int(tb.resolve("counter").value) == 7


def test_tuple_share_unknown_symbol():
    t = Tapestry()
    t.register_module(ModuleDef("m", globals_=[("a", enc_int(0))], entries={"main": spin_entry(1)}))
    b1, b2 = t.instantiate_bead("m"), t.instantiate_bead("m")
    with pytest.raises(UnknownSymbolError):
        share_tuple(t, TupleSpaceDecl(["nope"], [b1.bead_id, b2.bead_id]))


def test_tuple_share_after_start_rejected():
    t, s, meds, weaves, strings = two_mediator_tapestry(calls=1)
    Executor(t).run()
    with pytest.raises(LateSharingError):
        share_tuple(t, TupleSpaceDecl(["local"], [s[0].bead_id, s[1].bead_id]))


def test_activation_stack_discipline():
    t, _, _, weaves, _ = two_mediator_tapestry()
    active = ActiveContext()
    t1 = t.tables[weaves[0].weave_id]
    t2 = t.tables[weaves[1].weave_id]
    assert active.activate(t1) is None
    assert active.activate(t2) is t1
    assert active.current is t2


def _median_activation_ns(table, trials=1000, batch=200):
    active = ActiveContext()
    samples = []
    for _ in range(trials):
        t0 = time.perf_counter_ns()
        for _ in range(batch):
            active.activate(table)
        t1 = time.perf_counter_ns()
        samples.append((t1 - t0) / batch)
    samples.sort()
    return samples[len(samples) // 2]


def build_wide_tapestry(n_symbols):
    t = Tapestry()
    t.register_module(ModuleDef(
        "wide", globals_=[(f"g{i}", enc_int(i)) for i in range(n_symbols)],
        entries={"main": spin_entry(1)},
    ))
    bead = t.instantiate_bead("wide")
    weave = t.define_weave([bead.bead_id])
    return t.tables[weave.weave_id]


def test_activation_cost_independent_of_symbol_count():
    small = build_wide_tapestry(10)
    large = build_wide_tapestry(10_000)
    cost_small = _median_activation_ns(small)
    cost_large = _median_activation_ns(large)
    assert cost_large < 2 * max(cost_small, 1.0), (cost_small, cost_large)


def make_solver_exports(tag):
    def solve(ctx, value):
        ctx.set_int("out", value * 2 + tag)
        yield
        return ctx.get_int("out")
    return {"solve": solve}


def test_rebind_is_weave_local():
    t = Tapestry()
    t.register_module(ModuleDef("s1", globals_=[("out", enc_int(0))],
                                entries={"idle": idle}, exports=make_solver_exports(0)))
    t.register_module(ModuleDef("s2", globals_=[], entries={"idle": idle},
                                exports=make_solver_exports(1000)))
    b1, b2 = t.instantiate_bead("s1"), t.instantiate_bead("s1")
    w1, w2 = t.define_weave([b1.bead_id]), t.define_weave([b2.bead_id])

    def driver(ctx):
        res = yield from ctx.call("solve", 5)
        ctx.set_int("out", res)

    t.register_module(ModuleDef("driver", globals_=[], entries={"drive": driver}))
    rebind_function(t, w1.weave_id, "solve", "s2", "solve")
    assert t.ftables[w1.weave_id].lookup("solve")[1] == "s2"
    assert t.ftables[w2.weave_id].lookup("solve")[1] == "s1"


def test_rebind_identical_impl_is_noop():
    t = Tapestry()
    t.register_module(ModuleDef("s1", globals_=[("out", enc_int(0))],
                                entries={"idle": idle}, exports=make_solver_exports(0)))
    b = t.instantiate_bead("s1")
    w = t.define_weave([b.bead_id])
    before = t.ftables[w.weave_id].lookup("solve")
    rebind_function(t, w.weave_id, "solve", "s1", "solve")
    after = t.ftables[w.weave_id].lookup("solve")
    assert after[1:3] == ("s1", before[2])


def test_rebind_unknown_and_mismatched():
    t = Tapestry()
    t.register_module(ModuleDef("s1", globals_=[("out", enc_int(0))],
                                entries={"idle": idle}, exports=make_solver_exports(0)))

    def solve3(ctx, a, b):
        yield
        return a + b

    t.register_module(ModuleDef("s3", globals_=[], entries={"idle": idle},
                                exports={"solve": solve3}))
    b = t.instantiate_bead("s1")
    w = t.define_weave([b.bead_id])
    with pytest.raises(UnknownFunctionError):
        rebind_function(t, w.weave_id, "nothere", "s1", "solve")
    with pytest.raises(SignatureMismatchError):
        rebind_function(t, w.weave_id, "solve", "s3", "solve")


def test_rebind_takes_effect_at_next_call_boundary():
    t = Tapestry()

    def driver(ctx):
        first = yield from ctx.call("solve", 1)
        yield from ctx.rebind("solve", "v2", "solve")
        second = yield from ctx.call("solve", 1)
        ctx.set_int("a", first)
        ctx.set_int("b", second)

    t.register_module(ModuleDef(
        "v1", globals_=[("a", enc_int(0)), ("b", enc_int(0)), ("out", enc_int(0))],
        entries={"drive": driver}, exports=make_solver_exports(0),
    ))
    t.register_module(ModuleDef("v2", globals_=[], entries={"idle": idle},
                                exports=make_solver_exports(100)))
    bead = t.instantiate_bead("v1")
    w = t.define_weave([bead.bead_id])
    t.spawn_string(w.weave_id, "drive")
    Executor(t).run()
    assert t.get_int(w.weave_id, "a") == 2
    assert t.get_int(w.weave_id, "b") == 102


def solver_tag_modules():
    # iterative refinement: each solve halves the residual; v2 computes the
    # same contraction a different way, so a mid-sequence swap must keep the
    # residual log decreasing without any reset
    def solve_v1(ctx, r):
        yield
        return r * 0.5

    def solve_v2(ctx, r):
        yield
        return r - r / 2

    return solve_v1, solve_v2


def test_rebind_mid_iteration_keeps_residual_log_continuous():
    solve_v1, solve_v2 = solver_tag_modules()
    residuals = []

    def driver(ctx):
        r = 1.0
        for i in range(8):
            if i == 4:
                yield from ctx.rebind("solve", "v2", "solve")
            r = yield from ctx.call("solve", r)
            residuals.append(r)

    t = Tapestry()
    t.register_module(ModuleDef("driver", globals_=[("pad", enc_int(0))],
                                entries={"drive": driver}))
    t.register_module(ModuleDef("v1", globals_=[], entries={"idle": idle},
                                exports={"solve": solve_v1}))
    t.register_module(ModuleDef("v2", globals_=[], entries={"idle": idle},
                                exports={"solve": solve_v2}))
    d = t.instantiate_bead("driver")
    s1 = t.instantiate_bead("v1")
    w = t.define_weave([d.bead_id, s1.bead_id])
    t.spawn_string(w.weave_id, "drive")
    Executor(t).run()
    assert residuals == [2.0**-k for k in range(1, 9)]


def test_insert_then_rebind_matches_static_composition():
    solve_v1, solve_v2 = solver_tag_modules()

    def driver(ctx):
        r = 4.0
        for _ in range(3):
            r = yield from ctx.call("solve", r)
        ctx.set_float("out", r)

    def build(with_v2_static):
        t = Tapestry()
        t.register_module(ModuleDef("driver", globals_=[("out", enc_int(0))],
                                    entries={"drive": driver}))
        t.register_module(ModuleDef("v1", globals_=[], entries={"idle": idle},
                                    exports={"solve": solve_v1}))
        if with_v2_static:
            t.register_module(ModuleDef("v2", globals_=[], entries={"idle": idle},
                                        exports={"solve": solve_v2}))
        d = t.instantiate_bead("driver")
        s1 = t.instantiate_bead("v1")
        w = t.define_weave([d.bead_id, s1.bead_id])
        if with_v2_static:
            rebind_function(t, w.weave_id, "solve", "v2", "solve")
        t.spawn_string(w.weave_id, "drive")
        return t, w

    static_t, static_w = build(with_v2_static=True)
    Executor(static_t).run()
    expected = static_t.get_float(static_w.weave_id, "out")

    dyn_t, dyn_w = build(with_v2_static=False)
    insert_module_runtime(dyn_t, ModuleDef("v2", globals_=[], entries={"idle": idle},
                                           exports={"solve": solve_v2}))
    rebind_function(dyn_t, dyn_w.weave_id, "solve", "v2", "solve")
    Executor(dyn_t).run()
    assert dyn_t.get_float(dyn_w.weave_id, "out") == expected


def test_insert_module_runtime_parity():
    t, s, meds, weaves, strings = two_mediator_tapestry(calls=1)
    ex = Executor(t)
    ex.run()

    def late_entry(ctx):
        ctx.set_int("fresh", 41 + 1)
        yield

    inserted = insert_module_runtime(t, ModuleDef(
        "late", globals_=[("fresh", enc_int(0))], entries={"go": late_entry},
    ))
    assert inserted is t.module("late")
    bead = t.instantiate_bead("late")
    weave = t.define_weave([bead.bead_id])
    t.spawn_string(weave.weave_id, "go")
    ex.run()
    assert t.get_int(weave.weave_id, "fresh") == 42
    with pytest.raises(DuplicateModuleError):
        insert_module_runtime(t, ModuleDef("late", globals_=[], entries={"go": late_entry}))


def test_resolution_matches_reference_model_randomized():
    # reads and writes through many weaves against an oracle mapping
    rng = random.Random(7)
    for _ in range(40):
        t = Tapestry()
        n_modules = rng.randint(1, 4)
        for mi in range(n_modules):
            syms = [(f"s{j}", enc_int(0)) for j in range(rng.randint(1, 4))]
            t.register_module(ModuleDef(f"m{mi}", globals_=syms, entries={"main": spin_entry(1)}))
        beads = [t.instantiate_bead(f"m{rng.randrange(n_modules)}") for _ in range(rng.randint(2, 8))]
        weaves = []
        for _ in range(rng.randint(1, 6)):
            chosen = rng.sample(beads, rng.randint(1, min(3, len(beads))))
            weaves.append(t.define_weave([b.bead_id for b in chosen]))
        # oracle: symbol resolves to the last listed bead declaring it
        expect = {}
        for w in weaves:
            mapping = {}
            for bid in w.bead_ids:
                for sym in t.beads[bid].cells:
                    mapping[sym] = t.beads[bid].cells[sym].cell_id
            expect[w.weave_id] = mapping
        for w in weaves:
            table = t.tables[w.weave_id]
            assert {sym: c.cell_id for sym, c in table.entries.items()} == expect[w.weave_id]
        # writes through one weave are visible exactly where the cell is shared
        for _ in range(30):
            w = rng.choice(weaves)
            table = t.tables[w.weave_id]
            sym = rng.choice(sorted(table.entries))
            val = rng.randrange(1 << 30)
            t.write_cell(table.entries[sym], enc_int(val))
            target = table.entries[sym].cell_id
            for w2 in weaves:
                t2 = t.tables[w2.weave_id]
                if sym in t2.entries and t2.entries[sym].cell_id == target:
                    assert dec_int(t2.entries[sym].value) == val
