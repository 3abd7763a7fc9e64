"""Shared builders for the test suite."""

from weaves import ModuleDef, Tapestry, enc_int


def spin_entry(n):
    def entry(ctx):
        for _ in range(n):
            yield
    return entry


def idle(ctx):
    yield


def counter_module(name="counter", extra_globals=(), entries=None, exports=None):
    globals_ = [("count", enc_int(0))] + list(extra_globals)
    return ModuleDef(name, globals_=globals_, entries=entries or {"main": spin_entry(3)},
                     exports=exports or {})


def poke(ctx, amount):
    ctx.set_int("m_total", ctx.get_int("m_total") + amount)
    yield
    return ctx.get_int("m_total")


def solver_worker(calls):
    def worker(ctx):
        for i in range(calls):
            ctx.set_int("local", ctx.get_int("local") + 1)
            yield from ctx.call("poke", 1)
    return worker


def two_mediator_tapestry(calls=3):
    """Four solver strings in two pairs, each pair sharing one mediator.

    Topology: weaves (S1,M12), (S2,M12), (S3,M34), (S4,M34); four strings.
    """
    t = Tapestry()
    t.register_module(ModuleDef(
        "solver", globals_=[("local", enc_int(0))],
        entries={"work": solver_worker(calls)},
    ))
    t.register_module(ModuleDef(
        "mediator", globals_=[("m_total", enc_int(0))],
        entries={"idle": idle}, exports={"poke": poke},
    ))
    s = [t.instantiate_bead("solver") for _ in range(4)]
    m12 = t.instantiate_bead("mediator")
    m34 = t.instantiate_bead("mediator")
    weaves = [
        t.define_weave([s[0].bead_id, m12.bead_id]),
        t.define_weave([s[1].bead_id, m12.bead_id]),
        t.define_weave([s[2].bead_id, m34.bead_id]),
        t.define_weave([s[3].bead_id, m34.bead_id]),
    ]
    strings = [t.spawn_string(w.weave_id, "work") for w in weaves]
    return t, s, (m12, m34), weaves, strings
