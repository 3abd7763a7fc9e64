"""Two-domain Poisson demo with interface relaxation.

Composition: two solver beads, one shared mediator bead, two weaves, two
strings. Each round every solver solves -u'' = f on its subdomain with the
mediator's current interface value as Dirichlet data (second-order central
differences, direct tridiagonal solve) and submits its one-sided interface
derivative. When both sides reported, the mediator relaxes the interface
value against the derivative mismatch:

    u_new = u + theta * (L1*L2)/(L1+L2) * (d_right - d_left)

With theta = 1 that scale cancels the mismatch's linear dependence on u
exactly, so symmetric problems converge in a single round; smaller theta
trades rounds for robustness. Convergence is declared when the interface
moves less than the tolerance.
"""

from dataclasses import dataclass, field

from .. import codec
from ..errors import NoConvergenceError
from ..grid import GridSim, identify_islands, migrate_island
from ..model import ModuleDef, Tapestry
from ..scheduler import Executor


@dataclass
class PdeDomainSpec:
    lo: float
    hi: float
    n: int  # sub-intervals (n+1 grid points)
    bc: float  # Dirichlet value at the outer boundary

    def __post_init__(self):
        if self.n < 3:
            raise ValueError("need at least 3 sub-intervals per domain")
        if not self.lo < self.hi:
            raise ValueError("domain bounds must be ordered")


@dataclass
class PdeReport:
    interface_value: float
    iterations: int
    left: list = field(default_factory=list)
    right: list = field(default_factory=list)
    left_x: list = field(default_factory=list)
    right_x: list = field(default_factory=list)

    def lines(self):
        return [
            f"interface_value={self.interface_value!r}",
            f"iterations={self.iterations}",
            f"left_points={len(self.left)}",
            f"right_points={len(self.right)}",
        ]


def thomas_solve(sub, diag, sup, rhs):
    """Tridiagonal solve, standard forward elimination / back substitution."""
    n = len(diag)
    c = [0.0] * n
    d = [0.0] * n
    c[0] = sup[0] / diag[0]
    d[0] = rhs[0] / diag[0]
    for i in range(1, n):
        m = diag[i] - sub[i] * c[i - 1]
        c[i] = sup[i] / m if i < n - 1 else 0.0
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / m
    x = [0.0] * n
    x[-1] = d[-1]
    for i in range(n - 2, -1, -1):
        x[i] = d[i] - c[i] * x[i + 1]
    return x


def solve_poisson_dirichlet(lo, hi, n, left_bc, right_bc, f_interior):
    """-u'' = f on [lo, hi] with Dirichlet ends; returns all n+1 values."""
    h = (hi - lo) / n
    m = n - 1
    sub = [-1.0] * m
    diag = [2.0] * m
    sup = [-1.0] * m
    rhs = [f_interior[i] * h * h for i in range(m)]
    rhs[0] += left_bc
    rhs[-1] += right_bc
    inner = thomas_solve(sub, diag, sup, rhs)
    return [left_bc] + inner + [right_bc]


def _one_sided_at_right_edge(u, h):
    # derivative at the right end of a domain, second order
    return (3.0 * u[-1] - 4.0 * u[-2] + u[-3]) / (2.0 * h)


def _one_sided_at_left_edge(u, h):
    return (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * h)


def _solver_entry(ctx):
    side = ctx.get_int("side")
    lo = ctx.get_float("dom_lo")
    hi = ctx.get_float("dom_hi")
    n = ctx.get_int("grid_n")
    bc = ctx.get_float("bc_value")
    h = (hi - lo) / n
    f_interior = list(ctx.ext(f"pde_source_{side}"))
    my_round = 0
    u = None
    while True:
        if ctx.get_int("converged") or ctx.get_int("iters") >= ctx.get_int("max_iters"):
            break
        if ctx.get_int("round") == my_round:
            g = ctx.get_float("u_gamma")
            left_bc, right_bc = (bc, g) if side == 0 else (g, bc)
            u = solve_poisson_dirichlet(lo, hi, n, left_bc, right_bc, f_interior)
            if side == 0:
                d = _one_sided_at_right_edge(u, h)
            else:
                d = _one_sided_at_left_edge(u, h)
            yield from ctx.call("submit", side, d, my_round)
            my_round += 1
        yield
    # one final solve against the settled interface value
    g = ctx.get_float("u_gamma")
    left_bc, right_bc = (bc, g) if side == 0 else (g, bc)
    u = solve_poisson_dirichlet(lo, hi, n, left_bc, right_bc, f_interior)
    addr = ctx.alloc(8 * (n + 1))
    ctx.mem_write(addr, codec.enc_floats(u))
    ctx.set_addr("solution_ptr", addr)


def _mediator_submit(ctx, side, d, rnd):
    if rnd != ctx.get_int("round"):
        return 0
    if side == 0:
        ctx.set_float("d_left", d)
        ctx.set_int("have_left", 1)
    else:
        ctx.set_float("d_right", d)
        ctx.set_int("have_right", 1)
    if ctx.get_int("have_left") and ctx.get_int("have_right"):
        g = ctx.get_float("u_gamma")
        scale = ctx.get_float("relax_scale")
        theta = ctx.get_float("theta")
        g_new = g + theta * scale * (ctx.get_float("d_right") - ctx.get_float("d_left"))
        delta = abs(g_new - g)
        ctx.set_float("u_gamma", g_new)
        ctx.set_float("last_delta", delta)
        ctx.set_int("iters", ctx.get_int("iters") + 1)
        ctx.set_int("have_left", 0)
        ctx.set_int("have_right", 0)
        if delta < ctx.get_float("tolerance"):
            ctx.set_int("converged", 1)
        ctx.set_int("round", ctx.get_int("round") + 1)
    return 1


def _mediator_idle(ctx):
    yield


def compose_pde(tapestry, left: PdeDomainSpec, right: PdeDomainSpec, source,
                theta=0.5, tol=1e-10, max_iters=200, u_gamma0=0.0):
    """Register modules and build the two-weave composition on a tapestry."""
    if abs(left.hi - right.lo) > 1e-14:
        raise ValueError("domains must meet at the interface")
    t = tapestry
    t.register_module(ModuleDef(
        "pde_solver",
        globals_=[
            ("side", codec.enc_int(0)),
            ("dom_lo", codec.enc_float(0.0)),
            ("dom_hi", codec.enc_float(0.0)),
            ("grid_n", codec.enc_int(0)),
            ("bc_value", codec.enc_float(0.0)),
            ("solution_ptr", codec.enc_addr(0)),
        ],
        entries={"solve_loop": _solver_entry},
    ))
    len_l = left.hi - left.lo
    len_r = right.hi - right.lo
    t.register_module(ModuleDef(
        "pde_mediator",
        globals_=[
            ("u_gamma", codec.enc_float(u_gamma0)),
            ("d_left", codec.enc_float(0.0)),
            ("d_right", codec.enc_float(0.0)),
            ("have_left", codec.enc_int(0)),
            ("have_right", codec.enc_int(0)),
            ("round", codec.enc_int(0)),
            ("iters", codec.enc_int(0)),
            ("converged", codec.enc_int(0)),
            ("theta", codec.enc_float(theta)),
            ("tolerance", codec.enc_float(tol)),
            ("max_iters", codec.enc_int(max_iters)),
            ("last_delta", codec.enc_float(0.0)),
            ("relax_scale", codec.enc_float(len_l * len_r / (len_l + len_r))),
        ],
        entries={"idle": _mediator_idle},
        exports={"submit": _mediator_submit},
    ))

    def interior(spec):
        h = (spec.hi - spec.lo) / spec.n
        return tuple(float(source(spec.lo + i * h)) for i in range(1, spec.n))

    t.register_ext("pde_source_0", lambda l=left: interior(l))
    t.register_ext("pde_source_1", lambda r=right: interior(r))

    b_left = t.instantiate_bead("pde_solver")
    b_right = t.instantiate_bead("pde_solver")
    b_med = t.instantiate_bead("pde_mediator")
    for bead, spec, side in ((b_left, left, 0), (b_right, right, 1)):
        t.write_cell(bead.cells["side"], codec.enc_int(side))
        t.write_cell(bead.cells["dom_lo"], codec.enc_float(spec.lo))
        t.write_cell(bead.cells["dom_hi"], codec.enc_float(spec.hi))
        t.write_cell(bead.cells["grid_n"], codec.enc_int(spec.n))
        t.write_cell(bead.cells["bc_value"], codec.enc_float(spec.bc))
    w_left = t.define_weave([b_left.bead_id, b_med.bead_id])
    w_right = t.define_weave([b_right.bead_id, b_med.bead_id])
    t.spawn_string(w_left.weave_id, "solve_loop")
    t.spawn_string(w_right.weave_id, "solve_loop")
    return (b_left, b_right, b_med), (w_left, w_right)


def _collect_report(t, left, right, w_left, w_right):
    iters = t.get_int(w_left.weave_id, "iters")
    if not t.get_int(w_left.weave_id, "converged"):
        raise NoConvergenceError(f"interface did not settle within {iters} iterations")
    report = PdeReport(
        interface_value=t.get_float(w_left.weave_id, "u_gamma"),
        iterations=iters,
    )
    lt = t.tables[w_left.weave_id]
    rt = t.tables[w_right.weave_id]
    l_addr = codec.dec_addr(lt.resolve("solution_ptr").value)
    r_addr = codec.dec_addr(rt.resolve("solution_ptr").value)
    report.left = codec.dec_floats(t.mem_read(l_addr))
    report.right = codec.dec_floats(t.mem_read(r_addr))
    hl = (left.hi - left.lo) / left.n
    hr = (right.hi - right.lo) / right.n
    report.left_x = [left.lo + i * hl for i in range(left.n + 1)]
    report.right_x = [right.lo + i * hr for i in range(right.n + 1)]
    return report


def solve_mediated_pde(left: PdeDomainSpec, right: PdeDomainSpec, source,
                       theta=0.5, tol=1e-10, max_iters=200, u_gamma0=0.0,
                       quantum=8, seed=0) -> PdeReport:
    t = Tapestry()
    beads, (w_left, w_right) = compose_pde(
        t, left, right, source, theta=theta, tol=tol, max_iters=max_iters, u_gamma0=u_gamma0
    )
    Executor(t, quantum=quantum, seed=seed).run()
    return _collect_report(t, left, right, w_left, w_right)


def solve_mediated_pde_on_grid(left: PdeDomainSpec, right: PdeDomainSpec, source,
                               theta=0.5, tol=1e-10, max_iters=200, u_gamma0=0.0,
                               migrate_at_tick=None, max_ticks=500_000) -> PdeReport:
    """Same demo hosted on a two-node grid, optionally migrating the whole
    solver island from node 0 to node 1 mid-run."""

    def composer(t):
        compose_pde(t, left, right, source, theta=theta, tol=tol,
                    max_iters=max_iters, u_gamma0=u_gamma0)

    def dst_composer(t):
        compose_pde_modules_only(t, left, right, source)

    sim = GridSim(total_bits=48, vm_bits=40, loss=0.0, seed=0)
    sim.add_node(composer=composer)
    sim.add_node(composer=dst_composer)

    if migrate_at_tick is not None:
        def do_migrate(s):
            src_t = s.nodes[0].tapestry
            if not src_t.strings:
                return
            island = identify_islands(src_t)[0]
            migrate_island(s, island, 0, 1)

        sim.at_tick(migrate_at_tick, do_migrate)

    sim.run(max_ticks=max_ticks)
    host = sim.nodes[1].tapestry if migrate_at_tick is not None else sim.nodes[0].tapestry
    weave_ids = sorted(host.weaves)
    w_left = host.weaves[weave_ids[0]]
    w_right = host.weaves[weave_ids[1]]
    return _collect_report(host, left, right, w_left, w_right)


def compose_pde_modules_only(tapestry, left, right, source):
    """Register the PDE modules and host functions without instantiating
    anything; migration targets need the code context in place."""
    t = Tapestry()
    compose_pde(t, left, right, source)
    for name, mdef in t.modules.items():
        tapestry.register_module(mdef)
    for name, fn in t.ext_functions.items():
        tapestry.register_ext(name, fn)
