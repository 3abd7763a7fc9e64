"""Stiff/non-stiff ODE integration with runtime method switching.

Two integrator modules export a `step` function: an Adams-Bashforth-style
explicit pair (cheap, stability-limited) and a backward-Euler implicit
method (expensive per step, A-stable). The driver string integrates with
whichever implementation its weave currently binds; when the recommender
decides to switch, the driver rebinds `step` in its own weave, so the next
call boundary picks up the other integrator while other weaves keep their
binding.

Stiffness never gets announced by the problem: the driver derives features
from the step-size collapse ratio (accepted h against the span scale) and
feeds attempt counts back as negative reward, which is what lets a trained
policy discover "near-stiff under a non-stiff method: switch".
"""

import math
from dataclasses import dataclass, field

from .. import codec
from ..errors import StepUnderflowError
from ..model import ModuleDef, Tapestry
from ..recommender import EXPLOIT, EXPLORE, QPolicy, RuntimeRecommender
from ..scheduler import Executor

ACTIONS = ("stay", "switch-to-stiff", "switch-to-non-stiff")
MIN_STEP = 1e-10


@dataclass
class OdeProblem:
    name: str
    rhs: object
    t0: float
    t1: float
    y0: float
    tol: float = 1e-3
    exact: object = None  # callable, test oracle only
    evaluations: int = 0

    def counted(self):
        def wrapped(t, y):
            self.evaluations += 1
            return float(self.rhs(t, y))
        return wrapped


@dataclass
class OdeReport:
    final_y: float
    attempts: int
    accepted: int
    switches: list
    evaluations: int
    samples: list = field(default_factory=list)

    def lines(self):
        return [
            f"final_y={self.final_y!r}",
            f"attempts={self.attempts}",
            f"accepted={self.accepted}",
            f"switches={len(self.switches)}",
            f"rhs_evaluations={self.evaluations}",
        ]


def _explicit_step(ctx, t, y, h, fprev, have_prev):
    """Adams-Bashforth two-step; a midpoint (RK2) starter covers the steps
    where no usable history exists. The Euler companion gives the error
    scale either way."""
    f0 = ctx.ext("ode_rhs", t, y)
    euler = y + h * f0
    if have_prev:
        y_new = y + h * (1.5 * f0 - 0.5 * fprev)
    else:
        f_mid = ctx.ext("ode_rhs", t + h / 2, y + (h / 2) * f0)
        y_new = y + h * f_mid
    est = abs(y_new - euler) + 1e-18
    return (y_new, est, f0)


def _backward_euler(ctx, t, y, h):
    """One implicit step solved by Newton with a numeric slope."""
    z = y + h * ctx.ext("ode_rhs", t, y)  # predictor
    for _ in range(8):
        fz = ctx.ext("ode_rhs", t + h, z)
        g = z - y - h * fz
        if abs(g) < 1e-13 * max(1.0, abs(z)):
            break
        dz = 1e-7 * max(1.0, abs(z))
        f2 = ctx.ext("ode_rhs", t + h, z + dz)
        dg = 1.0 - h * (f2 - fz) / dz
        if dg == 0.0:
            break
        z = z - g / dg
    return z


def _implicit_step(ctx, t, y, h, fprev, have_prev):
    """Backward Euler with a step-doubling error estimate; the halved
    solution is the one returned."""
    z1 = _backward_euler(ctx, t, y, h)
    zh = _backward_euler(ctx, t, y, h / 2)
    z2 = _backward_euler(ctx, t + h / 2, zh, h / 2)
    est = abs(z1 - z2) + 1e-18
    f_new = ctx.ext("ode_rhs", t + h, z2)
    return (z2, est, f_new)


def _idle(ctx):
    yield


def _collapse_bin(h, span):
    ratio = h / (span / 100.0)
    if ratio < 0.02:
        return "stiff"
    if ratio < 0.35:
        return "near-stiff"
    return "smooth"


def _make_driver(problem, use_policy, decide_every=4):
    t0, t1, y0, tol = problem.t0, problem.t1, problem.y0, problem.tol
    span = t1 - t0

    def drive(ctx):
        t, y = t0, y0
        h = span / 50.0
        method = "non-stiff"
        fprev = 0.0
        have_prev = 0
        attempts = 0
        accepted = 0
        since_decision = 0
        t_at_decision = t0
        prev_feats = None
        prev_action = None
        while t < t1 - 1e-12:
            h = min(h, t1 - t)
            y_new, est, f_new = yield from ctx.call("step", t, y, h, fprev, have_prev)
            attempts += 1
            since_decision += 1
            if est <= tol:
                t += h
                y = y_new
                fprev = f_new
                have_prev = 1
                accepted += 1
                grow = 0.9 * math.sqrt(tol / est) if est > 0 else 4.0
                h *= min(4.0, max(0.25, grow))
            else:
                h *= max(0.25, 0.9 * math.sqrt(tol / est))
                have_prev = 0  # step size changed too much for the pair
            if h < MIN_STEP and (t1 - t) > 10 * MIN_STEP:
                raise StepUnderflowError(f"step collapsed to {h:.3e} at t={t:.6f}")
            if use_policy and since_decision >= decide_every:
                feats = (("state", _collapse_bin(h, span)), ("algorithm", method))
                if prev_feats is not None:
                    # reward: span progress bought per decision window, less
                    # the attempts spent and a surcharge for switching itself
                    progress = (t - t_at_decision) / span
                    reward = 40.0 * progress - since_decision / decide_every
                    if prev_action != "stay":
                        reward -= 0.25
                    ctx.reward(prev_feats, prev_action, reward, feats, ACTIONS)
                action = ctx.recommend(feats, ACTIONS)
                if action == "switch-to-stiff" and method != "stiff":
                    yield from ctx.rebind("step", "ode_implicit", "step")
                    method = "stiff"
                    have_prev = 0
                    h = min(h * 8.0, span / 20.0)  # the A-stable method retries big
                    ctx.set_int("switch_count", ctx.get_int("switch_count") + 1)
                elif action == "switch-to-non-stiff" and method != "non-stiff":
                    yield from ctx.rebind("step", "ode_explicit", "step")
                    method = "non-stiff"
                    have_prev = 0
                prev_feats, prev_action = feats, action
                since_decision = 0
                t_at_decision = t
            yield
        if use_policy and prev_feats is not None:
            progress = (t - t_at_decision) / span
            ctx.reward(prev_feats, prev_action, 40.0 * progress - since_decision / decide_every)
        ctx.set_float("final_y", y)
        ctx.set_int("attempts", attempts)
        ctx.set_int("accepted", accepted)
        ctx.set_int("done", 1)

    return drive


def integrate_ode_switching(problem: OdeProblem, policy: QPolicy = None,
                            seed=0, learn=True) -> OdeReport:
    """Integrate the span; policy None means explicit-only (never switch)."""
    t = Tapestry()
    t.register_module(ModuleDef(
        "ode_driver",
        globals_=[
            ("final_y", codec.enc_float(0.0)),
            ("attempts", codec.enc_int(0)),
            ("accepted", codec.enc_int(0)),
            ("switch_count", codec.enc_int(0)),
            ("done", codec.enc_int(0)),
        ],
        entries={"drive": _make_driver(problem, use_policy=policy is not None)},
    ))
    t.register_module(ModuleDef(
        "ode_implicit", globals_=[("pad_i", codec.enc_int(0))],
        entries={"idle": _idle}, exports={"step": _implicit_step},
    ))
    t.register_module(ModuleDef(
        "ode_explicit", globals_=[("pad_e", codec.enc_int(0))],
        entries={"idle": _idle}, exports={"step": _explicit_step},
    ))
    t.register_ext("ode_rhs", problem.counted())
    b_driver = t.instantiate_bead("ode_driver")
    b_imp = t.instantiate_bead("ode_implicit")
    b_exp = t.instantiate_bead("ode_explicit")
    # the explicit bead is listed last, so "step" initially binds to it
    weave = t.define_weave([b_driver.bead_id, b_imp.bead_id, b_exp.bead_id])
    t.spawn_string(weave.weave_id, "drive")
    rec = RuntimeRecommender(policy, learn=learn) if policy is not None else None
    ex = Executor(t, recommender=rec, seed=seed, quantum=64)
    ex.run()
    switches = []
    if rec is not None and t.get_int(weave.weave_id, "switch_count"):
        for kind, feats, action, _ in rec.decisions:
            if kind == "select" and action == "switch-to-stiff":
                switches.append((dict(feats).get("state"), action))
    return OdeReport(
        final_y=t.get_float(weave.weave_id, "final_y"),
        attempts=t.get_int(weave.weave_id, "attempts"),
        accepted=t.get_int(weave.weave_id, "accepted"),
        switches=switches[: t.get_int(weave.weave_id, "switch_count")],
        evaluations=problem.evaluations,
    )


def stiff_relaxation_problem(lam=1000.0, name="stiff_relax"):
    """y' = -lam (y - cos t), y(0) = 0: a fast transient onto slow dynamics."""
    a = lam * lam / (1 + lam * lam)
    b = lam / (1 + lam * lam)

    def rhs(t, y):
        return -lam * (y - math.cos(t))

    def exact(t):
        return a * math.cos(t) + b * math.sin(t) - a * math.exp(-lam * t)

    # per-step tolerance loose enough that the explicit method is limited by
    # stability rather than accuracy, which is what stiffness means here
    return OdeProblem(name, rhs, 0.0, 3.0, 0.0, tol=3e-3, exact=exact)


def decay_problem(name="plain_decay"):
    return OdeProblem(name, lambda t, y: -y, 0.0, 2.0, 1.0, tol=1e-6,
                      exact=lambda t: math.exp(-t))


def stiff_family(count=6):
    """Training family with varying stiffness, including benign members."""
    problems = []
    for k in range(count):
        lam = 200.0 * (k + 1)
        problems.append(stiff_relaxation_problem(lam=lam, name=f"stiff_{int(lam)}"))
    problems.append(decay_problem())
    return problems


def train_ode_policy(episodes=20, seed=3) -> QPolicy:
    policy = QPolicy(alpha=0.3, gamma=0.7, seed=seed, mode=EXPLORE)
    family = stiff_family()
    for ep in range(episodes):
        spec = family[ep % len(family)]
        problem = OdeProblem(spec.name, spec.rhs, spec.t0, spec.t1, spec.y0,
                             spec.tol, spec.exact)
        try:
            integrate_ode_switching(problem, policy=policy, seed=seed + ep)
        except StepUnderflowError:
            continue
    policy.set_mode(EXPLOIT)
    return policy
