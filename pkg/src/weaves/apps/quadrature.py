"""Adaptive quadrature with runtime rule recommendation and rollback.

The worker runs as a single string. For every subinterval it takes a
checkpoint, asks the recommender for a rule, and estimates the error by
comparing the rule applied whole against the rule applied to both halves.
A rule that produces a non-finite value is a failed path: the worker
rewards the failure, rolls the string back to the checkpoint, and the
recommender re-selects with that (state, action) pruned, so the identical
subinterval is never retried with the rule that just failed. Subdivision
is driven by a worst-interval heap against a global error budget, which
keeps endpoint singularities from trapping the recursion.

Rules that evaluate at interval endpoints blow up naturally on integrable
endpoint singularities; the optional `fragile` rule fails loudly on any
large sample, giving tests a deterministic failure trigger.
"""

import heapq
import math
from dataclasses import dataclass, field

from .. import codec
from ..errors import BudgetExceededError
from ..model import ModuleDef, Tapestry
from ..recommender import EXPLOIT, EXPLORE, QPolicy, RuntimeRecommender
from ..scheduler import Executor

_G5_NODES = (
    -0.9061798459386640, -0.5384693101056831, 0.0,
    0.5384693101056831, 0.9061798459386640,
)
_G5_WEIGHTS = (
    0.2369268850561891, 0.4786286704993665, 0.5688888888888889,
    0.4786286704993665, 0.2369268850561891,
)

FRAGILE_LIMIT = 1e9


def _midpoint(f, a, b):
    return (b - a) * f((a + b) / 2)


def _trapezoid(f, a, b):
    return (b - a) * (f(a) + f(b)) / 2


def _simpson(f, a, b):
    return (b - a) * (f(a) + 4 * f((a + b) / 2) + f(b)) / 6


def _gauss5(f, a, b):
    mid = (a + b) / 2
    half = (b - a) / 2
    return half * sum(w * f(mid + half * x) for w, x in zip(_G5_WEIGHTS, _G5_NODES))


def _fragile(f, a, b):
    # deliberately brittle high-order closed rule: refuses large samples
    ys = [f(a), f((a + b) / 2), f(b)]
    if any(not math.isfinite(y) or abs(y) > FRAGILE_LIMIT for y in ys):
        return float("nan")
    return (b - a) * (ys[0] + 4 * ys[1] + ys[2]) / 6


RULES = {
    "midpoint": (_midpoint, 1),
    "trapezoid": (_trapezoid, 2),
    "simpson": (_simpson, 3),
    "gauss5": (_gauss5, 5),
    "fragile": (_fragile, 3),
}

DEFAULT_RULES = ("midpoint", "trapezoid", "simpson", "gauss5")

MAX_RULE_COST = max(pts for _, pts in RULES.values()) * 3


@dataclass
class QuadratureProblem:
    name: str
    f: object
    lo: float
    hi: float
    tol: float
    exact: float = float("nan")
    evaluations: int = 0

    def counted(self):
        def wrapped(x):
            self.evaluations += 1
            try:
                return float(self.f(x))
            except (ZeroDivisionError, OverflowError, ValueError):
                return float("inf")
        return wrapped


@dataclass
class QuadReport:
    value: float
    evaluations: int
    nodes: int
    completed: bool
    decisions: list = field(default_factory=list)
    failures: int = 0


def _edge_kind(a, b, lo, hi):
    at_left = a <= lo
    at_right = b >= hi
    if at_left and at_right:
        return "whole"
    if at_left:
        return "left"
    if at_right:
        return "right"
    return "interior"


def _make_worker(problem, rule_names, budget, fixed_rule):
    lo, hi = problem.lo, problem.hi
    span = hi - lo
    tol = problem.tol

    def eval_rule(ctx, rule, a, b):
        fn = f"quad_f"
        apply_rule, _pts = RULES[rule]

        def f(x):
            return ctx.ext(fn, x)

        m = (a + b) / 2
        i1 = apply_rule(f, a, b)
        i2 = apply_rule(f, a, m) + apply_rule(f, m, b)
        ok = math.isfinite(i1) and math.isfinite(i2)
        return i2, (abs(i2 - i1) if ok else float("inf")), ok

    def features_for(a, b):
        width = b - a
        wbin = min(int(round(math.log2(span / width))) if width > 0 else 40, 40)
        return (
            ("edge", _edge_kind(a, b, lo, hi)),
            ("wbin", wbin),
            ("#lo", repr(a)),
            ("#hi", repr(b)),
        )

    def process_node(ctx, a, b):
        feats = features_for(a, b)
        if fixed_rule is not None:
            value, est, ok = eval_rule(ctx, fixed_rule, a, b)
            if not ok:
                return value, est, False
            return value, est, True
        cp = yield from ctx.checkpoint()
        rule = ctx.recommend(feats, tuple(rule_names))
        value, est, ok = eval_rule(ctx, rule, a, b)
        if not ok:
            ctx.reward(feats, rule, -2.0)
            yield from ctx.rollback(
                cp, feats, rule,
                tuple_view=(("#failed_rule", rule), ("#width", repr(b - a))),
            )
        ctx.drop_checkpoint(cp)
        cost = RULES[rule][1] * 3 / MAX_RULE_COST
        splits = est > tol * max((b - a) / span, 1e-12)
        ctx.reward(feats, rule, -(cost + (1.0 if splits else 0.0)))
        return value, est, True

    def worker(ctx):
        result = yield from process_node(ctx, lo, hi)
        if result is None:  # pragma: no cover - rollback path re-enters above
            return
        value, est, ok = result
        if not ok:
            ctx.set_int("failed", 1)
            return
        counter = 0
        heap = [(-est, counter, lo, hi, value, est)]
        total = value
        errsum = est
        nodes = 1
        # the pair comparison estimates the coarse value's error, and the
        # returned refined value is better; a 4x margin keeps the true error
        # inside the requested tolerance on the singular family
        accept_at = tol / 4
        while errsum > accept_at and heap:
            if ctx.ext("quad_evals") > budget:
                raise BudgetExceededError(
                    f"{problem.name}: {budget} evaluations exhausted (err {errsum:.3g})"
                )
            neg_est, _cnt, a, b, val, est_n = heapq.heappop(heap)
            if est_n <= 0:
                break
            m = (a + b) / 2
            out = []
            bad = False
            for aa, bb in ((a, m), (m, b)):
                r = yield from process_node(ctx, aa, bb)
                v2, e2, ok2 = r
                if not ok2:
                    bad = True
                    break
                out.append((v2, e2, aa, bb))
            if bad:
                ctx.set_int("failed", 1)
                return
            total += sum(v for v, _, _, _ in out) - val
            errsum += sum(e for _, e, _, _ in out) - est_n
            for v2, e2, aa, bb in out:
                counter += 1
                nodes += 1
                heapq.heappush(heap, (-e2, counter, aa, bb, v2, e2))
            yield
        ctx.set_float("result", total)
        ctx.set_int("node_count", nodes)
        ctx.set_int("done", 1)

    return worker


def integrate_adaptive_quadrature(problem: QuadratureProblem, policy: QPolicy = None,
                                  rules=DEFAULT_RULES, budget=200_000,
                                  fixed_rule=None, seed=0, learn=True) -> QuadReport:
    """Integrate one problem; either a trained policy or a fixed rule."""
    if policy is None and fixed_rule is None:
        raise ValueError("need a policy or a fixed rule")
    t = Tapestry()
    t.register_module(ModuleDef(
        "quad",
        globals_=[
            ("result", codec.enc_float(0.0)),
            ("done", codec.enc_int(0)),
            ("failed", codec.enc_int(0)),
            ("node_count", codec.enc_int(0)),
        ],
        entries={"integrate": _make_worker(problem, rules, budget, fixed_rule)},
    ))
    counted = problem.counted()
    t.register_ext("quad_f", counted)
    t.register_ext("quad_evals", lambda: problem.evaluations)
    bead = t.instantiate_bead("quad")
    weave = t.define_weave([bead.bead_id])
    t.spawn_string(weave.weave_id, "integrate")
    rec = RuntimeRecommender(policy, learn=learn) if policy is not None else None
    ex = Executor(t, recommender=rec, seed=seed, quantum=64)
    ex.run()
    completed = bool(t.get_int(weave.weave_id, "done"))
    report = QuadReport(
        value=t.get_float(weave.weave_id, "result"),
        evaluations=problem.evaluations,
        nodes=t.get_int(weave.weave_id, "node_count"),
        completed=completed,
        decisions=list(rec.decisions) if rec else [],
        failures=sum(1 for d in (rec.decisions if rec else []) if d[0] == "prune"),
    )
    return report


def singular_family(count=10, tol=1e-5):
    """Integrable endpoint singularities x^-p plus a smooth part."""
    problems = []
    for k in range(count):
        p = 0.30 + 0.04 * k  # 0.30 .. 0.66
        c = 1.0 + 0.3 * (k % 3)
        exact = 1.0 / (1.0 - p) + c * math.sin(1.0)

        def f(x, p=p, c=c):
            if x <= 0.0:
                return float("inf")
            return x ** (-p) + c * math.cos(x)

        problems.append(QuadratureProblem(
            name=f"singular_p{p:.2f}", f=f, lo=0.0, hi=1.0, tol=tol, exact=exact,
        ))
    return problems


def train_quadrature_policy(episodes=40, seed=7, tol=1e-5, rules=DEFAULT_RULES,
                            problems=None) -> QPolicy:
    """Explore the rule space across the singular family, then exploit."""
    policy = QPolicy(alpha=0.25, gamma=0.0, seed=seed, mode=EXPLORE)
    base = problems if problems is not None else singular_family(tol=tol)
    for ep in range(episodes):
        spec = base[ep % len(base)]
        problem = QuadratureProblem(spec.name, spec.f, spec.lo, spec.hi, spec.tol, spec.exact)
        try:
            integrate_adaptive_quadrature(problem, policy=policy, rules=rules, seed=seed + ep)
        except BudgetExceededError:
            continue
    policy.set_mode(EXPLOIT)
    return policy


def fixed_rule_sweep(problems, rules=DEFAULT_RULES, budget=200_000):
    """Evaluation counts per fixed rule; rules that fail or overrun the
    budget on any family member are disqualified."""
    results = {}
    for rule in rules:
        counts = []
        ok = True
        for spec in problems:
            problem = QuadratureProblem(spec.name, spec.f, spec.lo, spec.hi, spec.tol, spec.exact)
            try:
                report = integrate_adaptive_quadrature(problem, fixed_rule=rule, budget=budget)
            except BudgetExceededError:
                ok = False
                break
            if not report.completed or (
                math.isfinite(spec.exact) and abs(report.value - spec.exact) > spec.tol
            ):
                ok = False
                break
            counts.append(report.evaluations)
        results[rule] = sum(counts) / len(counts) if ok and counts else None
    return results
