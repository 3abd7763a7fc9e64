import math

import pytest

from weaves.errors import BudgetExceededError, NoLegalActionError
from weaves.recommender import EXPLORE, QPolicy
from weaves.apps.quadrature import (
    DEFAULT_RULES,
    QuadratureProblem,
    fixed_rule_sweep,
    integrate_adaptive_quadrature,
    singular_family,
    train_quadrature_policy,
)


def test_linear_integrand_single_node_any_rule():
    for rule in DEFAULT_RULES:
        p = QuadratureProblem("lin", lambda x: 3 * x, 0.0, 1.0, 1e-9, exact=1.5)
        rep = integrate_adaptive_quadrature(p, fixed_rule=rule)
        assert rep.completed and rep.nodes == 1
        assert abs(rep.value - 1.5) < 1e-12


def test_eval_counter_matches_integrand_calls_exactly():
    calls = {"n": 0}

    def f(x):
        calls["n"] += 1
        return x * x

    p = QuadratureProblem("sq", f, 0.0, 2.0, 1e-8, exact=8 / 3)
    rep = integrate_adaptive_quadrature(p, fixed_rule="simpson")
    assert rep.evaluations == calls["n"]
    assert abs(rep.value - 8 / 3) < 1e-10


def test_smooth_oscillatory_within_tolerance():
    p = QuadratureProblem("osc", lambda x: math.cos(10 * x), 0.0, 1.0, 1e-7,
                          exact=math.sin(10.0) / 10.0)
    rep = integrate_adaptive_quadrature(p, fixed_rule="gauss5")
    assert rep.completed
    assert abs(rep.value - p.exact) <= p.tol


def test_budget_exceeded_raised():
    p = QuadratureProblem("hard", lambda x: x ** -0.5 if x > 0 else float("inf"),
                          0.0, 1.0, 1e-12)
    with pytest.raises(BudgetExceededError):
        integrate_adaptive_quadrature(p, fixed_rule="gauss5", budget=100)


def test_closed_rules_fail_on_endpoint_singularity():
    fam = singular_family(count=3, tol=1e-5)
    sweep = fixed_rule_sweep(fam)
    assert sweep["trapezoid"] is None
    assert sweep["simpson"] is None
    assert sweep["midpoint"] is not None
    assert sweep["gauss5"] is not None


def test_trained_policy_beats_best_fixed_rule_on_singular_family():
    fam = singular_family(count=10, tol=1e-5)
    sweep = fixed_rule_sweep(fam)
    best_fixed = min(v for v in sweep.values() if v is not None)
    policy = train_quadrature_policy(episodes=40, seed=7)
    total = 0
    for spec in fam:
        p = QuadratureProblem(spec.name, spec.f, spec.lo, spec.hi, spec.tol, spec.exact)
        rep = integrate_adaptive_quadrature(p, policy=policy, seed=200, learn=False)
        assert rep.completed
        assert abs(rep.value - spec.exact) <= spec.tol
        total += rep.evaluations
    assert total / len(fam) <= best_fixed, (total / len(fam), best_fixed)


def _subinterval_of(feats):
    d = dict(feats)
    return (d.get("#lo"), d.get("#hi"))


def test_failed_rule_never_retried_on_same_subinterval():
    # fragile first in the list: a fresh explore policy hits it immediately
    rules = ("fragile", "midpoint", "gauss5")
    policy = QPolicy(seed=3, mode=EXPLORE)
    spec = singular_family(count=1, tol=1e-5)[0]
    p = QuadratureProblem(spec.name, spec.f, spec.lo, spec.hi, spec.tol, spec.exact)
    rep = integrate_adaptive_quadrature(p, policy=policy, rules=rules, seed=17)
    assert rep.completed
    assert abs(rep.value - spec.exact) <= spec.tol
    assert rep.failures > 0  # rollbacks happened
    pruned_at = {}  # subinterval -> set of rules failed there
    for kind, feats, action, payload in rep.decisions:
        key = _subinterval_of(feats)
        if kind == "prune":
            pruned_at.setdefault(key, set()).add(action)
        elif kind == "select":
            banned = pruned_at.get(key, set())
            assert action not in banned, (key, action)


def test_mode_flip_improves_average_episode_cost():
    # learning-curve check: explore first, then exploit; the exploit phase
    # must not cost more evaluations on average than the exploration phase
    from weaves.recommender import EXPLOIT

    family = singular_family(count=3, tol=1e-5)
    policy = QPolicy(alpha=0.25, gamma=0.0, seed=7, mode=EXPLORE)

    def episode_cost(k):
        spec = family[k % len(family)]
        p = QuadratureProblem(spec.name, spec.f, spec.lo, spec.hi, spec.tol, spec.exact)
        integrate_adaptive_quadrature(p, policy=policy, seed=300 + k)
        return p.evaluations

    pre = [episode_cost(k) for k in range(12)]
    policy.set_mode(EXPLOIT)
    post = [episode_cost(k) for k in range(12, 24)]
    assert sum(post) / len(post) <= sum(pre) / len(pre), (pre, post)


def test_all_rules_failing_surfaces_no_legal_action():
    policy = QPolicy(seed=0)
    p = QuadratureProblem("sing", lambda x: x ** -0.5 if x > 0 else float("inf"),
                          0.0, 1.0, 1e-6)
    with pytest.raises(NoLegalActionError):
        integrate_adaptive_quadrature(p, policy=policy, rules=("trapezoid", "fragile"),
                                      seed=5)


def test_rollback_restores_interval_bookkeeping():
    # after a failure-driven rollback the retry decision happens at the same
    # subinterval, and the decision log shows fail -> prune -> re-select
    rules = ("fragile", "gauss5")
    policy = QPolicy(seed=1, mode=EXPLORE)
    spec = singular_family(count=1, tol=1e-4)[0]
    p = QuadratureProblem(spec.name, spec.f, spec.lo, spec.hi, spec.tol, spec.exact)
    rep = integrate_adaptive_quadrature(p, policy=policy, rules=rules, seed=2)
    assert rep.completed
    prunes = [d for d in rep.decisions if d[0] == "prune"]
    assert prunes
    for _, feats, action, _ in prunes:
        key = _subinterval_of(feats)
        selects_here = [d for d in rep.decisions if d[0] == "select"
                        and _subinterval_of(d[1]) == key]
        # the subinterval was re-decided after the prune, with another rule
        assert any(d[2] != action for d in selects_here)
