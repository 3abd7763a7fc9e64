"""Command-line interface.

Exit codes: 0 success, 2 configuration parse error, 3 runtime error,
4 unrecoverable deadlock.
"""

import argparse
import struct
import sys

from . import codec
from .checkpoint import apply_tapestry_state, parse_checkpoint_blob, serialize_tapestry_state
from .config import (
    build_grid,
    build_tapestry,
    parse_tapestry_config,
    serialize_tapestry_config,
)
from .errors import DeadlockUnrecoverableError, ParseError, UnresolvedReferenceError, WeavesError
from .monitor import MonitorSession, monitor_query, serve
from .recommender import QPolicy
from .scheduler import Executor

SAVE_MAGIC = b"WVCF"
_U32 = struct.Struct("<I")


def _read_config(path):
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _make_executor(text, args):
    cfg = parse_tapestry_config(text)
    tapestry, names = build_tapestry(cfg)
    recommender = None
    if getattr(args, "policy_file", None):
        with open(args.policy_file, encoding="utf-8") as fh:
            from .recommender import RuntimeRecommender

            recommender = RuntimeRecommender(QPolicy.from_json(fh.read()))
    ex = Executor(
        tapestry,
        policy=args.policy,
        seed=args.seed,
        quantum=args.quantum,
        recommender=recommender,
    )
    return cfg, ex, names


def _write_trace(ex, path):
    if not path:
        return
    with open(path, "w", encoding="utf-8") as fh:
        for line in ex.trace_lines():
            fh.write(line + "\n")


def cmd_run(args):
    text = _read_config(args.config)
    cfg, ex, names = _make_executor(text, args)
    if args.monitor_script:
        session = MonitorSession(ex, names)
        with open(args.monitor_script, encoding="utf-8") as fh:
            serve(session, fh, sys.stdout)
    ex.run(max_dispatches=args.max_dispatches)
    _write_trace(ex, args.trace)
    for line in monitor_query(ex, "summary"):
        print(line)
    return 0


def cmd_check(args):
    cfg = parse_tapestry_config(_read_config(args.config))
    sys.stdout.write(serialize_tapestry_config(cfg))
    return 0


def cmd_monitor(args):
    text = _read_config(args.config)
    cfg, ex, names = _make_executor(text, args)
    ex.run_slice(max_dispatches=args.at)
    for line in monitor_query(ex, args.query):
        print(line)
    return 0


def cmd_checkpoint(args):
    text = _read_config(args.config)
    cfg, ex, names = _make_executor(text, args)
    ex.run_slice(max_dispatches=args.at)
    blob = serialize_tapestry_state(ex.tapestry, executor=ex)
    body = codec.dumps_value((text, blob))
    with open(args.out, "wb") as fh:
        fh.write(SAVE_MAGIC + _U32.pack(1) + body)
    print(f"saved {args.out} at dispatch boundary {args.at}")
    return 0


def cmd_restore(args):
    with open(args.file, "rb") as fh:
        raw = fh.read()
    if raw[:4] != SAVE_MAGIC:
        raise WeavesError("not a saved run (bad magic)")
    text, blob = codec.loads_value(raw[8:])
    cfg, ex, names = _make_executor(text, args)
    apply_tapestry_state(ex.tapestry, blob)
    sections = parse_checkpoint_blob(blob)
    if "SCHD" in sections:
        ex.restore_sched_state(sections["SCHD"])
    ex.run(max_dispatches=args.max_dispatches)
    _write_trace(ex, args.trace)
    for line in monitor_query(ex, "summary"):
        print(line)
    return 0


def cmd_grid_run(args):
    cfg = parse_tapestry_config(_read_config(args.config))
    sim = build_grid(cfg)
    sim.run(max_ticks=args.max_ticks)
    print(f"ticks={sim.tick}")
    print(f"delivered={sim.delivered}")
    print(f"dropped={sim.dropped}")
    for node_id in sorted(sim.nodes):
        t = sim.nodes[node_id].tapestry
        finished = sum(1 for s in t.strings.values() if s.status == "finished")
        print(f"node {node_id} strings={len(t.strings)} finished={finished}")
    if args.checkpoint_out and sim.saved_checkpoints:
        with open(args.checkpoint_out, "wb") as fh:
            fh.write(sim.saved_checkpoints[-1].serialize())
        print(f"checkpoint={args.checkpoint_out}")
    return 0


def cmd_bench(args):
    from .apps.bench import report_lines, run_repeatability, run_scaling_suite

    ns = [int(x) for x in args.ns.split(",")] if args.ns else [args.n]
    suite = run_scaling_suite(ns=ns, target_seconds=args.target_seconds)
    for line in report_lines(suite):
        print(line)
    if args.repeats > 1:
        rep = run_repeatability(n=args.n, repeats=args.repeats, units=suite["units"])
        print(f"repeat_n={rep['n']}")
        print(f"repeat_median_seconds={rep['median_seconds']:.4f}")
        print(f"repeat_relative_spread={rep['relative_spread']:.5f}")
    return 0


def cmd_demo(args):
    if args.which == "pde":
        from .apps.pde import PdeDomainSpec, solve_mediated_pde, solve_mediated_pde_on_grid

        left = PdeDomainSpec(0.0, 0.5, args.n, bc=0.0)
        right = PdeDomainSpec(0.5, 1.0, args.n, bc=1.0)
        if args.migrate_at is not None:
            report = solve_mediated_pde_on_grid(
                left, right, lambda x: 0.0, theta=args.theta, tol=args.tol,
                migrate_at_tick=args.migrate_at,
            )
        else:
            report = solve_mediated_pde(left, right, lambda x: 0.0,
                                        theta=args.theta, tol=args.tol)
        for line in report.lines():
            print(line)
        return 0
    if args.which == "quad":
        from .apps.quadrature import (
            QuadratureProblem,
            integrate_adaptive_quadrature,
            singular_family,
            train_quadrature_policy,
        )

        policy = train_quadrature_policy(episodes=args.episodes)
        if args.policy_out:
            with open(args.policy_out, "w", encoding="utf-8") as fh:
                fh.write(policy.to_json())
        total = 0
        for spec in singular_family():
            problem = QuadratureProblem(spec.name, spec.f, spec.lo, spec.hi,
                                        spec.tol, spec.exact)
            report = integrate_adaptive_quadrature(problem, policy=policy, learn=False)
            total += report.evaluations
            print(f"problem={spec.name} value={report.value:.8f} "
                  f"evaluations={report.evaluations} rollbacks={report.failures}")
        print(f"mean_evaluations={total / 10:.1f}")
        return 0
    if args.which == "ode":
        from .apps.ode import integrate_ode_switching, stiff_relaxation_problem, train_ode_policy
        from .recommender import extract_policy_rules

        problem = stiff_relaxation_problem()
        explicit = integrate_ode_switching(problem)
        policy = train_ode_policy(episodes=args.episodes)
        problem2 = stiff_relaxation_problem()
        switched = integrate_ode_switching(problem2, policy=policy, learn=False)
        print(f"explicit_attempts={explicit.attempts}")
        print(f"switched_attempts={switched.attempts}")
        print(f"step_ratio={explicit.attempts / max(switched.attempts, 1):.1f}")
        print(f"switch_events={len(switched.switches)}")
        for rule in extract_policy_rules(policy, margin=0.05):
            print(f"rule {rule.text}")
        return 0
    raise WeavesError(f"unknown demo {args.which!r}")


def build_parser():
    parser = argparse.ArgumentParser(prog="weaves", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--quantum", type=int, default=64)
        p.add_argument("--policy", default="round_robin_classes",
                       choices=["round_robin_classes", "seeded_random"])
        p.add_argument("--policy-file", default=None)
        p.add_argument("--trace", default=None)

    p = sub.add_parser("run", help="run a tapestry configuration to completion")
    p.add_argument("config")
    p.add_argument("--max-dispatches", type=int, default=None)
    p.add_argument("--monitor-script", default=None)
    common(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("check", help="parse a configuration and print its canonical form")
    p.add_argument("config")
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("monitor", help="run to a boundary and answer a query")
    p.add_argument("config")
    p.add_argument("query")
    p.add_argument("--at", type=int, default=None, help="dispatch boundary to stop at")
    common(p)
    p.set_defaults(fn=cmd_monitor)

    p = sub.add_parser("checkpoint", help="run to a boundary and save the state")
    p.add_argument("config")
    p.add_argument("--at", type=int, required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_checkpoint)

    p = sub.add_parser("restore", help="resume a saved run")
    p.add_argument("file")
    p.add_argument("--max-dispatches", type=int, default=None)
    common(p)
    p.set_defaults(fn=cmd_restore)

    p = sub.add_parser("grid", help="grid scenarios")
    gsub = p.add_subparsers(dest="grid_command", required=True)
    g = gsub.add_parser("run", help="run a grid scenario with scripted events")
    g.add_argument("config")
    g.add_argument("--max-ticks", type=int, default=100_000)
    g.add_argument("--checkpoint-out", default=None)
    g.set_defaults(fn=cmd_grid_run)

    p = sub.add_parser("bench", help="scheduling benchmarks")
    bsub = p.add_subparsers(dest="bench_command", required=True)
    b = bsub.add_parser("delay", help="calibrated delay-loop scaling")
    b.add_argument("--n", type=int, default=1000)
    b.add_argument("--ns", default=None, help="comma list of flow counts")
    b.add_argument("--target-seconds", type=float, default=2.0)
    b.add_argument("--repeats", type=int, default=5)
    b.set_defaults(fn=cmd_bench)

    p = sub.add_parser("demo", help="demo applications")
    p.add_argument("which", choices=["pde", "quad", "ode"])
    p.add_argument("--n", type=int, default=64, help="grid points per subdomain (pde)")
    p.add_argument("--theta", type=float, default=0.5)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--migrate-at", type=int, default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--policy-out", default=None)
    p.set_defaults(fn=cmd_demo)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "command", None) == "demo" and args.episodes is None:
        args.episodes = 40 if args.which == "quad" else 20
    try:
        return args.fn(args)
    except (ParseError, UnresolvedReferenceError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    except DeadlockUnrecoverableError as err:
        print(f"deadlock: {err}", file=sys.stderr)
        return 4
    except WeavesError as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
