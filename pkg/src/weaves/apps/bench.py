"""Calibrated-delay scheduling benchmark.

A baseline busy loop is calibrated once to a wall-clock target. The n-way
composed run builds n beads of the delay module under n singleton weaves,
each string burning 1/n of the calibrated work in fixed-size chunks with a
yield between chunks. Total composed time against the plain loop bounds the
whole runtime overhead (creation, namespace switches, dispatch accounting),
since the useful work is held constant while the flow count scales.
"""

import gc
import time

from .. import codec
from ..model import ModuleDef, Tapestry
from ..scheduler import Executor

CHUNK = 4000  # busy-loop iterations per yield


def busy(units: int) -> int:
    x = 1
    for _ in range(units):
        x = (x * 1103515245 + 12345) & 0x7FFFFFFF
    return x


def calibrate(target_seconds=2.0, probe_units=2_000_000) -> int:
    """Busy-loop units that take about target_seconds on this host."""
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        t0 = time.perf_counter()
        busy(probe_units)
        dt = time.perf_counter() - t0
    finally:
        if gc_was_enabled:
            gc.enable()
    rate = probe_units / dt
    return max(CHUNK, int(rate * target_seconds))


def measure_baseline(units: int) -> float:
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        t0 = time.perf_counter()
        busy(units)
        return time.perf_counter() - t0
    finally:
        if gc_was_enabled:
            gc.enable()


def _delay_entry(ctx):
    left = ctx.get_int("units")
    while left > 0:
        step = CHUNK if left > CHUNK else left
        busy(step)
        left -= step
        yield


def run_delay_benchmark(n: int, units: int, quantum=64, seed=0) -> dict:
    """Compose n singleton flows splitting `units` of work; time the run."""
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        t0 = time.perf_counter()
        t = Tapestry()
        t.register_module(ModuleDef(
            "delay", globals_=[("units", codec.enc_int(0))],
            entries={"burn": _delay_entry},
        ))
        share = units // n
        extra = units - share * n
        for k in range(n):
            bead = t.instantiate_bead("delay")
            t.write_cell(bead.cells["units"], codec.enc_int(share + (extra if k == 0 else 0)))
            weave = t.define_weave([bead.bead_id])
            t.spawn_string(weave.weave_id, "burn")
        ex = Executor(t, quantum=quantum, seed=seed, keep_trace=False)
        ex.run()
        total = time.perf_counter() - t0
    finally:
        if gc_was_enabled:
            gc.enable()
    switches = ex.step_count
    return {
        "n": n,
        "units": units,
        "total_seconds": total,
        "dispatch_steps": switches,
        "per_step_overhead_us": None,  # filled against a baseline by callers
    }


def run_scaling_suite(ns=(1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024),
                      target_seconds=2.0, units=None) -> dict:
    """The full sweep: baseline plus one composed run per flow count."""
    if units is None:
        units = calibrate(target_seconds)
    baseline = measure_baseline(units)
    rows = []
    for n in ns:
        row = run_delay_benchmark(n, units)
        row["baseline_seconds"] = baseline
        row["ratio"] = row["total_seconds"] / baseline
        row["per_step_overhead_us"] = (
            1e6 * (row["total_seconds"] - baseline) / max(row["dispatch_steps"], 1)
        )
        rows.append(row)
    return {"units": units, "baseline_seconds": baseline, "rows": rows}


def run_repeatability(n=1000, repeats=5, target_seconds=2.0, units=None) -> dict:
    """Run-to-run spread of the composed total at a fixed flow count."""
    if units is None:
        units = calibrate(target_seconds)
    times = [run_delay_benchmark(n, units)["total_seconds"] for _ in range(repeats)]
    times.sort()
    median = times[len(times) // 2]
    spread = (times[-1] - times[0]) / median
    return {
        "n": n,
        "units": units,
        "times": times,
        "median_seconds": median,
        "relative_spread": spread,
    }


def report_lines(suite: dict) -> list:
    lines = [
        f"units={suite['units']}",
        f"baseline_seconds={suite['baseline_seconds']:.4f}",
    ]
    for row in suite["rows"]:
        lines.append(
            "n={n} total_seconds={total_seconds:.4f} ratio={ratio:.4f} "
            "steps={dispatch_steps} per_step_overhead_us={per_step_overhead_us:.3f}".format(**row)
        )
    return lines
