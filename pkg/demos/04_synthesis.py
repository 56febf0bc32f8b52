"""Synthesize a minimal-communication controller for one scenario.

The solver minimizes a reweighted nuclear-norm surrogate of the number of
inter-agent messages over all achievable, delay-respecting, robustly safe
closed loops, then reports the per-pair message counts implied by the
cross-gain ranks.

Run with a scenario name as the first argument (default: relative).
"""

import sys
import time

import numpy as np

from mincomm import SolverOptions, compile_scenario, preset, synthesize
from mincomm.factorization import schedule_summary, truncate_and_factorize

name = sys.argv[1] if len(sys.argv) > 1 else "relative"
problem = compile_scenario(preset(name))
options = SolverOptions(mode="ours", direction="lower", inner_max_iters=2500)

t0 = time.time()
result = synthesize(problem, options)
print(f"{name}: {'feasible' if result.feasible else 'infeasible'} "
      f"in {time.time() - t0:.0f}s (direction {result.direction})")
print("objective trace:", [round(x, 4) for x in result.objective_trace])

if result.feasible:
    print("residuals:", {k: f"{v:.2e}" for k, v in result.residuals.items()})
    schedules, gain, report = truncate_and_factorize(result.gain, problem)
    summary = schedule_summary(schedules)
    print(f"total inter-agent messages: {summary.total}")
    for (receiver, sender), count in sorted(summary.pair_counts.items()):
        if count:
            print(f"  vehicle {sender} -> vehicle {receiver}: {count} messages")
    if report["rollbacks"]:
        print("truncation rollbacks:", report["rollbacks"])
else:
    print("diagnostics:", result.diagnostics)
