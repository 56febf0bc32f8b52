"""Compare the three synthesis modes on one scenario.

'ours' minimizes inter-agent messages only; 'baseline' also minimizes each
agent's use of its own sensors, which wastes budget on intra-agent ranks;
'decentral' forbids communication entirely and fails whenever the sensing
structure makes coordination information essential.

Run with a scenario name as the first argument (default: decoupled).
Equivalent command line:  mincomm compare --scenario <name> --out <dir>
"""

import sys
import time

from mincomm import SolverOptions, compile_scenario, preset, synthesize
from mincomm.factorization import schedule_summary, truncate_and_factorize

name = sys.argv[1] if len(sys.argv) > 1 else "decoupled"
problem = compile_scenario(preset(name))

cells = {}
for mode in ("baseline", "decentral", "ours"):
    t0 = time.time()
    result = synthesize(
        problem, SolverOptions(mode=mode, direction="lower", inner_max_iters=2000)
    )
    if result.feasible:
        schedules, _, _ = truncate_and_factorize(result.gain, problem)
        summary = schedule_summary(schedules)
        if problem.n_agents == 2:
            cells[mode] = f"{summary.total} ({summary.sent(1, 2)},{summary.sent(2, 1)})"
        else:
            cells[mode] = str(summary.total)
    else:
        cells[mode] = "-"
    print(f"  [{mode}: {time.time() - t0:.0f}s]")

print()
print(f"| Task ({name}) | Baseline | Decentral | Ours |")
print("| --- | --- | --- | --- |")
print(f"| messages | {cells['baseline']} | {cells['decentral']} | {cells['ours']} |")
