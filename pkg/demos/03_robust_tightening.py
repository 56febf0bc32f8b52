"""Robust constraint tightening and its exactness.

Each constraint row is made deterministic by charging it the worst case
over every disturbance and noise realization: the box channels contribute
their center term plus a weighted L1 norm of the row's sensitivities.  On a
small instance the closed form is checked against brute-force enumeration
of all box vertices.
"""

import itertools

import numpy as np

from mincomm import (
    assemble_stacked_operators,
    build_robust_inequalities,
    closed_loop_of_gain,
    compile_scenario,
    montecarlo_margin,
    preset,
    verify_robust_exact,
)
from mincomm.model import AgentSpec, Box, DelaySpec, MeasurementTopology, Polytope, Problem
from mincomm.sls import GainMatrix

rng = np.random.default_rng(1)

# -- tiny instance: closed form vs vertex enumeration ------------------------
T = 2
agent = AgentSpec(1, 1, 1, 1,
                  A_blocks=[rng.standard_normal((1, 1)) for _ in range(T)],
                  B_blocks=[rng.standard_normal((1, 1)) for _ in range(T)])
tiny = Problem(
    horizon=T,
    agents=(agent,),
    topology=MeasurementTopology({1: (1,)}, {(1, 1): [np.eye(1)] * (T + 1)}),
    delays=DelaySpec.uniform(1),
    state_sets=(Box([0.0], [0.5]),) + tuple(
        Polytope([[1.0], [-1.0]], [2.0, 2.0]) for _ in range(T)
    ),
    input_sets=tuple(Polytope.unconstrained(1) for _ in range(T + 1)),
    disturbance_sets=tuple(Box([0.0], [0.4]) for _ in range(T)),
    noise_sets=tuple(Box([0.0], [0.2]) for _ in range(T + 1)),
)
ops = assemble_stacked_operators(tiny)
K = np.tril(0.3 * rng.standard_normal((T + 1, T + 1)))
phi = closed_loop_of_gain(GainMatrix(ops, K), ops)
system = build_robust_inequalities(tiny, ops)

margins = system.margins(phi)
G_w, G_v = system.images(phi)
cw, dw = system.w_box
cv, dv = system.v_box
worst = np.full(system.n_rows, -np.inf)
for sw in itertools.product((-1, 1), repeat=int(np.sum(dw > 0))):
    w = cw.copy()
    w[dw > 0] += np.asarray(sw) * dw[dw > 0]
    for sv in itertools.product((-1, 1), repeat=int(np.sum(dv > 0))):
        v = cv.copy()
        v[dv > 0] += np.asarray(sv) * dv[dv > 0]
        worst = np.maximum(worst, G_w @ w + G_v @ v)
brute = system.bounds - worst
print(f"closed form vs {2 ** int(np.sum(dw > 0) + np.sum(dv > 0))}-vertex enumeration: "
      f"max gap {np.abs(margins - brute).max():.2e}")

# -- scenario scale: exact margins and sampled margins ------------------------
problem = compile_scenario(preset("decoupled"))
ops = assemble_stacked_operators(problem)
K0 = GainMatrix(ops, np.zeros((ops.u_map.total_dim, ops.y_map.total_dim)))
phi0 = closed_loop_of_gain(K0, ops)
exact = verify_robust_exact(phi0, problem, ops=ops)
sampled = montecarlo_margin(phi0, problem, n_samples=2000, seed=0)
print(f"open-loop controller: exact min margin {exact.min_margin:+.3f} "
      f"(sampled {sampled.min_margin:+.3f})")
print("binding or violated rows (first five):")
for label, margin in sorted(zip(exact.labels, exact.margins), key=lambda p: p[1])[:5]:
    print(f"  {label:24s} {margin:+.3f}")
