"""Minimal-communication controller synthesis for multi-agent linear systems.

The package follows the synthesis pipeline end to end: describe a
multi-vehicle problem (or compile a scenario), synthesize a robust
distributed controller that provably satisfies the constraints while
minimizing inter-agent messages, factor the cross gains into scalar
encoder/decoder message schedules, and execute or verify everything in
closed loop.
"""

from .model import (
    AgentSpec,
    Box,
    DelaySpec,
    Diagnostic,
    IndexMap,
    MeasurementTopology,
    Polytope,
    Problem,
    StackedOperators,
    StructureError,
    assemble_stacked_operators,
    discretize_double_integrator,
    validate_problem,
)
from .scenarios import (
    CompileError,
    DistanceLimit,
    ScenarioSpec,
    VehicleTask,
    compile_scenario,
    dump_problem,
    load_problem,
    preset,
    preset_names,
    problem_from_document,
    problem_to_document,
)
from .patterns import SparsityPattern, build_sparsity, canonical_pattern, pattern_product
from .sls import (
    AffineConstraintSystem,
    ClosedLoopResponse,
    GainMatrix,
    InvalidResponseError,
    build_achievability,
    check_achievability,
    closed_loop_of_gain,
    delay_violation,
    neumann_inverse,
    recover_gain,
)
from .robust import (
    LinearInequalitySystem,
    RobustnessReport,
    UnboundedDisturbanceError,
    build_robust_inequalities,
    montecarlo_margin,
    verify_robust_exact,
)
from .solver import (
    SolverOptions,
    SubproblemResult,
    SynthesisResult,
    numerical_rank,
    solve_weighted_subproblem,
    svt_prox,
    synthesize,
    update_weights,
)
from .factorization import (
    DelaySparsityError,
    MessageSchedule,
    MessageSummary,
    causal_factorize,
    schedule_summary,
    truncate_and_factorize,
)
from .simulation import (
    DistributedController,
    DisturbanceRealization,
    MessageLog,
    Trajectory,
    ViolationReport,
    distributed_from_gain,
    evaluate_run,
    run_closed_loop,
    sample_disturbances,
)
from .archive import read_archive, write_archive

__version__ = "0.1.0"
