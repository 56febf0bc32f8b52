"""Command-line interface: synthesize, simulate, compare, verify.

Exit codes: 0 success, 1 error, 2 infeasible synthesis, 3 simulation
violations.  All artifacts are plain files (matrix archive, JSON, CSV) so a
synthesis can be simulated or verified later from disk alone.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .archive import read_archive, schedules_from_json, schedules_to_json, write_archive
from .factorization import schedule_summary, truncate_and_factorize
from .model import DelaySpec, Problem, assemble_stacked_operators, validate_problem
from .robust import build_robust_inequalities, verify_robust_exact
from .scenarios import compile_scenario, load_problem, preset, preset_names, problem_to_document
from .simulation import (
    distributed_from_gain,
    evaluate_run,
    message_logs_to_csv,
    run_closed_loop,
    sample_disturbances,
    trajectories_to_csv,
)
from .sls import GainMatrix, build_achievability, check_achievability, closed_loop_of_gain
from .solver import SolverOptions, cross_pairs, numerical_rank, synthesize

__all__ = ["RunConfig", "main", "cmd_synthesize", "cmd_simulate", "cmd_compare", "cmd_verify"]

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2
EXIT_VIOLATION = 3


@dataclass
class RunConfig:
    command: str
    scenario: Optional[str] = None
    problem_path: Optional[str] = None
    out_dir: str = "."
    mode: str = "ours"
    direction: str = "try-both"
    delay_uniform: Optional[str] = None  # int or comma list for sweeps
    rollouts: int = 100
    seed: int = 0
    overrides: dict = field(default_factory=dict)

    def delays(self):
        if self.delay_uniform is None:
            return [None]
        return [int(tok) for tok in str(self.delay_uniform).split(",")]


def _load_problem(config: RunConfig, delay: Optional[int]) -> Problem:
    if (config.scenario is None) == (config.problem_path is None):
        raise ValueError("exactly one of --scenario and --problem is required")
    if config.scenario is not None:
        prob = compile_scenario(preset(config.scenario, delay=delay))
    else:
        prob = load_problem(config.problem_path)
        if delay is not None:
            prob = Problem(
                horizon=prob.horizon, agents=prob.agents, topology=prob.topology,
                delays=DelaySpec.uniform(prob.n_agents, delay),
                state_sets=prob.state_sets, input_sets=prob.input_sets,
                disturbance_sets=prob.disturbance_sets, noise_sets=prob.noise_sets,
                label=prob.label,
            )
    fatal = [d for d in validate_problem(prob) if d.fatal]
    if fatal:
        raise ValueError("; ".join(d.message for d in fatal))
    return prob


def _options(config: RunConfig) -> SolverOptions:
    return SolverOptions(mode=config.mode, direction=config.direction, **config.overrides)


def _pair_table_counts(summary, n_agents):
    counts = {f"{j}->{i}": summary.sent(sender=j, receiver=i) for (i, j) in cross_pairs(n_agents)}
    return counts


def _synthesis_report(result, summary, schedules, fact_report, problem, shipped=None):
    report = {
        "status": "feasible" if result.feasible else "infeasible",
        "mode": result.mode,
        "direction": result.direction,
        "total_messages": summary.total if summary else None,
        "pair_messages": _pair_table_counts(summary, problem.n_agents) if summary else None,
        "pair_ranks": {f"{i},{j}": r for (i, j), r in sorted(result.pair_ranks.items())},
        "objective_trace": [float(x) for x in result.objective_trace],
        "residuals": {k: float(v) for k, v in result.residuals.items()},
        "wall_time_s": float(result.wall_time),
        "diagnostics": list(result.diagnostics),
    }
    if problem.n_agents == 2 and summary:
        report["messages_1_to_2"] = summary.sent(sender=1, receiver=2)
        report["messages_2_to_1"] = summary.sent(sender=2, receiver=1)
    if fact_report:
        rep = fact_report["verification"]
        report["factorization"] = {
            "min_margin": float(rep.min_margin),
            "rollbacks": list(fact_report["rollbacks"]),
            "schedule_diagnostics": [list(s.diagnostics) for s in schedules],
        }
    if shipped:
        report["shipped"] = shipped
    return report


def _shipped_metrics(problem, ops, phi, gain, schedules):
    """Quantities recomputable from the on-disk artifacts alone."""
    summary = schedule_summary(schedules)
    ach = check_achievability(phi, build_achievability(ops))
    margins = verify_robust_exact(phi, problem, ops=ops)
    recon = 0.0
    for s in schedules:
        block = gain.pair_block(s.receiver, s.sender)
        if block.size:
            recon = max(recon, float(np.abs(s.reconstruction() - block).max()))
    return {
        "total_messages": summary.total,
        "pair_messages": _pair_table_counts(summary, problem.n_agents),
        "achievability_residual": float(ach.max_abs),
        "min_margin": float(margins.min_margin),
        "reconstruction_error": recon,
    }


def cmd_synthesize(config: RunConfig) -> int:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    delay = config.delays()[0]
    problem = _load_problem(config, delay)
    options = _options(config)
    result = synthesize(problem, options)

    with open(out / "problem.json", "w") as f:
        json.dump(problem_to_document(problem), f)

    if not result.feasible:
        report = _synthesis_report(result, None, None, None, problem)
        with open(out / "report.json", "w") as f:
            json.dump(report, f, indent=1)
        print(f"infeasible ({config.mode}); report written to {out / 'report.json'}")
        return EXIT_INFEASIBLE

    schedules, gain, fact_report = truncate_and_factorize(
        result.gain, problem,
        rel_tol=options.rank_rel_tol, abs_tol=options.rank_abs_tol,
    )
    ops = result.phi.ops
    phi = closed_loop_of_gain(gain, ops)
    summary = schedule_summary(schedules)
    write_archive(
        out / "phi.mtxz",
        {
            "Phi_xx": phi.phi_xx, "Phi_xy": phi.phi_xy,
            "Phi_ux": phi.phi_ux, "Phi_uy": phi.phi_uy,
            "K": gain.matrix,
        },
    )
    with open(out / "schedules.json", "w") as f:
        json.dump(schedules_to_json(schedules), f)
    shipped = _shipped_metrics(problem, ops, phi, gain, schedules)
    report = _synthesis_report(result, summary, schedules, fact_report, problem, shipped)
    with open(out / "report.json", "w") as f:
        json.dump(report, f, indent=1)
    print(
        f"feasible: {summary.total} inter-agent messages "
        f"({', '.join(f'{k}: {v}' for k, v in sorted(report['pair_messages'].items()))})"
    )
    return EXIT_OK


def cmd_simulate(config: RunConfig) -> int:
    out = Path(config.out_dir)
    needed = ["problem.json", "phi.mtxz", "schedules.json"]
    missing = [n for n in needed if not (out / n).exists()]
    if missing:
        raise FileNotFoundError(f"missing artifacts in {out}: {', '.join(missing)}")
    problem = load_problem(out / "problem.json")
    archive = read_archive(out / "phi.mtxz")
    with open(out / "schedules.json") as f:
        schedules = schedules_from_json(json.load(f))
    ops = assemble_stacked_operators(problem)
    gain = GainMatrix(ops, archive["K"])
    controller = distributed_from_gain(gain, schedules)
    ineqs = build_robust_inequalities(problem, ops)

    runs, logs, violations = [], [], []
    for k in range(config.rollouts):
        realization = sample_disturbances(problem, seed=config.seed + k)
        traj, log = run_closed_loop(problem, controller, realization, ops=ops)
        report = evaluate_run(traj, problem, system=ineqs)
        runs.append((k, traj))
        logs.append((k, log))
        for label, margin in report.violations:
            violations.append({"rollout": k, "row": label, "margin": margin})
    trajectories_to_csv(runs, out / "trajectories.csv")
    message_logs_to_csv(logs, out / "messages.csv")
    with open(out / "violations.json", "w") as f:
        json.dump({"rollouts": config.rollouts, "violations": violations}, f, indent=1)
    if violations:
        print(f"{len(violations)} constraint violations over {config.rollouts} rollouts")
        for v in violations[:10]:
            print(f"  rollout {v['rollout']}: {v['row']} margin {v['margin']:.3e}")
        return EXIT_VIOLATION
    print(f"{config.rollouts} rollouts, no violations")
    return EXIT_OK


def _compare_cell(problem, mode, config):
    options = replace(_options(config), mode=mode)
    if mode != "ours":
        options = replace(options, direction="try-both")
    try:
        result = synthesize(problem, options)
    except Exception as exc:  # propagate per cell without aborting the table
        return {"status": "error", "error": str(exc)}
    if not result.feasible:
        return {"status": "infeasible"}
    schedules, _, _ = truncate_and_factorize(
        result.gain, problem, rel_tol=options.rank_rel_tol, abs_tol=options.rank_abs_tol
    )
    summary = schedule_summary(schedules)
    cell = {
        "status": "feasible",
        "total": summary.total,
        "pairs": _pair_table_counts(summary, problem.n_agents),
    }
    if problem.n_agents == 2:
        cell["split"] = [summary.sent(1, 2), summary.sent(2, 1)]
    return cell


def _cell_text(cell):
    if cell["status"] == "infeasible":
        return "-"
    if cell["status"] == "error":
        return "error"
    if "split" in cell:
        return f"{cell['total']} ({cell['split'][0]},{cell['split'][1]})"
    return str(cell["total"])


def cmd_compare(config: RunConfig) -> int:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    modes = ["baseline", "decentral", "ours"]
    rows = []
    for delay in config.delays():
        problem = _load_problem(config, delay)
        row = {"delay": delay if delay is not None else 0}
        for mode in modes:
            row[mode] = _compare_cell(problem, mode, config)
        rows.append(row)

    name = config.scenario or Path(config.problem_path).stem
    lines = [
        f"| Task ({name}) | Baseline | Decentral | Ours |",
        "| --- | --- | --- | --- |",
    ]
    for row in rows:
        label = f"delay = {row['delay']}" if config.delay_uniform is not None else name
        lines.append(
            f"| {label} | {_cell_text(row['baseline'])} | "
            f"{_cell_text(row['decentral'])} | {_cell_text(row['ours'])} |"
        )
    table = "\n".join(lines)
    print(table)
    with open(out / "compare.md", "w") as f:
        f.write(table + "\n")
    with open(out / "compare.json", "w") as f:
        json.dump({"scenario": name, "rows": rows}, f, indent=1)
    return EXIT_OK


def cmd_verify(config: RunConfig) -> int:
    """Recompute the report's shipped numbers from the stored artifacts."""
    out = Path(config.out_dir)
    problem = load_problem(out / "problem.json")
    archive = read_archive(out / "phi.mtxz")
    with open(out / "schedules.json") as f:
        schedules = schedules_from_json(json.load(f))
    with open(out / "report.json") as f:
        report = json.load(f)
    if "shipped" not in report:
        print("report has no shipped section (infeasible run?)", file=sys.stderr)
        return EXIT_ERROR

    ops = assemble_stacked_operators(problem)
    from .sls import ClosedLoopResponse

    phi = ClosedLoopResponse(
        ops, archive["Phi_xx"], archive["Phi_xy"], archive["Phi_ux"], archive["Phi_uy"]
    )
    gain = GainMatrix(ops, archive["K"])
    recomputed = _shipped_metrics(problem, ops, phi, gain, schedules)
    stored = report["shipped"]
    mismatches = []
    for key, value in recomputed.items():
        if stored.get(key) != value:
            mismatches.append(f"{key}: stored {stored.get(key)!r}, recomputed {value!r}")
    if mismatches:
        for m in mismatches:
            print(m, file=sys.stderr)
        return EXIT_ERROR
    print(f"verified: report matches recomputation ({recomputed['total_messages']} messages)")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mincomm",
        description="minimal-communication controller synthesis for multi-agent systems",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, with_solver=True):
        src = p.add_mutually_exclusive_group()
        src.add_argument("--scenario", choices=preset_names(), help="named scenario preset")
        src.add_argument("--problem", dest="problem_path", help="path to a problem JSON document")
        p.add_argument("--out", dest="out_dir", default=".", help="artifact directory")
        p.add_argument("--seed", type=int, default=0)
        if with_solver:
            p.add_argument("--mode", choices=["ours", "baseline", "decentral"], default="ours")
            p.add_argument(
                "--direction", choices=["lower", "upper", "try-both"], default="try-both"
            )
            p.add_argument(
                "--delay-uniform", dest="delay_uniform", default=None,
                help="uniform cross-pair delay; a comma list sweeps (compare only)",
            )
            p.add_argument("--outer-iters", type=int, dest="outer_iters")
            p.add_argument("--inner-max-iters", type=int, dest="inner_max_iters")
            p.add_argument("--tol-primal", type=float, dest="inner_tol_primal")
            p.add_argument("--tol-dual", type=float, dest="inner_tol_dual")
            p.add_argument("--tol-rank-rel", type=float, dest="rank_rel_tol")
            p.add_argument("--tol-rank-abs", type=float, dest="rank_abs_tol")
            p.add_argument("--tol-feas", type=float, dest="feasibility_tol")
            p.add_argument("--svt-weight", type=float, dest="svt_base_weight")
            p.add_argument("--reweight-delta", type=float, dest="reweight_delta")
            p.add_argument("--penalty", type=float, dest="admm_penalty")

    p_synth = sub.add_parser("synth", help="synthesize a controller and its schedules")
    add_common(p_synth)
    p_sim = sub.add_parser("simulate", help="roll out stored schedules in closed loop")
    add_common(p_sim, with_solver=False)
    p_sim.add_argument("--rollouts", type=int, default=100)
    p_cmp = sub.add_parser("compare", help="message-count table across modes")
    add_common(p_cmp)
    p_ver = sub.add_parser("verify", help="recompute a report from its artifacts")
    add_common(p_ver, with_solver=False)
    return parser


_SOLVER_FIELDS = (
    "outer_iters", "inner_max_iters", "inner_tol_primal", "inner_tol_dual",
    "rank_rel_tol", "rank_abs_tol", "feasibility_tol", "svt_base_weight",
    "reweight_delta", "admm_penalty",
)


def _config_from_args(args) -> RunConfig:
    overrides = {
        name: getattr(args, name)
        for name in _SOLVER_FIELDS
        if getattr(args, name, None) is not None
    }
    return RunConfig(
        command=args.command,
        scenario=getattr(args, "scenario", None),
        problem_path=getattr(args, "problem_path", None),
        out_dir=args.out_dir,
        mode=getattr(args, "mode", "ours"),
        direction=getattr(args, "direction", "try-both"),
        delay_uniform=getattr(args, "delay_uniform", None),
        rollouts=getattr(args, "rollouts", 100),
        seed=args.seed,
        overrides=overrides,
    )


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    config = _config_from_args(args)
    dispatch = {
        "synth": cmd_synthesize,
        "simulate": cmd_simulate,
        "compare": cmd_compare,
        "verify": cmd_verify,
    }
    try:
        return dispatch[config.command](config)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
