"""Closed-loop execution: monolithic gain or distributed message passing.

Both modes advance the same dynamics under a sampled disturbance
realization.  The distributed mode runs the encoder/decoder protocol
literally: at each step every agent evaluates the encoder rows whose send
time has arrived, transmits the scalar messages, and every receiver
combines arrived messages with its own measurement history.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .model import Box, Problem, StackedOperators, assemble_stacked_operators
from .robust import LinearInequalitySystem, sample_box_or_polytope
from .sls import GainMatrix

__all__ = [
    "DisturbanceRealization",
    "Trajectory",
    "MessageLog",
    "MessageLogEntry",
    "DistributedController",
    "ViolationReport",
    "sample_disturbances",
    "run_closed_loop",
    "evaluate_run",
    "distributed_from_gain",
    "trajectories_to_csv",
    "message_logs_to_csv",
]


@dataclass(frozen=True)
class DisturbanceRealization:
    x0: np.ndarray
    w: np.ndarray  # (T, n_x), process disturbance per step
    v: np.ndarray  # (T+1, n_y), measurement noise per time
    seed: Optional[int] = None

    def stacked_w(self) -> np.ndarray:
        return np.concatenate([self.x0, self.w.ravel()])

    def stacked_v(self) -> np.ndarray:
        return self.v.ravel()


@dataclass(frozen=True)
class Trajectory:
    ops: StackedOperators
    x: np.ndarray  # (T+1, n_x)
    u: np.ndarray  # (T+1, n_u)
    y: np.ndarray  # (T+1, n_y)

    @property
    def horizon(self) -> int:
        return self.x.shape[0] - 1

    def agent_states(self, agent: int) -> np.ndarray:
        idx = self.ops.x_map.time_agent_indices(0, agent) % self.ops.n_x
        return self.x[:, idx]

    def agent_inputs(self, agent: int) -> np.ndarray:
        idx = self.ops.u_map.time_agent_indices(0, agent) % self.ops.n_u
        return self.u[:, idx]

    def stacked(self) -> tuple:
        return self.x.ravel(), self.u.ravel()


@dataclass(frozen=True)
class MessageLogEntry:
    send_time: int
    arrive_time: int
    sender: int
    receiver: int
    index: int  # message number k within the pair schedule
    payload: float


@dataclass(frozen=True)
class MessageLog:
    entries: tuple

    def __len__(self) -> int:
        return len(self.entries)

    def pair_count(self, receiver: int, sender: int) -> int:
        return sum(1 for e in self.entries if e.receiver == receiver and e.sender == sender)


@dataclass(frozen=True)
class DistributedController:
    """Per-agent intra gains plus cross-pair message schedules."""

    local_gains: dict  # agent -> ((T+1) n_u^i, (T+1) n_y^i) block lower triangular
    schedules: tuple


def distributed_from_gain(gain: GainMatrix, schedules) -> DistributedController:
    """Split a synthesized global gain into its distributed execution form."""
    n = len(gain.ops.u_map.dims)
    locals_ = {i: gain.pair_block(i, i) for i in range(1, n + 1)}
    return DistributedController(local_gains=locals_, schedules=tuple(schedules))


def sample_disturbances(problem: Problem, seed: int) -> DisturbanceRealization:
    """Draw one realization of initial state, disturbances, and noise."""
    rng = np.random.default_rng(seed)
    x0 = sample_box_or_polytope(problem.initial_set, rng)
    w = np.array([sample_box_or_polytope(s, rng) for s in problem.disturbance_sets])
    v = np.array([sample_box_or_polytope(s, rng) for s in problem.noise_sets])
    if w.size == 0:
        w = w.reshape(0, problem.n_x)
    return DisturbanceRealization(x0=x0, w=w, v=v, seed=seed)


def _measure(problem, ops, t, x_t, v_t):
    y_t = np.zeros(problem.n_y)
    for i, ks in sorted(problem.topology.neighbors.items()):
        rows = ops.y_map.time_agent_indices(0, i) % ops.n_y
        acc = np.zeros(len(rows))
        for k in ks:
            cols = ops.x_map.time_agent_indices(0, k) % ops.n_x
            acc += problem.topology.block(i, k, t) @ x_t[cols]
        y_t[rows] = acc
    return y_t + v_t


def _advance(problem, ops, t, x_t, u_t, w_t):
    nxt = np.zeros(problem.n_x)
    for a in problem.agents:
        sx = ops.x_map.time_agent_indices(0, a.index) % ops.n_x
        su = ops.u_map.time_agent_indices(0, a.index) % ops.n_u
        nxt[sx] = a.A_blocks[t] @ x_t[sx] + a.B_blocks[t] @ u_t[su]
    return nxt + w_t


def run_closed_loop(
    problem: Problem,
    controller: Union[GainMatrix, DistributedController],
    realization: DisturbanceRealization,
    ops: Optional[StackedOperators] = None,
):
    """Execute one rollout; returns (Trajectory, MessageLog).

    Gain mode applies the full matrix to the measurement history and logs no
    messages.  Distributed mode emits every scheduled message at its send
    time (zero payloads included) and lets each receiver decode only what
    has arrived.
    """
    ops = ops or assemble_stacked_operators(problem)
    T = problem.horizon
    n_x, n_u, n_y = problem.n_x, problem.n_u, problem.n_y
    x = np.zeros((T + 1, n_x))
    u = np.zeros((T + 1, n_u))
    y = np.zeros((T + 1, n_y))
    x[0] = realization.x0
    entries = []

    distributed = isinstance(controller, DistributedController)
    if distributed:
        payloads = {}  # (receiver, sender) -> list of computed message values
        for s in controller.schedules:
            if s.horizon != T:
                raise ValueError(
                    f"schedule for pair ({s.receiver},{s.sender}) spans horizon "
                    f"{s.horizon}, problem has {T}"
                )
            if any(t_k + s.delay > T or t_k < 0 for t_k in s.times):
                raise ValueError(
                    f"schedule for pair ({s.receiver},{s.sender}) references an "
                    "out-of-range time"
                )

    for t in range(T + 1):
        y[t] = _measure(problem, ops, t, x[t], realization.v[t])

        if not distributed:
            K = controller.matrix
            hist = y[: t + 1].ravel()
            u[t] = K[ops.u_map.block_slice(t), : (t + 1) * n_y] @ hist
        else:
            # senders emit every message scheduled for this step
            for s in controller.schedules:
                key = (s.receiver, s.sender)
                sender_hist = y[: t + 1][:, ops.y_map.time_agent_indices(0, s.sender) % n_y]
                for k, t_k in enumerate(s.times):
                    if t_k == t:
                        payload = float(
                            s.encoder[k, : (t + 1) * s.meas_dim] @ sender_hist.ravel()
                        )
                        payloads.setdefault(key, {})[k] = payload
                        entries.append(
                            MessageLogEntry(
                                send_time=t,
                                arrive_time=t + s.delay,
                                sender=s.sender,
                                receiver=s.receiver,
                                index=k,
                                payload=payload,
                            )
                        )
            # receivers combine local history with arrived messages
            for i in range(1, problem.n_agents + 1):
                rows_u = ops.u_map.time_agent_indices(0, i) % n_u
                own_cols = ops.y_map.time_agent_indices(0, i) % n_y
                own_hist = y[: t + 1][:, own_cols].ravel()
                Ki = controller.local_gains[i]
                du = len(rows_u)
                acc = Ki[t * du : (t + 1) * du, : own_hist.size] @ own_hist
                for s in controller.schedules:
                    if s.receiver != i:
                        continue
                    key = (s.receiver, s.sender)
                    for k, t_k in enumerate(s.times):
                        if t_k + s.delay <= t:
                            assert k in payloads.get(key, {}), "message used before arrival"
                            coeff = s.decoder[t * du : (t + 1) * du, k]
                            acc = acc + coeff * payloads[key][k]
                u[t][rows_u] = acc

        if t < T:
            x[t + 1] = _advance(problem, ops, t, x[t], u[t], realization.w[t])

    return Trajectory(ops, x, u, y), MessageLog(tuple(entries))


@dataclass
class ViolationReport:
    margins: np.ndarray  # per constraint row, over the realized trajectory
    labels: list
    worst_by_time: dict  # time -> (label, margin) of the worst row at that time
    tol: float = 1e-6

    @property
    def passed(self) -> bool:
        return self.margins.size == 0 or float(self.margins.min()) >= -self.tol

    @property
    def violations(self) -> list:
        return [
            (self.labels[k], float(self.margins[k]))
            for k in np.flatnonzero(self.margins < -self.tol)
        ]


def evaluate_run(
    trajectory: Trajectory,
    problem: Problem,
    system: Optional[LinearInequalitySystem] = None,
) -> ViolationReport:
    """Margins of every constraint row on one realized trajectory."""
    if system is None:
        system = LinearInequalitySystem(problem, trajectory.ops)
    x_stack, u_stack = trajectory.stacked()
    values = system.row_values(x_stack, u_stack)
    margins = system.bounds - values
    worst = {}
    for k, row in enumerate(system.rows):
        cur = worst.get(row.time)
        if cur is None or margins[k] < cur[1]:
            worst[row.time] = (row.label, float(margins[k]))
    return ViolationReport(margins, system.labels(), worst)


# ---------------------------------------------------------------------------
# CSV export

TRAJECTORY_HEADER = ["t", "agent", "px", "py", "vx", "vy", "ux", "uy"]
MESSAGE_HEADER = ["t_send", "t_arrive", "sender", "receiver", "k", "payload"]


def _format(value) -> str:
    return repr(float(value))


def trajectories_to_csv(runs, path=None):
    """Write rollouts as CSV rows; vehicles must be planar double integrators.

    ``runs`` is a sequence of (rollout_id, Trajectory); with more than one
    rollout a leading ``rollout`` column is prepended.
    """
    runs = list(runs)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    multi = len(runs) != 1
    header = (["rollout"] if multi else []) + TRAJECTORY_HEADER
    writer.writerow(header)
    for rollout_id, traj in runs:
        if any(d != 4 for d in traj.ops.x_map.dims) or any(
            d != 2 for d in traj.ops.u_map.dims
        ):
            raise ValueError("trajectory export expects planar double-integrator agents")
        for t in range(traj.horizon + 1):
            for agent in range(1, len(traj.ops.x_map.dims) + 1):
                xs = traj.agent_states(agent)[t]
                us = traj.agent_inputs(agent)[t]
                row = ([rollout_id] if multi else []) + [
                    t, agent, *(_format(v) for v in xs), *(_format(v) for v in us)
                ]
                writer.writerow(row)
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as f:
            f.write(text)
    return text


def message_logs_to_csv(runs, path=None):
    """Write message logs as CSV; multiple rollouts get a leading id column."""
    runs = list(runs)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    multi = len(runs) != 1
    writer.writerow((["rollout"] if multi else []) + MESSAGE_HEADER)
    for rollout_id, log in runs:
        for e in log.entries:
            writer.writerow(
                ([rollout_id] if multi else [])
                + [e.send_time, e.arrive_time, e.sender, e.receiver, e.index, _format(e.payload)]
            )
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as f:
            f.write(text)
    return text
