"""Multi-agent control problem description and stacked-operator assembly.

Agents have decoupled linear time-varying dynamics and possibly coupled
measurements.  A :class:`Problem` bundles the per-agent dynamics, the
measurement topology, communication delays, and the per-time constraint
sets; :func:`assemble_stacked_operators` lifts everything onto the full
horizon so that the whole trajectory satisfies

    x = Z A x + Z B u + w,    y = C x + v,

with ``Z`` the block-downshift operator and ``w`` the stacked vector
``[x_0; w_0; ...; w_{T-1}]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

__all__ = [
    "Box",
    "Polytope",
    "AgentSpec",
    "MeasurementTopology",
    "DelaySpec",
    "Problem",
    "StackedOperators",
    "IndexMap",
    "Diagnostic",
    "StructureError",
    "discretize_double_integrator",
    "assemble_stacked_operators",
    "validate_problem",
]


class StructureError(ValueError):
    """A matrix block has the wrong shape or refers to a missing agent."""


def _as_matrix(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim != 2:
        raise StructureError(f"{name} must be a 2-d matrix, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class Box:
    """Axis-aligned interval set {c + d ∘ s : s in [-1, 1]^n}."""

    center: np.ndarray
    half_width: np.ndarray

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float))
        d = np.atleast_1d(np.asarray(self.half_width, dtype=float))
        if c.shape != d.shape or c.ndim != 1:
            raise ValueError(f"center/half_width shape mismatch: {c.shape} vs {d.shape}")
        if np.any(d < 0):
            raise ValueError("half_width must be nonnegative")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_width", d)

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def lower(self) -> np.ndarray:
        return self.center - self.half_width

    @property
    def upper(self) -> np.ndarray:
        return self.center + self.half_width

    def contains(self, z, tol: float = 1e-9) -> bool:
        z = np.asarray(z, dtype=float)
        return bool(np.all(np.abs(z - self.center) <= self.half_width + tol))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.center + self.half_width * rng.uniform(-1.0, 1.0, size=self.dim)


@dataclass(frozen=True)
class Polytope:
    """H-representation set {z : H z <= h}."""

    H: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        h = np.atleast_1d(np.asarray(self.h, dtype=float))
        if H.shape[0] != h.shape[0]:
            raise ValueError(f"H has {H.shape[0]} rows but h has {h.shape[0]} entries")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "h", h)

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    @property
    def n_rows(self) -> int:
        return self.H.shape[0]

    def contains(self, z, tol: float = 1e-9) -> bool:
        z = np.asarray(z, dtype=float)
        if self.n_rows == 0:
            return True
        return bool(np.all(self.H @ z <= self.h + tol))

    @staticmethod
    def unconstrained(dim: int) -> "Polytope":
        return Polytope(np.zeros((0, dim)), np.zeros(0))


SetLike = Union[Box, Polytope]


@dataclass(frozen=True)
class AgentSpec:
    """Dynamics of one agent: x_{t+1} = A_t x_t + B_t u_t + w_t."""

    index: int  # 1-based agent id
    state_dim: int
    input_dim: int
    meas_dim: int
    A_blocks: tuple
    B_blocks: tuple

    def __post_init__(self):
        object.__setattr__(
            self, "A_blocks", tuple(_as_matrix(A, f"A_blocks[{t}]") for t, A in enumerate(self.A_blocks))
        )
        object.__setattr__(
            self, "B_blocks", tuple(_as_matrix(B, f"B_blocks[{t}]") for t, B in enumerate(self.B_blocks))
        )

    @property
    def horizon(self) -> int:
        return len(self.A_blocks)


@dataclass(frozen=True)
class MeasurementTopology:
    """Per-agent sensed neighbors and measurement blocks.

    ``blocks[(i, k)]`` is the length-(T+1) sequence of matrices mapping agent
    ``k``'s state into agent ``i``'s measurement, for each ``k`` in agent
    ``i``'s neighbor set.
    """

    neighbors: Mapping[int, tuple]
    blocks: Mapping[tuple, tuple]

    def __post_init__(self):
        neigh = {int(i): tuple(int(k) for k in ks) for i, ks in dict(self.neighbors).items()}
        blk = {}
        for (i, k), mats in dict(self.blocks).items():
            blk[(int(i), int(k))] = tuple(_as_matrix(C, f"C[{i},{k}][{t}]") for t, C in enumerate(mats))
        object.__setattr__(self, "neighbors", neigh)
        object.__setattr__(self, "blocks", blk)

    def neighbor_set(self, i: int) -> tuple:
        return self.neighbors.get(i, ())

    def block(self, i: int, k: int, t: int) -> np.ndarray:
        return self.blocks[(i, k)][t]


@dataclass(frozen=True)
class DelaySpec:
    """Worst-case communication latency: entry (i, j) is the delay from j to i."""

    latency: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.latency, dtype=int)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError("latency must be a square matrix")
        if np.any(arr < 0):
            raise ValueError("latencies must be nonnegative")
        if np.any(np.diag(arr) != 0):
            raise ValueError("own-information latency must be zero")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "latency", arr)

    @staticmethod
    def uniform(n_agents: int, delay: int = 0) -> "DelaySpec":
        arr = np.full((n_agents, n_agents), int(delay))
        np.fill_diagonal(arr, 0)
        return DelaySpec(arr)

    def of(self, i: int, j: int) -> int:
        """Latency from agent j to agent i (1-based indices)."""
        return int(self.latency[i - 1, j - 1])

    @property
    def n_agents(self) -> int:
        return self.latency.shape[0]


@dataclass(frozen=True)
class Problem:
    """A full synthesis instance over horizon T.

    ``state_sets[0]`` is the initial-state set (the range x_0 is drawn from);
    ``state_sets[1..T]`` are constraint polytopes on x_t.  Disturbance sets
    cover w_0..w_{T-1}; noise sets cover v_0..v_T.
    """

    horizon: int
    agents: tuple
    topology: MeasurementTopology
    delays: DelaySpec
    state_sets: tuple
    input_sets: tuple
    disturbance_sets: tuple
    noise_sets: tuple
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "state_sets", tuple(self.state_sets))
        object.__setattr__(self, "input_sets", tuple(self.input_sets))
        object.__setattr__(self, "disturbance_sets", tuple(self.disturbance_sets))
        object.__setattr__(self, "noise_sets", tuple(self.noise_sets))

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def n_x(self) -> int:
        return sum(a.state_dim for a in self.agents)

    @property
    def n_u(self) -> int:
        return sum(a.input_dim for a in self.agents)

    @property
    def n_y(self) -> int:
        return sum(a.meas_dim for a in self.agents)

    @property
    def initial_set(self) -> SetLike:
        return self.state_sets[0]


@dataclass(frozen=True)
class IndexMap:
    """Flat-index arithmetic for one stacked signal (x, u or y).

    A stacked vector has T+1 time blocks; inside each block the agents'
    sub-vectors are concatenated in agent order.
    """

    horizon: int
    dims: tuple  # per-agent dimension

    @property
    def block_dim(self) -> int:
        return sum(self.dims)

    @property
    def total_dim(self) -> int:
        return (self.horizon + 1) * self.block_dim

    def agent_offset(self, agent: int) -> int:
        """Offset of a (1-based) agent inside one time block."""
        return sum(self.dims[: agent - 1])

    def index(self, t: int, agent: int, local: int) -> int:
        if not (0 <= t <= self.horizon):
            raise IndexError(f"time {t} outside horizon {self.horizon}")
        if not (1 <= agent <= len(self.dims)):
            raise IndexError(f"agent {agent} out of range")
        if not (0 <= local < self.dims[agent - 1]):
            raise IndexError(f"local index {local} out of range for agent {agent}")
        return t * self.block_dim + self.agent_offset(agent) + local

    def unindex(self, flat: int) -> tuple:
        if not (0 <= flat < self.total_dim):
            raise IndexError(f"flat index {flat} out of range")
        t, rem = divmod(flat, self.block_dim)
        for agent, d in enumerate(self.dims, start=1):
            if rem < d:
                return t, agent, rem
            rem -= d
        raise AssertionError("unreachable")

    def block_slice(self, t: int) -> slice:
        return slice(t * self.block_dim, (t + 1) * self.block_dim)

    def agent_indices(self, agent: int) -> np.ndarray:
        """All flat indices owned by an agent, time-major."""
        off = self.agent_offset(agent)
        d = self.dims[agent - 1]
        base = np.arange(self.horizon + 1) * self.block_dim
        return (base[:, None] + off + np.arange(d)[None, :]).ravel()

    def time_agent_indices(self, t: int, agent: int) -> np.ndarray:
        off = t * self.block_dim + self.agent_offset(agent)
        return off + np.arange(self.dims[agent - 1])


@dataclass(frozen=True)
class StackedOperators:
    """Block-diagonal lifted dynamics with the downshift applied.

    ``ZA`` and ``ZB`` are strictly block lower triangular; ``C`` is block
    diagonal in time.  ``x_map``/``u_map``/``y_map`` resolve (time, agent,
    local index) triples to flat offsets; the stacked disturbance shares
    ``x_map`` (its block 0 is x_0).
    """

    horizon: int
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Z: np.ndarray
    ZA: np.ndarray
    ZB: np.ndarray
    x_map: IndexMap
    u_map: IndexMap
    y_map: IndexMap

    def __post_init__(self):
        for name in ("A", "B", "C", "Z", "ZA", "ZB"):
            arr = getattr(self, name)
            arr.setflags(write=False)

    @property
    def n_x(self) -> int:
        return self.x_map.block_dim

    @property
    def n_u(self) -> int:
        return self.u_map.block_dim

    @property
    def n_y(self) -> int:
        return self.y_map.block_dim


def discretize_double_integrator(dt: float):
    """Zero-order-hold discretization of a planar double integrator.

    State ordering is [p_x, p_y, v_x, v_y]; inputs are the two accelerations.
    Returns the pair (A, B) for one step of length ``dt``.
    """
    if not np.isscalar(dt) or not np.isfinite(dt) or dt <= 0:
        raise ValueError(f"step length must be a positive scalar, got {dt!r}")
    dt = float(dt)
    A = np.eye(4)
    A[0, 2] = dt
    A[1, 3] = dt
    B = np.array(
        [
            [0.5 * dt**2, 0.0],
            [0.0, 0.5 * dt**2],
            [dt, 0.0],
            [0.0, dt],
        ]
    )
    return A, B


def _downshift(horizon: int, block: int) -> np.ndarray:
    n = (horizon + 1) * block
    Z = np.zeros((n, n))
    for t in range(horizon):
        Z[(t + 1) * block : (t + 2) * block, t * block : (t + 1) * block] = np.eye(block)
    return Z


def assemble_stacked_operators(problem: Problem) -> StackedOperators:
    """Build the lifted operators for a validated problem.

    Each per-agent or per-pair block lands in the (i, j) mini-block of the
    corresponding time slice; the terminal dynamics blocks are zero.
    """
    T = problem.horizon
    agents = problem.agents
    x_map = IndexMap(T, tuple(a.state_dim for a in agents))
    u_map = IndexMap(T, tuple(a.input_dim for a in agents))
    y_map = IndexMap(T, tuple(a.meas_dim for a in agents))
    n_x, n_u, n_y = x_map.block_dim, u_map.block_dim, y_map.block_dim

    A = np.zeros(((T + 1) * n_x, (T + 1) * n_x))
    B = np.zeros(((T + 1) * n_x, (T + 1) * n_u))
    C = np.zeros(((T + 1) * n_y, (T + 1) * n_x))

    for a in agents:
        if len(a.A_blocks) != T or len(a.B_blocks) != T:
            raise StructureError(
                f"agent {a.index}: expected {T} dynamics blocks, got "
                f"{len(a.A_blocks)} A and {len(a.B_blocks)} B"
            )
        rx = x_map.agent_offset(a.index)
        ru = u_map.agent_offset(a.index)
        for t in range(T):
            At, Bt = a.A_blocks[t], a.B_blocks[t]
            if At.shape != (a.state_dim, a.state_dim):
                raise StructureError(f"agent {a.index}: A block at t={t} has shape {At.shape}")
            if Bt.shape != (a.state_dim, a.input_dim):
                raise StructureError(f"agent {a.index}: B block at t={t} has shape {Bt.shape}")
            A[t * n_x + rx : t * n_x + rx + a.state_dim, t * n_x + rx : t * n_x + rx + a.state_dim] = At
            B[t * n_x + rx : t * n_x + rx + a.state_dim, t * n_u + ru : t * n_u + ru + a.input_dim] = Bt

    valid = {a.index for a in agents}
    dims_x = {a.index: a.state_dim for a in agents}
    dims_y = {a.index: a.meas_dim for a in agents}
    for i, ks in problem.topology.neighbors.items():
        if i not in valid:
            raise StructureError(f"topology refers to unknown agent {i}")
        for k in ks:
            if k not in valid:
                raise StructureError(f"agent {i} senses unknown agent {k}")
            mats = problem.topology.blocks.get((i, k))
            if mats is None or len(mats) != T + 1:
                raise StructureError(
                    f"measurement pair ({i},{k}) needs {T + 1} time slices, got "
                    f"{0 if mats is None else len(mats)}"
                )
            ry = y_map.agent_offset(i)
            cx = x_map.agent_offset(k)
            for t, Ct in enumerate(mats):
                if Ct.shape != (dims_y[i], dims_x[k]):
                    raise StructureError(
                        f"measurement block ({i},{k}) at t={t} has shape {Ct.shape}, "
                        f"expected {(dims_y[i], dims_x[k])}"
                    )
                C[t * n_y + ry : t * n_y + ry + dims_y[i], t * n_x + cx : t * n_x + cx + dims_x[k]] = Ct

    Z = _downshift(T, n_x)
    return StackedOperators(
        horizon=T, A=A, B=B, C=C, Z=Z, ZA=Z @ A, ZB=Z @ B,
        x_map=x_map, u_map=u_map, y_map=y_map,
    )


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "fatal" | "warning"
    message: str

    @property
    def fatal(self) -> bool:
        return self.severity == "fatal"


def _check_set(diags, s, dim, what):
    if isinstance(s, Box):
        if s.dim != dim:
            diags.append(Diagnostic("fatal", f"{what} has dimension {s.dim}, expected {dim}"))
    elif isinstance(s, Polytope):
        if s.n_rows and s.dim != dim:
            diags.append(Diagnostic("fatal", f"{what} constrains R^{s.dim}, expected R^{dim}"))
        bad = np.all(s.H == 0, axis=1) & (s.h < 0) if s.n_rows else np.zeros(0, bool)
        if np.any(bad):
            diags.append(Diagnostic("fatal", f"{what} empty: zero row with negative bound"))
    else:
        diags.append(Diagnostic("fatal", f"{what} is neither a Box nor a Polytope"))


def validate_problem(problem: Problem) -> list:
    """Run all structural checks; returns an empty list iff the problem is sound.

    Each finding is a :class:`Diagnostic` tagged fatal or warning; nothing is
    raised so callers can render all findings at once.
    """
    diags: list = []
    T = problem.horizon
    if T < 1:
        diags.append(Diagnostic("fatal", f"horizon must be >= 1, got {T}"))
        return diags

    seen = sorted(a.index for a in problem.agents)
    if seen != list(range(1, len(seen) + 1)):
        diags.append(Diagnostic("fatal", f"agent indices must be 1..N, got {seen}"))

    for a in problem.agents:
        for name, blocks, shape in (
            ("A", a.A_blocks, (a.state_dim, a.state_dim)),
            ("B", a.B_blocks, (a.state_dim, a.input_dim)),
        ):
            if len(blocks) != T:
                diags.append(
                    Diagnostic(
                        "fatal",
                        f"agent {a.index}: missing dynamics block at t={T - 1} "
                        f"({name} has {len(blocks)} of {T})",
                    )
                )
                continue
            for t, M in enumerate(blocks):
                if M.shape != shape:
                    diags.append(
                        Diagnostic("fatal", f"agent {a.index}: {name} block at t={t} has shape {M.shape}")
                    )

    valid = {a.index for a in problem.agents}
    dims_x = {a.index: a.state_dim for a in problem.agents}
    dims_y = {a.index: a.meas_dim for a in problem.agents}
    for i, ks in problem.topology.neighbors.items():
        if i not in valid:
            diags.append(Diagnostic("fatal", f"topology lists unknown agent {i}"))
            continue
        for k in ks:
            if k not in valid:
                diags.append(Diagnostic("fatal", f"agent {i} senses unknown agent {k}"))
                continue
            mats = problem.topology.blocks.get((i, k))
            if mats is None or len(mats) != T + 1:
                diags.append(
                    Diagnostic("fatal", f"measurement pair ({i},{k}) needs {T + 1} slices")
                )
                continue
            for t, Ct in enumerate(mats):
                if Ct.shape != (dims_y[i], dims_x[k]):
                    diags.append(
                        Diagnostic("fatal", f"measurement block ({i},{k}) at t={t} has shape {Ct.shape}")
                    )

    if problem.delays.n_agents != len(problem.agents):
        diags.append(Diagnostic("fatal", "delay matrix size does not match the number of agents"))

    n_x, n_u, n_y = problem.n_x, problem.n_u, problem.n_y
    if len(problem.state_sets) != T + 1:
        diags.append(Diagnostic("fatal", f"expected {T + 1} state sets, got {len(problem.state_sets)}"))
    else:
        _check_set(diags, problem.state_sets[0], n_x, "initial set")
        if isinstance(problem.state_sets[0], Box) and np.any(problem.state_sets[0].half_width == 0):
            diags.append(Diagnostic("warning", "initial set has empty interior in some coordinate"))
        for t, s in enumerate(problem.state_sets[1:], start=1):
            _check_set(diags, s, n_x, f"state set at t={t}")
    if len(problem.input_sets) != T + 1:
        diags.append(Diagnostic("fatal", f"expected {T + 1} input sets, got {len(problem.input_sets)}"))
    else:
        for t, s in enumerate(problem.input_sets):
            _check_set(diags, s, n_u, f"input set at t={t}")
    if len(problem.disturbance_sets) != T:
        diags.append(Diagnostic("fatal", f"expected {T} disturbance sets, got {len(problem.disturbance_sets)}"))
    else:
        for t, s in enumerate(problem.disturbance_sets):
            _check_set(diags, s, n_x, f"disturbance set at t={t}")
    if len(problem.noise_sets) != T + 1:
        diags.append(Diagnostic("fatal", f"expected {T + 1} noise sets, got {len(problem.noise_sets)}"))
    else:
        for t, s in enumerate(problem.noise_sets):
            _check_set(diags, s, n_y, f"noise set at t={t}")

    return diags
