"""Robust constraint tightening: safety for every disturbance realization.

Every state/input constraint row h'[x;u] <= b is made deterministic through
the response maps: with [x;u] = Phi [w; v] and the stacked disturbance
ranging over a product of per-time sets, the worst case of the left side
decomposes per time block.  Interval blocks tighten in closed form (center
term plus a weighted L1 norm); H-representation blocks are resolved exactly
by small per-block linear programs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import Box, Polytope, Problem, StackedOperators, assemble_stacked_operators
from .sls import ClosedLoopResponse

__all__ = [
    "RobustRow",
    "LinearInequalitySystem",
    "RobustnessReport",
    "UnboundedDisturbanceError",
    "build_robust_inequalities",
    "verify_robust_exact",
    "montecarlo_margin",
    "sample_box_or_polytope",
]


class UnboundedDisturbanceError(RuntimeError):
    """A disturbance set is unbounded along a direction a constraint feels."""


@dataclass(frozen=True)
class RobustRow:
    """One scalar constraint row with its provenance."""

    kind: str  # "state" | "input"
    time: int
    set_row: int
    coords: np.ndarray  # nonzero coordinates within the time block
    values: np.ndarray
    bound: float
    label: str


def _rows_of_set(s, dim):
    """Yield (coords, values, bound) rows for a Box or Polytope constraint set."""
    if isinstance(s, Polytope):
        for k in range(s.n_rows):
            coords = np.flatnonzero(s.H[k])
            yield coords, s.H[k, coords], float(s.h[k]), k
    elif isinstance(s, Box):
        k = 0
        for axis in range(s.dim):
            for sign in (1.0, -1.0):
                yield (
                    np.array([axis]),
                    np.array([sign]),
                    float(sign * s.center[axis] + s.half_width[axis]),
                    k,
                )
                k += 1
    else:
        raise TypeError(f"unsupported constraint set type {type(s).__name__}")


def _box_stack(sets):
    """Concatenate per-time Box sets into (center, half_width); None if mixed."""
    if all(isinstance(s, Box) for s in sets):
        return (
            np.concatenate([s.center for s in sets]),
            np.concatenate([s.half_width for s in sets]),
        )
    return None


def _lp_max(objective, poly: Polytope) -> float:
    """Exact maximum of objective . z over an H-rep polytope."""
    from scipy.optimize import linprog

    res = linprog(-objective, A_ub=poly.H, b_ub=poly.h, bounds=(None, None), method="highs")
    if res.status == 3:
        raise UnboundedDisturbanceError(
            "disturbance set unbounded along a direction the constraints feel; "
            "the robust problem is infeasible by construction"
        )
    if not res.success:
        raise RuntimeError(f"support-function LP failed: {res.message}")
    return float(-res.fun)


class LinearInequalitySystem:
    """All robustified constraint rows of a problem, with provenance.

    The canonical affine form over the response unknowns and elementwise
    bound auxiliaries is available through :meth:`materialize_lambda` (for
    interval disturbance sets) and :meth:`materialize_dual` (for H-rep sets);
    exact margins never need the materialized form.
    """

    def __init__(self, problem: Problem, ops: StackedOperators):
        self.problem = problem
        self.ops = ops
        T = problem.horizon
        n_x, n_u = problem.n_x, problem.n_u

        rows = []
        state_embed, input_embed = [], []
        for t in range(1, T + 1):
            for coords, values, bound, k in _rows_of_set(problem.state_sets[t], n_x):
                rows.append(
                    RobustRow("state", t, k, coords, values, bound, f"state[t={t}] row {k}")
                )
                h_full = np.zeros((T + 1) * n_x)
                h_full[t * n_x + coords] = values
                state_embed.append(h_full)
        for t in range(T + 1):
            for coords, values, bound, k in _rows_of_set(problem.input_sets[t], n_u):
                rows.append(
                    RobustRow("input", t, k, coords, values, bound, f"input[t={t}] row {k}")
                )
                h_full = np.zeros((T + 1) * n_u)
                h_full[t * n_u + coords] = values
                input_embed.append(h_full)

        self.rows = tuple(rows)
        self._n_state_rows = len(state_embed)
        self.H_state = np.array(state_embed) if state_embed else np.zeros((0, (T + 1) * n_x))
        self.H_input = np.array(input_embed) if input_embed else np.zeros((0, (T + 1) * n_u))
        self.bounds = np.array([r.bound for r in rows])

        self.w_sets = (problem.initial_set,) + tuple(problem.disturbance_sets)
        self.v_sets = tuple(problem.noise_sets)
        self.w_box = _box_stack(self.w_sets)
        self.v_box = _box_stack(self.v_sets)

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    @property
    def boxes_only(self) -> bool:
        return self.w_box is not None and self.v_box is not None

    def labels(self):
        return [r.label for r in self.rows]

    # -- evaluation ----------------------------------------------------------

    def images(self, phi: ClosedLoopResponse):
        """Per-row sensitivities to the stacked disturbance and noise."""
        G_w = np.vstack([self.H_state @ phi.phi_xx, self.H_input @ phi.phi_ux])
        G_v = np.vstack([self.H_state @ phi.phi_xy, self.H_input @ phi.phi_uy])
        return G_w, G_v

    def _channel_max(self, G, sets, block_dim):
        """Worst-case contribution of one channel, row by row."""
        box = _box_stack(sets)
        if box is not None:
            c, d = box
            return G @ c + np.abs(G) @ d
        out = np.zeros(G.shape[0])
        for t, s in enumerate(sets):
            sl = slice(t * block_dim, (t + 1) * block_dim)
            block = G[:, sl]
            if isinstance(s, Box):
                out += block @ s.center + np.abs(block) @ s.half_width
            else:
                for r in range(G.shape[0]):
                    if np.any(block[r]):
                        out[r] += _lp_max(block[r], s)
        return out

    def margins(self, phi: ClosedLoopResponse) -> np.ndarray:
        """Exact worst-case slack of every row (negative means violated)."""
        G_w, G_v = self.images(phi)
        worst = self._channel_max(G_w, self.w_sets, self.problem.n_x)
        worst += self._channel_max(G_v, self.v_sets, self.problem.n_y)
        return self.bounds - worst

    def row_values(self, x_stack: np.ndarray, u_stack: np.ndarray) -> np.ndarray:
        """Nominal left-hand sides on one realized trajectory."""
        return np.concatenate([self.H_state @ x_stack, self.H_input @ u_stack])

    # -- canonical affine materializations ------------------------------------

    def phi_coordinate_layout(self):
        """Flat layout of the free (block-lower) response coordinates."""
        ops = self.ops
        T = ops.horizon
        entries = []  # (component, flat_row, flat_col)
        for comp, rm, cm, strict in (
            ("xx", ops.x_map, ops.x_map, False),
            ("xy", ops.x_map, ops.y_map, True),
            ("ux", ops.u_map, ops.x_map, False),
            ("uy", ops.u_map, ops.y_map, False),
        ):
            for t in range(T + 1):
                hi = t if strict else t + 1
                for r in range(t * rm.block_dim, (t + 1) * rm.block_dim):
                    for c in range(hi * cm.block_dim):
                        entries.append((comp, r, c))
        return entries

    def materialize_lambda(self):
        """Dense (G, g) of the auxiliary-bound linearization, plus layouts.

        Variables are ordered [phi free coordinates, lambda auxiliaries]; for
        every row and every disturbance/noise coordinate with positive half
        width there are the two sign rows bounding the scaled sensitivity by
        its auxiliary, then one budget row summing the auxiliaries with the
        center term.  Interval channels only; intended for small instances.
        """
        if not self.boxes_only:
            raise ValueError("auxiliary-bound linearization requires interval sets")
        layout = self.phi_coordinate_layout()
        pos = {key: idx for idx, key in enumerate(layout)}
        n_phi = len(layout)
        cw, dw = self.w_box
        cv, dv = self.v_box

        lam_index = {}
        for r_idx, row in enumerate(self.rows):
            for j in np.flatnonzero(dw):
                lam_index[(r_idx, "w", int(j))] = len(lam_index)
            for j in np.flatnonzero(dv):
                lam_index[(r_idx, "v", int(j))] = len(lam_index)
        n_lam = len(lam_index)

        G_rows, g_vals, provenance = [], [], []

        def phi_coeffs(row, channel, j):
            comp = {"w": {"state": "xx", "input": "ux"}, "v": {"state": "xy", "input": "uy"}}[
                channel
            ][row.kind]
            block = self.problem.n_x if row.kind == "state" else self.problem.n_u
            out = []
            for c_local, v in zip(row.coords, row.values):
                flat_r = row.time * block + int(c_local)
                key = (comp, flat_r, int(j))
                if key in pos:
                    out.append((pos[key], v))
            return out

        for r_idx, row in enumerate(self.rows):
            budget = np.zeros(n_phi + n_lam)
            for channel, c_vec, d_vec in (("w", cw, dw), ("v", cv, dv)):
                for j in range(c_vec.size):
                    coeffs = phi_coeffs(row, channel, j)
                    if d_vec[j] > 0:
                        lam = n_phi + lam_index[(r_idx, channel, j)]
                        for sign in (1.0, -1.0):
                            g_row = np.zeros(n_phi + n_lam)
                            for p, v in coeffs:
                                g_row[p] = sign * v * d_vec[j]
                            g_row[lam] = -1.0
                            G_rows.append(g_row)
                            g_vals.append(0.0)
                            provenance.append(f"{row.label} | abs bound {channel}[{j}]")
                        budget[lam] += 1.0
                    for p, v in coeffs:
                        budget[p] += v * c_vec[j]
            G_rows.append(budget)
            g_vals.append(row.bound)
            provenance.append(f"{row.label} | budget")

        return np.array(G_rows), np.array(g_vals), layout, provenance

    def materialize_dual(self):
        """Stacked H-representation of the joint disturbance/noise set.

        Boxes are rewritten as two-sided interval rows so the description
        G_wv z <= g_wv covers every channel; the dual rows for a constraint
        then read: multipliers >= 0, multipliers' combination of G_wv equals
        the row sensitivity, and the certified budget stays within the bound.
        """
        Hs, hs = [], []
        for s in self.w_sets + self.v_sets:
            if isinstance(s, Box):
                Hs.append(np.vstack([np.eye(s.dim), -np.eye(s.dim)]))
                hs.append(np.concatenate([s.upper, -s.lower]))
            else:
                Hs.append(s.H)
                hs.append(s.h)
        from scipy.linalg import block_diag

        return block_diag(*Hs), np.concatenate(hs)

    def dual_certificates(self, phi: ClosedLoopResponse):
        """Per-row nonnegative multipliers certifying the exact margins.

        Each returned vector lam satisfies lam >= 0 and lam' G_wv equal to
        the row's stacked sensitivity; lam' g_wv is the worst-case value, so
        the row is robustly satisfied iff that stays within its bound.
        """
        from scipy.optimize import linprog

        G_wv, g_wv = self.materialize_dual()
        G_w, G_v = self.images(phi)
        sens = np.hstack([G_w, G_v])
        certificates = []
        for r in range(self.n_rows):
            res = linprog(
                g_wv,
                A_eq=G_wv.T,
                b_eq=sens[r],
                bounds=(0, None),
                method="highs",
            )
            if not res.success:
                raise UnboundedDisturbanceError(
                    f"no dual certificate for row {self.rows[r].label}: {res.message}"
                )
            certificates.append(res.x)
        return certificates


@dataclass
class RobustnessReport:
    margins: np.ndarray
    labels: list
    method: str  # "exact" | "sampled"
    tol: float = 1e-6
    binding_tol: float = 1e-4

    @property
    def min_margin(self) -> float:
        return float(self.margins.min()) if self.margins.size else float("inf")

    @property
    def passed(self) -> bool:
        return self.margins.size == 0 or self.min_margin >= -self.tol

    @property
    def binding_rows(self) -> list:
        return [
            (self.labels[k], float(self.margins[k]))
            for k in np.flatnonzero(np.abs(self.margins) <= self.binding_tol)
        ]

    @property
    def violations(self) -> list:
        return [
            (self.labels[k], float(self.margins[k]))
            for k in np.flatnonzero(self.margins < -self.tol)
        ]


def build_robust_inequalities(problem: Problem, ops: StackedOperators) -> LinearInequalitySystem:
    """Collect and robustify every state/input constraint row."""
    return LinearInequalitySystem(problem, ops)


def verify_robust_exact(
    phi: ClosedLoopResponse,
    problem: Problem,
    ops: Optional[StackedOperators] = None,
    system: Optional[LinearInequalitySystem] = None,
    tol: float = 1e-6,
) -> RobustnessReport:
    """Exact worst-case margins of a response over all realizations."""
    if system is None:
        system = LinearInequalitySystem(problem, ops or phi.ops)
    return RobustnessReport(system.margins(phi), system.labels(), "exact", tol=tol)


def sample_box_or_polytope(s, rng: np.random.Generator, max_attempts: int = 10**6):
    """Uniform sample from a Box, or rejection-sample an H-rep polytope."""
    if isinstance(s, Box):
        return s.sample(rng)
    if s.n_rows == 0:
        raise UnboundedDisturbanceError("cannot sample an unbounded (row-free) polytope")
    lo, hi = _polytope_bounding_box(s)
    for _ in range(max_attempts):
        z = rng.uniform(lo, hi)
        if s.contains(z):
            return z
    raise RuntimeError(
        f"rejection sampling failed after {max_attempts} attempts; "
        "the set may be thin relative to its bounding box"
    )


def _polytope_bounding_box(s: Polytope):
    lo = np.empty(s.dim)
    hi = np.empty(s.dim)
    for k in range(s.dim):
        e = np.zeros(s.dim)
        e[k] = 1.0
        hi[k] = _lp_max(e, s)
        lo[k] = -_lp_max(-e, s)
    return lo, hi


def montecarlo_margin(
    phi: ClosedLoopResponse,
    problem: Problem,
    n_samples: int,
    seed: int,
    system: Optional[LinearInequalitySystem] = None,
) -> RobustnessReport:
    """Sampled per-row worst margins; deterministic for a fixed seed."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    if system is None:
        system = LinearInequalitySystem(problem, phi.ops)
    rng = np.random.default_rng(seed)
    w_sets, v_sets = system.w_sets, system.v_sets
    dim_w = sum(s.dim for s in w_sets)
    dim_v = sum(s.dim for s in v_sets)
    W = np.empty((n_samples, dim_w))
    V = np.empty((n_samples, dim_v))
    for n in range(n_samples):
        W[n] = np.concatenate([sample_box_or_polytope(s, rng) for s in w_sets])
        V[n] = np.concatenate([sample_box_or_polytope(s, rng) for s in v_sets])
    G_w, G_v = system.images(phi)
    values = W @ G_w.T + V @ G_v.T  # (n_samples, n_rows)
    margins = system.bounds - values.max(axis=0)
    return RobustnessReport(margins, system.labels(), "sampled")
