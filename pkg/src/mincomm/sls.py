"""Finite-horizon system level synthesis machinery.

The closed loop of any block-lower-triangular output-feedback gain is
described by four response maps taking stacked disturbance and noise to
stacked state and input.  Those maps satisfy two affine equations; this
module provides both directions (gain -> responses, responses -> gain), the
affine-constraint bookkeeping, and an exact linear parameterization of the
solution set by the input-from-noise component, which downstream code uses
for projections and for the synthesis solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .model import IndexMap, StackedOperators
from .patterns import COMPONENTS, COL_SPACE, ROW_SPACE, SparsityPattern

__all__ = [
    "ClosedLoopResponse",
    "GainMatrix",
    "AffineConstraintSystem",
    "AchievabilityReport",
    "build_achievability",
    "closed_loop_of_gain",
    "recover_gain",
    "neumann_inverse",
    "check_achievability",
    "delay_violation",
    "InvalidResponseError",
]


class InvalidResponseError(ValueError):
    """The response maps violate a structural premise (e.g. unit diagonal)."""


def _space_map(ops: StackedOperators, space: str) -> IndexMap:
    return {"x": ops.x_map, "u": ops.u_map, "y": ops.y_map}[space]


def _block_lower_violation(M, row_map: IndexMap, col_map: IndexMap, strict=False) -> float:
    """Largest magnitude found above the (block) diagonal."""
    worst = 0.0
    T = row_map.horizon
    for t in range(T + 1):
        lo = t if strict else t + 1
        if lo > T:
            continue
        rows = row_map.block_slice(t)
        cols = slice(lo * col_map.block_dim, (T + 1) * col_map.block_dim)
        if M[rows, cols].size:
            worst = max(worst, float(np.abs(M[rows, cols]).max()))
    return worst


@dataclass(frozen=True)
class ClosedLoopResponse:
    """The four stacked response maps, with mini-block accessors."""

    ops: StackedOperators
    phi_xx: np.ndarray
    phi_xy: np.ndarray
    phi_ux: np.ndarray
    phi_uy: np.ndarray

    def component(self, comp: str) -> np.ndarray:
        return getattr(self, f"phi_{comp}")

    def maps(self, comp: str):
        return _space_map(self.ops, ROW_SPACE[comp]), _space_map(self.ops, COL_SPACE[comp])

    def block(self, comp: str, t: int, tau: int) -> np.ndarray:
        rm, cm = self.maps(comp)
        return self.component(comp)[rm.block_slice(t), cm.block_slice(tau)]

    def mini_block(self, comp: str, t: int, tau: int, i: int, j: int) -> np.ndarray:
        rm, cm = self.maps(comp)
        rows = rm.time_agent_indices(t, i)
        cols = cm.time_agent_indices(tau, j)
        return self.component(comp)[np.ix_(rows, cols)]

    def pair_block(self, comp: str, i: int, j: int) -> np.ndarray:
        """The (i, j) pair matrix: all time blocks of one agent pair."""
        rm, cm = self.maps(comp)
        return self.component(comp)[np.ix_(rm.agent_indices(i), cm.agent_indices(j))]

    def triangularity_violation(self) -> float:
        worst = 0.0
        for comp in COMPONENTS:
            rm, cm = self.maps(comp)
            worst = max(
                worst,
                _block_lower_violation(self.component(comp), rm, cm, strict=(comp == "xy")),
            )
        return worst

    def stack(self) -> np.ndarray:
        """[[phi_xx, phi_xy], [phi_ux, phi_uy]] as one matrix."""
        return np.block([[self.phi_xx, self.phi_xy], [self.phi_ux, self.phi_uy]])


@dataclass(frozen=True)
class GainMatrix:
    """Block-lower-triangular output-feedback gain over the full horizon."""

    ops: StackedOperators
    matrix: np.ndarray

    def block(self, t: int, tau: int) -> np.ndarray:
        return self.matrix[self.ops.u_map.block_slice(t), self.ops.y_map.block_slice(tau)]

    def mini_block(self, t: int, tau: int, i: int, j: int) -> np.ndarray:
        rows = self.ops.u_map.time_agent_indices(t, i)
        cols = self.ops.y_map.time_agent_indices(tau, j)
        return self.matrix[np.ix_(rows, cols)]

    def pair_block(self, i: int, j: int) -> np.ndarray:
        return self.matrix[
            np.ix_(self.ops.u_map.agent_indices(i), self.ops.y_map.agent_indices(j))
        ]

    def triangularity_violation(self) -> float:
        return _block_lower_violation(self.matrix, self.ops.u_map, self.ops.y_map)


def _zero_upper_blocks(M, row_map: IndexMap, col_map: IndexMap, strict=False):
    T = row_map.horizon
    for t in range(T + 1):
        lo = t if strict else t + 1
        if lo <= T:
            M[row_map.block_slice(t), lo * col_map.block_dim :] = 0.0
    return M


def closed_loop_of_gain(K: GainMatrix, ops: StackedOperators) -> ClosedLoopResponse:
    """Responses realized by a gain: exact closed-form maps.

    The state-from-disturbance map inverts I - ZA - ZB K C, which always
    exists since the subtracted part is strictly block lower triangular.
    """
    Km = K.matrix if isinstance(K, GainMatrix) else np.asarray(K, dtype=float)
    n = ops.ZA.shape[0]
    M = np.eye(n) - ops.ZA - ops.ZB @ Km @ ops.C
    phi_xx = np.linalg.solve(M, np.eye(n))
    ZBK = ops.ZB @ Km
    phi_xy = phi_xx @ ZBK
    KC = Km @ ops.C
    phi_ux = KC @ phi_xx
    phi_uy = Km + KC @ phi_xx @ ZBK
    return ClosedLoopResponse(ops, phi_xx, phi_xy, phi_ux, phi_uy)


def neumann_inverse(phi_xx: np.ndarray, ops: StackedOperators) -> np.ndarray:
    """Inverse of the state-from-disturbance map via its nilpotent part.

    Writes the map as I + N with N strictly block lower triangular, so the
    inverse is the finite alternating power sum; no conditioning concerns.
    """
    n = phi_xx.shape[0]
    N = phi_xx - np.eye(n)
    inv = np.eye(n)
    P = np.eye(n)
    for _ in range(ops.horizon):
        P = -N @ P
        if not P.any():
            break
        inv += P
    return inv


def recover_gain(phi: ClosedLoopResponse, tol: float = 1e-8) -> GainMatrix:
    """Extract the realizing gain from achievable responses.

    Requires unit diagonal blocks on the state-from-disturbance map (forced
    by the affine constraints); raises InvalidResponseError otherwise.
    """
    ops = phi.ops
    n_x = ops.n_x
    worst = 0.0
    for t in range(ops.horizon + 1):
        D = phi.block("xx", t, t)
        worst = max(worst, float(np.abs(D - np.eye(n_x)).max()))
    if worst > tol:
        raise InvalidResponseError(
            f"diagonal blocks deviate from identity by {worst:.2e} (tol {tol:.0e})"
        )
    inv = neumann_inverse(phi.phi_xx, ops)
    K = phi.phi_uy - phi.phi_ux @ inv @ phi.phi_xy
    _zero_upper_blocks(K, ops.u_map, ops.y_map)
    return GainMatrix(ops, K)


def delay_violation(K: GainMatrix, delays) -> float:
    """Largest gain magnitude inside the delay-forbidden region."""
    ops = K.ops
    worst = 0.0
    n = len(ops.u_map.dims)
    for i in range(1, n + 1):
        for j in range(1, n + 1):
            if i == j:
                continue
            ell = delays.of(i, j)
            if ell <= 0:
                continue
            for t in range(ops.horizon + 1):
                for tau in range(max(0, t - ell + 1), t + 1):
                    blk = K.mini_block(t, tau, i, j)
                    if blk.size:
                        worst = max(worst, float(np.abs(blk).max()))
    return worst


@dataclass
class AchievabilityReport:
    max_abs: float
    eq1_max: float
    eq2_max: float
    eq1_fro: float
    eq2_fro: float
    triangularity: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_abs <= self.tol and self.triangularity <= self.tol


class UYParameterization:
    """Exact linear parameterization of the achievable responses.

    With Q the inverse of (I - ZA), every solution of the affine equations
    with block-lower-triangular components is

        phi_uy = U,   phi_ux = U C Q,   phi_xy = Q ZB U,
        phi_xx = Q + Q ZB U C Q,

    where U ranges over block-lower-triangular matrices.  Sparsity masks
    become homogeneous linear constraints on U, reduced per receiving agent
    to an orthonormal null-space basis.
    """

    def __init__(self, ops: StackedOperators, pattern: Optional[SparsityPattern] = None):
        self.ops = ops
        self.pattern = pattern
        T = ops.horizon
        n = ops.ZA.shape[0]
        self.Q = np.linalg.solve(np.eye(n) - ops.ZA, np.eye(n))
        self.M1 = self.Q @ ops.ZB  # state response to inputs (strictly BLT)
        self.M2 = ops.C @ self.Q  # measurement response to stacked disturbance

        u_map, y_map = ops.u_map, ops.y_map
        self.n_agents = len(u_map.dims)
        rows_by_agent, cols_by_agent = [], []
        for i in range(1, self.n_agents + 1):
            rr, cc = [], []
            for t in range(T + 1):
                r_idx = u_map.time_agent_indices(t, i)
                c_idx = np.arange(0, (t + 1) * y_map.block_dim)
                grid_r = np.repeat(r_idx, c_idx.size)
                grid_c = np.tile(c_idx, r_idx.size)
                rr.append(grid_r)
                cc.append(grid_c)
            rows_by_agent.append(np.concatenate(rr))
            cols_by_agent.append(np.concatenate(cc))
        self.row_idx = rows_by_agent
        self.col_idx = cols_by_agent
        self.agent_dims = [r.size for r in rows_by_agent]

        self.null_bases = [None] * self.n_agents  # None means identity
        if pattern is not None:
            self._reduce_by_pattern(pattern)
        self.xi_dims = [
            (self.agent_dims[k] if self.null_bases[k] is None else self.null_bases[k].shape[1])
            for k in range(self.n_agents)
        ]
        self.dim = sum(self.xi_dims)
        self._cholesky = None  # cached projection factorization per agent

    # -- mask reduction ----------------------------------------------------

    def _mask_rows_for_agent(self, pattern: SparsityPattern, agent: int) -> np.ndarray:
        """Stack the linear functionals on agent's U coords forced to zero."""
        ops = self.ops
        u_map, y_map, x_map = ops.u_map, ops.y_map, ops.x_map
        rows_i = self.row_idx[agent - 1]
        cols_i = self.col_idx[agent - 1]
        d_i = rows_i.size
        blocks = []

        def minis_of(comp):
            by_pair = {}
            for (t, tau, i, j) in pattern.disallowed_minis(comp):
                if i == agent:
                    by_pair.setdefault(j, []).append((t, tau))
            return by_pair

        # direct coordinates of U
        for j, minis in minis_of("uy").items():
            sel = np.zeros(d_i, dtype=bool)
            for (t, tau) in minis:
                rr = u_map.time_agent_indices(t, agent)
                cc = y_map.time_agent_indices(tau, j)
                sel |= np.isin(rows_i, rr) & np.isin(cols_i, cc)
            idx = np.flatnonzero(sel)
            rowsA = np.zeros((idx.size, d_i))
            rowsA[np.arange(idx.size), idx] = 1.0
            blocks.append(rowsA)

        # (U C Q) minis: coefficients follow the measurement response columns
        for j, minis in minis_of("ux").items():
            pairs_r, pairs_c = [], []
            for (t, tau) in minis:
                rr = u_map.time_agent_indices(t, agent)
                cc = x_map.time_agent_indices(tau, j)
                pr, pc = np.meshgrid(rr, cc, indexing="ij")
                pairs_r.append(pr.ravel())
                pairs_c.append(pc.ravel())
            pr = np.concatenate(pairs_r)
            pc = np.concatenate(pairs_c)
            A = (rows_i[None, :] == pr[:, None]) * self.M2[cols_i[None, :], pc[:, None]]
            blocks.append(A)

        # (Q ZB U) minis: coefficients follow the input response rows
        for j, minis in minis_of("xy").items():
            pairs_r, pairs_c = [], []
            for (t, tau) in minis:
                rr = x_map.time_agent_indices(t, agent)
                cc = y_map.time_agent_indices(tau, j)
                pr, pc = np.meshgrid(rr, cc, indexing="ij")
                pairs_r.append(pr.ravel())
                pairs_c.append(pc.ravel())
            pr = np.concatenate(pairs_r)
            pc = np.concatenate(pairs_c)
            A = self.M1[pr[:, None], rows_i[None, :]] * (cols_i[None, :] == pc[:, None])
            blocks.append(A)

        # (Q ZB U C Q) minis: outer products of the two responses
        for j, minis in minis_of("xx").items():
            if j == agent:
                raise ValueError("masking a diagonal state mini-block is not supported")
            pairs_r, pairs_c = [], []
            for (t, tau) in minis:
                rr = x_map.time_agent_indices(t, agent)
                cc = x_map.time_agent_indices(tau, j)
                pr, pc = np.meshgrid(rr, cc, indexing="ij")
                pairs_r.append(pr.ravel())
                pairs_c.append(pc.ravel())
            pr = np.concatenate(pairs_r)
            pc = np.concatenate(pairs_c)
            A = self.M1[pr[:, None], rows_i[None, :]] * self.M2[cols_i[None, :], pc[:, None]]
            blocks.append(A)

        if not blocks:
            return np.zeros((0, d_i))
        return np.vstack(blocks)

    def _reduce_by_pattern(self, pattern: SparsityPattern):
        # cross mini-blocks of the state response only exist off the dynamics
        # block diagonal when the decoupled-dynamics premise fails
        for i in range(1, self.n_agents + 1):
            for j in range(1, self.n_agents + 1):
                if i != j:
                    rows = self.ops.x_map.agent_indices(i)
                    cols = self.ops.x_map.agent_indices(j)
                    if np.abs(self.Q[np.ix_(rows, cols)]).max() > 1e-12:
                        raise ValueError(
                            "sparsity reduction requires decoupled agent dynamics"
                        )
        for agent in range(1, self.n_agents + 1):
            A = self._mask_rows_for_agent(pattern, agent)
            if A.shape[0] == 0:
                continue
            _, svals, vt = np.linalg.svd(A, full_matrices=True)
            cutoff = max(A.shape) * np.finfo(float).eps * (svals[0] if svals.size else 0.0)
            cutoff = max(cutoff, 1e-9 * (svals[0] if svals.size else 0.0))
            rank = int(np.sum(svals > cutoff))
            self.null_bases[agent - 1] = vt[rank:].T.copy()

    # -- coordinate plumbing -------------------------------------------------

    def uy_from_q(self, q_parts) -> np.ndarray:
        U = np.zeros((self.ops.u_map.total_dim, self.ops.y_map.total_dim))
        for k in range(self.n_agents):
            U[self.row_idx[k], self.col_idx[k]] = q_parts[k]
        return U

    def q_from_uy(self, U: np.ndarray):
        return [U[self.row_idx[k], self.col_idx[k]] for k in range(self.n_agents)]

    def split_xi(self, xi: np.ndarray):
        out, off = [], 0
        for d in self.xi_dims:
            out.append(xi[off : off + d])
            off += d
        return out

    def uy_from_xi(self, xi: np.ndarray) -> np.ndarray:
        parts = self.split_xi(xi)
        q = [
            parts[k] if self.null_bases[k] is None else self.null_bases[k] @ parts[k]
            for k in range(self.n_agents)
        ]
        return self.uy_from_q(q)

    def xi_from_gradient_U(self, G: np.ndarray) -> np.ndarray:
        """Adjoint of uy_from_xi applied to a gradient in U coordinates."""
        chunks = []
        for k in range(self.n_agents):
            g = G[self.row_idx[k], self.col_idx[k]]
            if self.null_bases[k] is not None:
                g = self.null_bases[k].T @ g
            chunks.append(g)
        return np.concatenate(chunks)

    def response(self, U: np.ndarray) -> ClosedLoopResponse:
        UM2 = U @ self.M2
        phi_ux = UM2
        phi_xy = self.M1 @ U
        phi_xx = self.Q + self.M1 @ UM2
        return ClosedLoopResponse(self.ops, phi_xx, phi_xy, phi_ux, U.copy())

    # -- least-squares projection onto the solution set ----------------------

    def _gram_factors(self):
        if self._cholesky is None:
            R1 = np.eye(self.M1.shape[1]) + self.M1.T @ self.M1
            R2 = np.eye(self.M2.shape[0]) + self.M2 @ self.M2.T
            chols = []
            for k in range(self.n_agents):
                rows, cols = self.row_idx[k], self.col_idx[k]
                G = R1[np.ix_(rows, rows)] * R2[np.ix_(cols, cols)]
                N = self.null_bases[k]
                if N is not None:
                    G = N.T @ G @ N
                G = G + 1e-12 * np.eye(G.shape[0])
                chols.append(np.linalg.cholesky(G))
            self._cholesky = chols
        return self._cholesky

    def project(self, target: ClosedLoopResponse) -> ClosedLoopResponse:
        """Nearest achievable (and mask-respecting) response in Frobenius norm."""
        G = (
            self.M1.T @ (target.phi_xx - self.Q) @ self.M2.T
            + self.M1.T @ target.phi_xy
            + target.phi_ux @ self.M2.T
            + target.phi_uy
        )
        chols = self._gram_factors()
        xi_parts = []
        for k in range(self.n_agents):
            g = G[self.row_idx[k], self.col_idx[k]]
            if self.null_bases[k] is not None:
                g = self.null_bases[k].T @ g
            L = chols[k]
            y = sla.solve_triangular(L, g, lower=True, check_finite=False)
            xi_parts.append(sla.solve_triangular(L, y, lower=True, trans=1, check_finite=False))
        return self.response(self.uy_from_xi(np.concatenate(xi_parts)))


class AffineConstraintSystem:
    """The two achievability equations plus optional sparsity restriction."""

    def __init__(self, ops: StackedOperators, pattern: Optional[SparsityPattern] = None):
        self.ops = ops
        self.pattern = pattern
        self._parameterization = None
        T = ops.horizon
        n_x, n_u, n_y = ops.n_x, ops.n_u, ops.n_y
        n_lower = (T + 1) * (T + 2) // 2
        n_strict = T * (T + 1) // 2
        self.free_count = (
            n_lower * (n_x * n_x + n_u * n_x + n_u * n_y) + n_strict * n_x * n_y
        )
        # scalar equations over the block-lower coordinates of both relations
        # (the noise columns of the left relation are vacuous on the diagonal)
        self.equation_count = (
            n_lower * n_x * n_x + n_strict * n_x * n_y  # left relation
            + n_lower * (n_x * n_x + n_u * n_x)  # right relation
        )

    @property
    def parameterization(self) -> UYParameterization:
        if self._parameterization is None:
            self._parameterization = UYParameterization(self.ops, self.pattern)
        return self._parameterization

    def restricted(self, pattern: SparsityPattern) -> "AffineConstraintSystem":
        return AffineConstraintSystem(self.ops, pattern)

    def residuals(self, phi: ClosedLoopResponse):
        ops = self.ops
        n = ops.ZA.shape[0]
        I = np.eye(n)
        left = I - ops.ZA
        R1 = np.hstack(
            [
                left @ phi.phi_xx - ops.ZB @ phi.phi_ux - I,
                left @ phi.phi_xy - ops.ZB @ phi.phi_uy,
            ]
        )
        R2 = np.vstack(
            [
                phi.phi_xx @ left - phi.phi_xy @ ops.C - I,
                phi.phi_ux @ left - phi.phi_uy @ ops.C,
            ]
        )
        return R1, R2

    def project(self, phi: ClosedLoopResponse) -> ClosedLoopResponse:
        return self.parameterization.project(phi)

    def mask_violation(self, phi: ClosedLoopResponse) -> float:
        if self.pattern is None:
            return 0.0
        worst = 0.0
        for comp in COMPONENTS:
            for (t, tau, i, j) in self.pattern.disallowed_minis(comp):
                blk = phi.mini_block(comp, t, tau, i, j)
                if blk.size:
                    worst = max(worst, float(np.abs(blk).max()))
        return worst


def build_achievability(ops: StackedOperators) -> AffineConstraintSystem:
    """Assemble the affine system that all achievable responses satisfy."""
    return AffineConstraintSystem(ops)


def check_achievability(
    phi: ClosedLoopResponse, system: AffineConstraintSystem, tol: float = 1e-6
) -> AchievabilityReport:
    """Deterministic residual metrics for a candidate response."""
    R1, R2 = system.residuals(phi)
    tri = phi.triangularity_violation()
    return AchievabilityReport(
        max_abs=float(max(np.abs(R1).max(), np.abs(R2).max())),
        eq1_max=float(np.abs(R1).max()),
        eq2_max=float(np.abs(R2).max()),
        eq1_fro=float(np.linalg.norm(R1)),
        eq2_fro=float(np.linalg.norm(R2)),
        triangularity=tri,
        tol=tol,
    )
