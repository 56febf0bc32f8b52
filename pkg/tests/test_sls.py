import numpy as np
import pytest

from mincomm.model import assemble_stacked_operators
from mincomm.patterns import build_sparsity, canonical_pattern
from mincomm.sls import (
    AffineConstraintSystem,
    ClosedLoopResponse,
    GainMatrix,
    InvalidResponseError,
    UYParameterization,
    build_achievability,
    check_achievability,
    closed_loop_of_gain,
    delay_violation,
    neumann_inverse,
    recover_gain,
)

from test_model import scalar_problem, two_agent_problem


def random_gain(ops, rng, scale=0.3):
    """A random block-lower-triangular gain."""
    T = ops.horizon
    K = np.zeros((ops.u_map.total_dim, ops.y_map.total_dim))
    for t in range(T + 1):
        for tau in range(t + 1):
            K[ops.u_map.block_slice(t), ops.y_map.block_slice(tau)] = scale * rng.standard_normal(
                (ops.n_u, ops.n_y)
            )
    return GainMatrix(ops, K)


@pytest.fixture(scope="module")
def coupled_ops():
    return assemble_stacked_operators(two_agent_problem(T=4, seed=11, coupled=True))


class TestClosedLoopOfGain:
    def test_zero_gain(self, coupled_ops):
        ops = coupled_ops
        phi = closed_loop_of_gain(GainMatrix(ops, np.zeros((ops.ZB.shape[1], ops.C.shape[0]))), ops)
        n = ops.ZA.shape[0]
        np.testing.assert_allclose(phi.phi_xx, np.linalg.inv(np.eye(n) - ops.ZA), atol=1e-10)
        assert not phi.phi_uy.any() and not phi.phi_ux.any() and not phi.phi_xy.any()

    def test_blind_measurements_reduce_to_gain(self, coupled_ops):
        ops = coupled_ops
        from dataclasses import replace

        blind = replace(ops, C=np.zeros_like(ops.C))
        rng = np.random.default_rng(0)
        K = random_gain(blind, rng)
        phi = closed_loop_of_gain(K, blind)
        n = ops.ZA.shape[0]
        np.testing.assert_allclose(phi.phi_xx, np.linalg.inv(np.eye(n) - ops.ZA), atol=1e-10)
        np.testing.assert_allclose(phi.phi_uy, K.matrix, atol=1e-12)
        assert np.abs(phi.phi_ux).max() < 1e-12

    def test_constructed_response_satisfies_equations(self, coupled_ops):
        rng = np.random.default_rng(1)
        system = build_achievability(coupled_ops)
        for _ in range(5):
            phi = closed_loop_of_gain(random_gain(coupled_ops, rng), coupled_ops)
            report = check_achievability(phi, system, tol=1e-10)
            assert report.passed, report

    def test_rollout_matches_response_maps(self, coupled_ops):
        ops = coupled_ops
        rng = np.random.default_rng(2)
        K = random_gain(ops, rng)
        phi = closed_loop_of_gain(K, ops)
        T, n_x, n_u, n_y = ops.horizon, ops.n_x, ops.n_u, ops.n_y
        w = rng.standard_normal((T + 1) * n_x)
        v = rng.standard_normal((T + 1) * n_y)

        # step recursion with u_t = sum_tau K[t,tau] y_tau
        x = np.zeros((T + 1, n_x))
        y = np.zeros((T + 1, n_y))
        u = np.zeros((T + 1, n_u))
        x[0] = w[:n_x]
        for t in range(T + 1):
            Ct = ops.C[t * n_y : (t + 1) * n_y, t * n_x : (t + 1) * n_x]
            y[t] = Ct @ x[t] + v[t * n_y : (t + 1) * n_y]
            acc = np.zeros(n_u)
            for tau in range(t + 1):
                acc += K.block(t, tau) @ y[tau]
            u[t] = acc
            if t < T:
                At = ops.A[t * n_x : (t + 1) * n_x, t * n_x : (t + 1) * n_x]
                Bt = ops.B[t * n_x : (t + 1) * n_x, t * n_u : (t + 1) * n_u]
                x[t + 1] = At @ x[t] + Bt @ u[t] + w[(t + 1) * n_x : (t + 2) * n_x]

        x_map = phi.phi_xx @ w + phi.phi_xy @ v
        u_map = phi.phi_ux @ w + phi.phi_uy @ v
        np.testing.assert_allclose(x_map, x.ravel(), atol=1e-9)
        np.testing.assert_allclose(u_map, u.ravel(), atol=1e-9)


class TestRecoverGain:
    def test_roundtrip_identity(self, coupled_ops):
        rng = np.random.default_rng(3)
        for _ in range(5):
            K = random_gain(coupled_ops, rng)
            phi = closed_loop_of_gain(K, coupled_ops)
            K_back = recover_gain(phi)
            err = np.abs(K_back.matrix - K.matrix).max() / max(1.0, np.abs(K.matrix).max())
            assert err < 1e-8

    def test_neumann_matches_dense_inverse(self, coupled_ops):
        rng = np.random.default_rng(4)
        phi = closed_loop_of_gain(random_gain(coupled_ops, rng), coupled_ops)
        inv_n = neumann_inverse(phi.phi_xx, coupled_ops)
        inv_d = np.linalg.inv(phi.phi_xx)
        assert np.abs(inv_n - inv_d).max() < 1e-10

    def test_vanishing_product_term(self, coupled_ops):
        ops = coupled_ops
        rng = np.random.default_rng(5)
        K = random_gain(ops, rng)
        phi = closed_loop_of_gain(K, ops)
        zeroed = ClosedLoopResponse(ops, phi.phi_xx, phi.phi_xy, np.zeros_like(phi.phi_ux), phi.phi_uy)
        np.testing.assert_allclose(recover_gain(zeroed).matrix, phi.phi_uy, atol=1e-12)

    def test_bad_diagonal_is_rejected(self, coupled_ops):
        ops = coupled_ops
        n = ops.ZA.shape[0]
        phi = ClosedLoopResponse(
            ops,
            1.5 * np.eye(n),
            np.zeros((n, ops.C.shape[0])),
            np.zeros((ops.ZB.shape[1], n)),
            np.zeros((ops.ZB.shape[1], ops.C.shape[0])),
        )
        with pytest.raises(InvalidResponseError):
            recover_gain(phi)


class TestAchievability:
    def test_zero_dynamics_unique_solution(self):
        prob = scalar_problem(T=2, a=0.0, b=0.0)
        # zero out measurements too
        ops = assemble_stacked_operators(prob)
        from dataclasses import replace

        ops = replace(ops, C=np.zeros_like(ops.C), ZB=np.zeros_like(ops.ZB), B=np.zeros_like(ops.B))
        system = build_achievability(ops)
        n = ops.ZA.shape[0]
        phi = ClosedLoopResponse(
            ops, np.eye(n), np.zeros((n, n)), np.zeros((n, n)), np.zeros((n, n))
        )
        assert check_achievability(phi, system, tol=1e-12).passed

    def test_perturbation_breaks_residual(self, coupled_ops):
        rng = np.random.default_rng(6)
        system = build_achievability(coupled_ops)
        phi = closed_loop_of_gain(random_gain(coupled_ops, rng), coupled_ops)
        bumped = phi.phi_xx.copy()
        bumped[3, 1] += 1.0
        bad = ClosedLoopResponse(coupled_ops, bumped, phi.phi_xy, phi.phi_ux, phi.phi_uy)
        assert check_achievability(bad, system).max_abs > 1e-3

    def test_zero_response_fails_on_identity(self, coupled_ops):
        ops = coupled_ops
        n = ops.ZA.shape[0]
        phi = ClosedLoopResponse(
            ops,
            np.zeros((n, n)),
            np.zeros((n, ops.C.shape[0])),
            np.zeros((ops.ZB.shape[1], n)),
            np.zeros((ops.ZB.shape[1], ops.C.shape[0])),
        )
        report = check_achievability(phi, build_achievability(ops))
        assert abs(report.max_abs - 1.0) < 1e-12

    def test_counts_reported(self, coupled_ops):
        system = build_achievability(coupled_ops)
        assert system.free_count > 0 and system.equation_count > 0


class TestParameterization:
    def test_every_uy_gives_achievable_response(self, coupled_ops):
        rng = np.random.default_rng(7)
        par = UYParameterization(coupled_ops)
        system = build_achievability(coupled_ops)
        xi = rng.standard_normal(par.dim)
        phi = par.response(par.uy_from_xi(xi))
        assert check_achievability(phi, system, tol=1e-9).passed

    def test_projection_recovers_members(self, coupled_ops):
        rng = np.random.default_rng(8)
        system = build_achievability(coupled_ops)
        phi = closed_loop_of_gain(random_gain(coupled_ops, rng), coupled_ops)
        proj = system.project(phi)
        assert np.abs(proj.phi_uy - phi.phi_uy).max() < 1e-8
        assert np.abs(proj.phi_xx - phi.phi_xx).max() < 1e-8

    def test_projection_is_idempotent_and_achievable(self, coupled_ops):
        rng = np.random.default_rng(9)
        ops = coupled_ops
        noise = ClosedLoopResponse(
            ops,
            rng.standard_normal(ops.ZA.shape),
            rng.standard_normal((ops.ZA.shape[0], ops.C.shape[0])),
            rng.standard_normal((ops.ZB.shape[1], ops.ZA.shape[0])),
            rng.standard_normal((ops.ZB.shape[1], ops.C.shape[0])),
        )
        system = build_achievability(ops)
        proj = system.project(noise)
        assert check_achievability(proj, system, tol=1e-8).passed
        again = system.project(proj)
        assert np.abs(again.phi_uy - proj.phi_uy).max() < 1e-8

    def test_pattern_restriction_zeroes_masked_coordinates(self):
        prob = two_agent_problem(T=4, seed=13, coupled=True)
        ops = assemble_stacked_operators(prob)
        pattern = build_sparsity(prob, "decentral")
        par = UYParameterization(ops, pattern)
        rng = np.random.default_rng(10)
        phi = par.response(par.uy_from_xi(rng.standard_normal(par.dim)))
        system = AffineConstraintSystem(ops, pattern)
        assert system.mask_violation(phi) < 1e-9
        assert check_achievability(phi, build_achievability(ops), tol=1e-9).passed

    def test_gain_of_masked_response_is_decentralized(self):
        prob = two_agent_problem(T=4, seed=14, coupled=True)
        ops = assemble_stacked_operators(prob)
        pattern = build_sparsity(prob, "decentral")
        par = UYParameterization(ops, pattern)
        rng = np.random.default_rng(11)
        phi = par.response(0.3 * par.uy_from_xi(rng.standard_normal(par.dim)))
        K = recover_gain(phi)
        assert np.abs(K.pair_block(1, 2)).max() < 1e-8
        assert np.abs(K.pair_block(2, 1)).max() < 1e-8


class TestDelayMask:
    def test_delay_mask_transfers_to_gain(self):
        prob = two_agent_problem(T=5, seed=15, coupled=True)
        from dataclasses import replace
        from mincomm.model import DelaySpec, Problem

        prob = Problem(
            horizon=prob.horizon, agents=prob.agents, topology=prob.topology,
            delays=DelaySpec.uniform(2, 2), state_sets=prob.state_sets,
            input_sets=prob.input_sets, disturbance_sets=prob.disturbance_sets,
            noise_sets=prob.noise_sets,
        )
        ops = assemble_stacked_operators(prob)
        pattern = build_sparsity(prob, "ours", "lower")
        par = UYParameterization(ops, pattern)
        rng = np.random.default_rng(12)
        phi = par.response(0.3 * par.uy_from_xi(rng.standard_normal(par.dim)))
        K = recover_gain(phi)
        assert delay_violation(K, prob.delays) < 1e-8

    def test_mini_block_views_are_exact_reindexings(self, coupled_ops):
        rng = np.random.default_rng(13)
        K = random_gain(coupled_ops, rng)
        pair = K.pair_block(2, 1)
        rows = coupled_ops.u_map.agent_indices(2)
        cols = coupled_ops.y_map.agent_indices(1)
        for _ in range(20):
            a = rng.integers(0, rows.size)
            b = rng.integers(0, cols.size)
            assert pair[a, b] == K.matrix[rows[a], cols[b]]
