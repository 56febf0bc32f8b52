import itertools

import numpy as np
import pytest

from mincomm.model import (
    AgentSpec,
    Box,
    DelaySpec,
    MeasurementTopology,
    Polytope,
    Problem,
    assemble_stacked_operators,
)
from mincomm.robust import (
    LinearInequalitySystem,
    build_robust_inequalities,
    montecarlo_margin,
    sample_box_or_polytope,
    verify_robust_exact,
)
from mincomm.sls import ClosedLoopResponse, closed_loop_of_gain

from test_model import two_agent_problem
from test_sls import random_gain


def vertex_oracle_margins(system, phi):
    """Brute force: maximize each row over all vertices of the box channels."""
    cw, dw = system.w_box
    cv, dv = system.v_box
    G_w, G_v = system.images(phi)
    free_w = np.flatnonzero(dw)
    free_v = np.flatnonzero(dv)
    assert 2 ** (free_w.size + free_v.size) <= 2**20
    worst = np.full(system.n_rows, -np.inf)
    for signs_w in itertools.product((-1.0, 1.0), repeat=free_w.size):
        w = cw.copy()
        w[free_w] += np.asarray(signs_w) * dw[free_w]
        base = G_w @ w
        for signs_v in itertools.product((-1.0, 1.0), repeat=free_v.size):
            v = cv.copy()
            v[free_v] += np.asarray(signs_v) * dv[free_v]
            worst = np.maximum(worst, base + G_v @ v)
    return system.bounds - worst


def tiny_problem(T=2, n_sets=None, w_width=1.0, v_width=0.5, x_bound=None, seed=0):
    """Small single-agent instance with a scalar state for oracle checks."""
    rng = np.random.default_rng(seed)
    agent = AgentSpec(
        1, 1, 1, 1,
        A_blocks=[rng.standard_normal((1, 1)) for _ in range(T)],
        B_blocks=[rng.standard_normal((1, 1)) for _ in range(T)],
    )
    topo = MeasurementTopology({1: (1,)}, {(1, 1): [np.eye(1)] * (T + 1)})
    state_sets = [Box([0.0], [w_width])]
    for t in range(1, T + 1):
        if x_bound is None:
            state_sets.append(Polytope.unconstrained(1))
        else:
            state_sets.append(Polytope([[1.0], [-1.0]], [x_bound, x_bound]))
    return Problem(
        horizon=T,
        agents=(agent,),
        topology=topo,
        delays=DelaySpec.uniform(1),
        state_sets=tuple(state_sets),
        input_sets=tuple(Polytope.unconstrained(1) for _ in range(T + 1)),
        disturbance_sets=tuple(Box([0.0], [w_width]) for _ in range(T)),
        noise_sets=tuple(Box([0.0], [v_width]) for _ in range(T + 1)),
    )


class TestClosedFormTightening:
    def test_scalar_identity_map_gives_unit_gain_bound(self):
        """x = phi * w with w in [-1, 1] and x <= 1 robust iff |phi| <= 1."""
        prob = tiny_problem(T=1, w_width=1.0, v_width=0.0, x_bound=1.0)
        ops = assemble_stacked_operators(prob)
        system = build_robust_inequalities(prob, ops)
        n = ops.ZA.shape[0]
        for scale in (0.5, 0.999, 1.001, 1.8):
            # hand-built response: x_1 responds to w_1 with weight `scale`
            phi_xx = np.eye(n)
            phi_xx[1, 1] = scale
            phi_xx[1, 0] = 0.0
            phi = ClosedLoopResponse(
                ops, phi_xx, np.zeros((n, n)), np.zeros((n, n)), np.zeros((n, n))
            )
            margins = system.margins(phi)
            rows_t1 = [k for k, r in enumerate(system.rows) if r.kind == "state"]
            worst = min(margins[k] for k in rows_t1)
            assert (worst >= 0) == (abs(scale) <= 1.0)

    def test_paper_default_box_tightening_is_weighted_l1(self):
        """A 0.05 box tightens a state row by 0.05 times the row's L1 norm."""
        prob = two_agent_problem(T=3, seed=2, coupled=True)
        sets = list(prob.state_sets)
        n_x = prob.n_x
        h = np.zeros(n_x)
        h[0] = 1.0
        sets[2] = Polytope(h[None, :], [4.0])
        prob = Problem(
            horizon=prob.horizon, agents=prob.agents, topology=prob.topology,
            delays=prob.delays,
            state_sets=tuple(sets),
            input_sets=prob.input_sets,
            disturbance_sets=tuple(Box(np.zeros(n_x), 0.05 * np.ones(n_x)) for _ in range(3)),
            noise_sets=tuple(Box(np.zeros(prob.n_y), np.zeros(prob.n_y)) for _ in range(4)),
        )
        sets0 = list(prob.state_sets)
        sets0[0] = Box(np.zeros(n_x), 0.05 * np.ones(n_x))
        prob = Problem(
            horizon=prob.horizon, agents=prob.agents, topology=prob.topology,
            delays=prob.delays, state_sets=tuple(sets0), input_sets=prob.input_sets,
            disturbance_sets=prob.disturbance_sets, noise_sets=prob.noise_sets,
        )
        ops = assemble_stacked_operators(prob)
        system = build_robust_inequalities(prob, ops)
        rng = np.random.default_rng(3)
        phi = closed_loop_of_gain(random_gain(ops, rng), ops)
        (row_idx,) = [k for k, r in enumerate(system.rows) if r.kind == "state"]
        margins = system.margins(phi)
        h_full = system.H_state[0]
        expected = 4.0 - 0.05 * np.abs(phi.phi_xx.T @ h_full).sum()
        assert abs(margins[row_idx] - expected) < 1e-12

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_vertex_enumeration(self, seed):
        prob = tiny_problem(T=2, w_width=0.7, v_width=0.3, x_bound=2.0, seed=seed)
        ops = assemble_stacked_operators(prob)
        system = build_robust_inequalities(prob, ops)
        rng = np.random.default_rng(100 + seed)
        phi = closed_loop_of_gain(random_gain(ops, rng), ops)
        exact = system.margins(phi)
        oracle = vertex_oracle_margins(system, phi)
        np.testing.assert_allclose(exact, oracle, atol=1e-10)

    def test_zero_width_reduces_to_nominal_at_centers(self):
        prob = tiny_problem(T=2, w_width=0.0, v_width=0.0, x_bound=1.0)
        ops = assemble_stacked_operators(prob)
        system = build_robust_inequalities(prob, ops)
        rng = np.random.default_rng(4)
        phi = closed_loop_of_gain(random_gain(ops, rng), ops)
        margins = system.margins(phi)
        cw, _ = system.w_box
        cv, _ = system.v_box
        G_w, G_v = system.images(phi)
        np.testing.assert_allclose(margins, system.bounds - G_w @ cw - G_v @ cv, atol=1e-12)

    def test_margin_monotone_in_disturbance_width(self):
        base = tiny_problem(T=2, w_width=0.2, v_width=0.2, x_bound=2.0, seed=5)
        wider = tiny_problem(T=2, w_width=0.4, v_width=0.2, x_bound=2.0, seed=5)
        ops = assemble_stacked_operators(base)
        rng = np.random.default_rng(6)
        phi = closed_loop_of_gain(random_gain(ops, rng), ops)
        m_base = build_robust_inequalities(base, ops).margins(phi)
        m_wide = build_robust_inequalities(wider, ops).margins(phi)
        assert np.all(m_wide <= m_base + 1e-12)


class TestExactVerification:
    def test_scaling_breaks_a_binding_instance(self):
        prob = tiny_problem(T=2, w_width=0.7, v_width=0.3, x_bound=3.0, seed=7)
        ops = assemble_stacked_operators(prob)
        rng = np.random.default_rng(8)
        K = random_gain(ops, rng, scale=0.2)
        phi = closed_loop_of_gain(K, ops)
        report = verify_robust_exact(phi, prob, ops=ops)
        blown = ClosedLoopResponse(
            ops, 10 * phi.phi_xx, 10 * phi.phi_xy, 10 * phi.phi_ux, 10 * phi.phi_uy
        )
        report10 = verify_robust_exact(blown, prob, ops=ops)
        assert report10.min_margin < report.min_margin
        assert report10.min_margin < 0

    def test_hrep_channel_agrees_with_box_encoding(self):
        """The same interval expressed as an H-rep polytope gives equal margins."""
        prob_box = tiny_problem(T=2, w_width=0.5, v_width=0.25, x_bound=2.0, seed=9)
        w_poly = Polytope([[1.0], [-1.0]], [0.5, 0.5])
        prob_poly = Problem(
            horizon=prob_box.horizon, agents=prob_box.agents, topology=prob_box.topology,
            delays=prob_box.delays, state_sets=prob_box.state_sets,
            input_sets=prob_box.input_sets,
            disturbance_sets=(w_poly,) * 2,
            noise_sets=prob_box.noise_sets,
        )
        ops = assemble_stacked_operators(prob_box)
        rng = np.random.default_rng(10)
        phi = closed_loop_of_gain(random_gain(ops, rng), ops)
        m_box = build_robust_inequalities(prob_box, ops).margins(phi)
        m_poly = build_robust_inequalities(prob_poly, ops).margins(phi)
        np.testing.assert_allclose(m_box, m_poly, atol=1e-9)

    def test_dual_certificates_reproduce_sensitivities(self):
        prob = tiny_problem(T=1, w_width=0.5, v_width=0.25, x_bound=2.0, seed=11)
        ops = assemble_stacked_operators(prob)
        system = build_robust_inequalities(prob, ops)
        rng = np.random.default_rng(12)
        phi = closed_loop_of_gain(random_gain(ops, rng), ops)
        G_wv, g_wv = system.materialize_dual()
        G_w, G_v = system.images(phi)
        sens = np.hstack([G_w, G_v])
        margins = system.margins(phi)
        for r, lam in enumerate(system.dual_certificates(phi)):
            assert np.all(lam >= -1e-9)
            np.testing.assert_allclose(lam @ G_wv, sens[r], atol=1e-8)
            assert abs((system.bounds[r] - lam @ g_wv) - margins[r]) < 1e-7


class TestLambdaMaterialization:
    def test_lambda_system_matches_margins(self):
        """Plugging the canonical auxiliaries into (G, g) reproduces feasibility."""
        prob = tiny_problem(T=2, w_width=0.7, v_width=0.3, x_bound=2.0, seed=13)
        ops = assemble_stacked_operators(prob)
        system = build_robust_inequalities(prob, ops)
        G, g, layout, provenance = system.materialize_lambda()
        pos = {key: idx for idx, key in enumerate(layout)}
        cw, dw = system.w_box
        cv, dv = system.v_box

        rng = np.random.default_rng(14)
        for trial in range(4):
            phi = closed_loop_of_gain(random_gain(ops, rng, scale=0.4 * (trial + 1)), ops)
            z = np.zeros(G.shape[1])
            for (comp, r, c), idx in pos.items():
                z[idx] = phi.component(comp)[r, c]
            # canonical auxiliaries: absolute scaled sensitivities
            G_w, G_v = system.images(phi)
            n_phi = len(layout)
            lam_idx = n_phi
            for r_idx in range(system.n_rows):
                for j in np.flatnonzero(dw):
                    z[lam_idx] = abs(G_w[r_idx, j]) * dw[j]
                    lam_idx += 1
                for j in np.flatnonzero(dv):
                    z[lam_idx] = abs(G_v[r_idx, j]) * dv[j]
                    lam_idx += 1
            satisfied = bool(np.all(G @ z <= g + 1e-9))
            margins = system.margins(phi)
            assert satisfied == bool(margins.min() >= -1e-9)

    def test_row_provenance_is_complete(self):
        prob = tiny_problem(T=1, x_bound=1.0)
        ops = assemble_stacked_operators(prob)
        system = build_robust_inequalities(prob, ops)
        _, _, _, provenance = system.materialize_lambda()
        assert all("|" in p for p in provenance)
        assert any("budget" in p for p in provenance)


class TestMonteCarlo:
    def test_sampled_never_beats_exact(self):
        prob = tiny_problem(T=2, w_width=0.7, v_width=0.3, x_bound=2.0, seed=15)
        ops = assemble_stacked_operators(prob)
        rng = np.random.default_rng(16)
        phi = closed_loop_of_gain(random_gain(ops, rng), ops)
        exact = verify_robust_exact(phi, prob, ops=ops)
        sampled = montecarlo_margin(phi, prob, 500, seed=0)
        assert np.all(sampled.margins >= exact.margins - 1e-12)

    def test_deterministic_given_seed(self):
        prob = tiny_problem(T=2, w_width=0.7, v_width=0.3, x_bound=2.0, seed=17)
        ops = assemble_stacked_operators(prob)
        rng = np.random.default_rng(18)
        phi = closed_loop_of_gain(random_gain(ops, rng), ops)
        a = montecarlo_margin(phi, prob, 200, seed=42)
        b = montecarlo_margin(phi, prob, 200, seed=42)
        np.testing.assert_array_equal(a.margins, b.margins)

    def test_feasible_response_sees_no_violations(self):
        prob = tiny_problem(T=2, w_width=0.1, v_width=0.1, x_bound=5.0, seed=19)
        ops = assemble_stacked_operators(prob)
        rng = np.random.default_rng(20)
        phi = closed_loop_of_gain(random_gain(ops, rng, scale=0.1), ops)
        assert verify_robust_exact(phi, prob, ops=ops).passed
        sampled = montecarlo_margin(phi, prob, 1000, seed=1)
        assert sampled.passed and not sampled.violations

    def test_polytope_rejection_sampling(self):
        poly = Polytope([[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]], [1.0, 0.0, 0.0])
        rng = np.random.default_rng(21)
        for _ in range(50):
            z = sample_box_or_polytope(poly, rng)
            assert poly.contains(z)
