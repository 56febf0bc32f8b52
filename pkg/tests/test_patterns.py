import numpy as np
import pytest

from mincomm.model import DelaySpec, Problem
from mincomm.patterns import (
    COMPONENTS,
    SparsityPattern,
    build_sparsity,
    canonical_pattern,
    pattern_product,
)

from test_model import two_agent_problem


PRODUCT_CASES = [
    ("diag", "diag", "diag"),
    ("diag", "lower", "lower"),
    ("diag", "upper", "upper"),
    ("lower", "diag", "lower"),
    ("lower", "lower", "zero"),
    ("lower", "upper", "diag"),
    ("upper", "diag", "upper"),
    ("upper", "lower", "diag"),
    ("upper", "upper", "zero"),
]


class TestPatternProduct:
    @pytest.mark.parametrize("p,q,expected", PRODUCT_CASES)
    def test_symbolic_table(self, p, q, expected):
        assert pattern_product(p, q) == expected

    def test_rejects_unknown_labels(self):
        with pytest.raises(ValueError):
            pattern_product("diag", "zero")

    @pytest.mark.parametrize("p,q,expected", PRODUCT_CASES)
    def test_numeric_soundness(self, p, q, expected):
        """Random matrices drawn from p and q multiply into the table's class."""
        rng = np.random.default_rng(hash((p, q)) % 2**32)
        T = 3
        dims = (2, 3)  # mini-block sizes of the two agents

        def sample(kind):
            n = sum(dims)
            M = np.zeros(((T + 1) * n, (T + 1) * n))
            for t in range(T + 1):
                for tau in range(t + 1):
                    block = np.zeros((n, n))
                    if kind == "diag":
                        block[:2, :2] = rng.standard_normal((2, 2))
                        block[2:, 2:] = rng.standard_normal((3, 3))
                    elif kind == "upper":
                        block[:2, 2:] = rng.standard_normal((2, 3))
                    else:
                        block[2:, :2] = rng.standard_normal((3, 2))
                    M[t * n : (t + 1) * n, tau * n : (tau + 1) * n] = block
            return M

        def support_class(M, tol=1e-12):
            n = sum(dims)
            d = u = l = False
            for t in range(T + 1):
                for tau in range(T + 1):
                    B = M[t * n : (t + 1) * n, tau * n : (tau + 1) * n]
                    d |= np.abs(B[:2, :2]).max() > tol or np.abs(B[2:, 2:]).max() > tol
                    u |= np.abs(B[:2, 2:]).max() > tol
                    l |= np.abs(B[2:, :2]).max() > tol
            return d, u, l

        for _ in range(5):
            P = sample(p) @ sample(q)
            d, u, l = support_class(P)
            if expected == "zero":
                assert np.abs(P).max() < 1e-12
            elif expected == "diag":
                assert not u and not l
            elif expected == "upper":
                assert not d and not l
            elif expected == "lower":
                assert not d and not u


class TestCanonicalPatterns:
    def test_masks_respect_triangularity(self):
        for kind in ("diag", "upper", "lower"):
            pat = canonical_pattern(kind, horizon=3)
            for comp in COMPONENTS:
                m = pat.allowed[comp]
                for t in range(4):
                    assert not m[t, t + 1 :].any()
                if comp == "xy":
                    assert not any(m[t, t].any() for t in range(4))

    def test_addition_is_or(self):
        a = canonical_pattern("diag", 3)
        b = canonical_pattern("lower", 3)
        both = a + b
        for comp in COMPONENTS:
            assert (both.allowed[comp] == (a.allowed[comp] | b.allowed[comp])).all()


class TestBuildSparsity:
    def test_decentral_keeps_only_diagonal_minis(self):
        prob = two_agent_problem(T=3, coupled=True)
        pat = build_sparsity(prob, "decentral")
        ref = canonical_pattern("diag", 3)
        for comp in COMPONENTS:
            assert (pat.allowed[comp] == ref.allowed[comp]).all()

    def test_ours_lower_is_diag_plus_lower_on_xx(self):
        prob = two_agent_problem(T=3, coupled=True)
        pat = build_sparsity(prob, "ours", "lower")
        ref = canonical_pattern("diag", 3) + canonical_pattern("lower", 3)
        assert (pat.allowed["xx"] == ref.allowed["xx"]).all()
        # the other components keep full block lower triangular support
        base = build_sparsity(prob, "baseline")
        for comp in ("xy", "ux", "uy"):
            assert (pat.allowed[comp] == base.allowed[comp]).all()

    def test_delay_two_masks_short_lags(self):
        prob = two_agent_problem(T=3, coupled=True)
        prob = Problem(
            horizon=prob.horizon, agents=prob.agents, topology=prob.topology,
            delays=DelaySpec.uniform(2, 2), state_sets=prob.state_sets,
            input_sets=prob.input_sets, disturbance_sets=prob.disturbance_sets,
            noise_sets=prob.noise_sets,
        )
        pat = build_sparsity(prob, "ours", "lower")
        for t in range(4):
            for tau in range(t + 1):
                cross = pat.allowed["uy"][t, tau, 0, 1]
                assert cross == (t - tau > 1)
        # intra-agent minis are untouched by delays
        assert pat.allowed["uy"][2, 2, 0, 0] and pat.allowed["uy"][2, 2, 1, 1]

    def test_unknown_mode_rejected(self):
        prob = two_agent_problem(T=3)
        with pytest.raises(ValueError):
            build_sparsity(prob, "other")
