import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qsalab.features import q_values, random_basis, tabular_basis
from qsalab.mdp import ControlledMDP, random_mdp, six_state_example, value_iteration
from qsalab.meanflow import (MeanFlowModel, baird_objective, beta_zero, fd_jacobian, flow_matrices,
                             gq_hessian, linearize, mean_flow, negativity_certificate,
                             newton_raphson_field, ode_at_infinity, ode_integrate, r_matrices,
                             residual_gradient_field, solve_pbe, zap_field)
from qsalab.policy import PolicySpec, epsilon_gamma, minorization_report
from qsalab.qlearn import frozen_stream


def direct_oracle(mdp, policy, basis, theta):
    """Loop-based pmf, A and b for the Watkins stream, independent of the package's einsums."""
    X, U = mdp.cost.shape
    mask = mdp.mask
    Q = np.where(mask, np.tensordot(theta, basis, axes=1), np.inf)
    from qsalab.policy import policy_table
    phi = policy_table(policy, Q, mask, float(np.linalg.norm(theta)))
    pairs = [(x, u) for x in range(X) for u in range(U) if mask[x, u]]
    n = len(pairs)
    T = np.zeros((n, n))
    for i, (x, u) in enumerate(pairs):
        for j, (y, v) in enumerate(pairs):
            T[i, j] = mdp.transitions[u, x, y] * phi[y, v]
    M = np.vstack([T.T - np.eye(n), np.ones(n)])
    p = np.linalg.lstsq(M, np.r_[np.zeros(n), 1.0], rcond=None)[0]
    greedy = [min((u for u in range(U) if mask[y, u]), key=lambda u: (Q[y, u], u)) for y in range(X)]
    d = basis.shape[0]
    A = np.zeros((d, d))
    b = np.zeros(d)
    for i, (x, u) in enumerate(pairs):
        psi = basis[:, x, u]
        nxt = sum(mdp.transitions[u, x, y] * basis[:, y, greedy[y]] for y in range(X))
        A += p[i] * np.outer(psi, -psi + mdp.discount * nxt)
        b -= p[i] * psi * mdp.cost[x, u]
    return A, b


def random_instance(seed, kind="epsilon_greedy", eps=0.3, d=3):
    r = np.random.default_rng(seed)
    mdp = random_mdp(int(r.integers(3, 6)), int(r.integers(2, 4)), r, discount=float(r.uniform(0.5, 0.95)))
    return MeanFlowModel(mdp, PolicySpec(kind, epsilon=eps, kappa0=5.0), random_basis(mdp, d, r)), r


class TestMeanFlow:
    def test_zero_at_q_star_tabular(self, six_tabular):
        mdp, basis = six_tabular
        model = MeanFlowModel(mdp, PolicySpec("oblivious"), basis)
        q = value_iteration(mdp)[mdp.mask]
        assert np.abs(mean_flow(model, q)).max() <= 1e-12

    def test_origin(self, small_random):
        mdp, basis = small_random
        model = MeanFlowModel(mdp, PolicySpec("epsilon_greedy", epsilon=0.4), basis)
        f0 = mean_flow(model, np.zeros(3))
        _, b = flow_matrices(model, np.zeros(3))
        pi = model.chain(np.zeros(3)).pi
        np.testing.assert_allclose(f0, -b, atol=1e-14)
        np.testing.assert_allclose(f0, np.einsum("xu,dxu,xu->d", pi, basis, mdp.cost * mdp.mask), atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10 ** 6), st.sampled_from(["epsilon_greedy", "gibbs", "tamed_gibbs", "oblivious"]))
    def test_affine_decomposition(self, seed, kind):
        model, r = random_instance(seed, kind)
        theta = r.normal(size=3) * 3
        A, b = flow_matrices(model, theta)
        np.testing.assert_allclose(mean_flow(model, theta), A @ theta - b, atol=1e-10)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10 ** 6), st.sampled_from(["epsilon_greedy", "tamed_gibbs"]))
    def test_matches_direct_summation(self, seed, kind):
        model, r = random_instance(seed, kind)
        theta = r.normal(size=3)
        A, b = flow_matrices(model, theta)
        A_ref, b_ref = direct_oracle(model.mdp, model.policy, model.basis, theta)
        np.testing.assert_allclose(A, A_ref, atol=1e-10)
        np.testing.assert_allclose(b, b_ref, atol=1e-10)

    @pytest.mark.parametrize("kind", ["epsilon_greedy", "tamed_gibbs"])
    def test_monte_carlo_time_average(self, kind):
        mdp = six_state_example(0.8)
        r = np.random.default_rng(4)
        basis = random_basis(mdp, 4, r)
        theta = r.normal(size=4)
        pol = PolicySpec(kind, epsilon=0.3, kappa0=3.0)
        bm = frozen_stream(mdp, pol, basis, theta, 10 ** 7, 100, seed=9)
        mean = bm.mean(axis=0)
        se = bm.std(axis=0, ddof=1) / math.sqrt(bm.shape[0])
        exact = mean_flow(MeanFlowModel(mdp, pol, basis), theta)
        assert np.all(np.abs(mean - exact) <= 4 * se)


class TestTabularMatrices:
    def closed_form(self, mdp, Q):
        """-(I - gamma T(q)) on admissible pairs, greedy lookahead at the next state."""
        pairs = mdp.pairs
        idx = {tuple(p): i for i, p in enumerate(pairs)}
        g = np.argmin(np.where(mdp.mask, Q, np.inf), axis=1)
        T = np.zeros((len(pairs),) * 2)
        for i, (x, u) in enumerate(pairs):
            for y in range(mdp.n_states):
                T[i, idx[(y, g[y])]] += mdp.transitions[u, x, y]
        return -(np.eye(len(pairs)) - mdp.discount * T)

    def test_matrix_gain_gives_closed_form(self, six_tabular):
        mdp, basis = six_tabular
        model = MeanFlowModel(mdp, PolicySpec("oblivious"), basis, matrix_gain=True)
        theta = np.random.default_rng(2).normal(size=basis.shape[0])
        A, _ = flow_matrices(model, theta)
        np.testing.assert_allclose(A, self.closed_form(mdp, q_values(basis, theta, mdp.mask)), atol=1e-12)
        np.testing.assert_allclose(A @ np.ones(A.shape[0]), -(1 - mdp.discount), atol=1e-12)

    def test_linearize_matches_closed_form(self, six_tabular):
        mdp, basis = six_tabular
        model = MeanFlowModel(mdp, PolicySpec("oblivious"), basis, matrix_gain=True)
        theta = value_iteration(mdp)[mdp.mask]
        rep = linearize(model, theta)
        assert not rep.near_switch
        np.testing.assert_allclose(rep.A_star, self.closed_form(mdp, value_iteration(mdp)), atol=1e-8)
        assert rep.hurwitz and rep.margin == pytest.approx(-(1 - mdp.discount), abs=1e-8)

    def test_slow_mode_near_one(self):
        mdp = six_state_example(0.999)
        basis = tabular_basis(mdp)
        model = MeanFlowModel(mdp, PolicySpec("oblivious"), basis, matrix_gain=True)
        ev = linearize(model, value_iteration(mdp)[mdp.mask]).eigenvalues
        assert np.min(np.abs(ev - (-0.001))) <= 1e-6


class TestRMatrices:
    def test_full_exploration_collapse(self, small_random):
        mdp, basis = small_random
        model = MeanFlowModel(mdp, PolicySpec("epsilon_greedy", epsilon=1.0), basis)
        R = r_matrices(model, np.array([1.0, -2.0, 0.5]))
        np.testing.assert_allclose(R.R0, R.R_EXP_theta, atol=1e-12)
        np.testing.assert_allclose(R.R0, R.R_EXP, atol=1e-10)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10 ** 6), st.floats(0.0, 1.0))
    def test_mixture_and_decomposition(self, seed, eps):
        model, r = random_instance(seed, "epsilon_greedy", eps)
        theta = r.normal(size=3) * 2
        R = r_matrices(model, theta)
        assert R.mixture_gap(eps) <= 1e-10
        assert R.decomposition_gap(eps) <= 1e-10
        A, _ = flow_matrices(model, theta)
        g = model.gamma
        np.testing.assert_allclose(A, -(R.R0 - g * R.R_minus1) + eps * g * R.D, atol=1e-10)
        np.testing.assert_allclose(A, -R.R0 + g * R.M_Theta, atol=1e-12)
        for k in ("R0", "R_Theta", "R_EXP_theta", "R_EXP"):
            assert R.psd_min_eig[k] >= -1e-12

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_exploration_minorization(self, seed):
        model, r = random_instance(seed, "tamed_gibbs", 0.4)
        theta = r.normal(size=3) * 4
        R = r_matrices(model, theta)
        rep = minorization_report(model.mdp, model.policy, q_values(model.basis, theta, model.mdp.mask),
                                  float(np.linalg.norm(theta)))
        assert np.linalg.eigvalsh(R.R_EXP_theta - rep.delta_ii * R.R_EXP).min() >= -1e-12

    def test_lag_one_cauchy_schwarz(self, rng):
        for seed in range(10):
            model, r = random_instance(seed, "gibbs", 0.2)
            theta = r.normal(size=3)
            R = r_matrices(model, theta)
            v = rng.normal(size=(200, 3))
            assert np.all(np.einsum("nd,de,ne->n", v, R.R_minus1, v)
                          <= np.einsum("nd,de,ne->n", v, R.R0, v) + 1e-12)


class TestNegativityCertificate:
    def test_no_exploration_bound(self, small_random):
        mdp, basis = small_random
        model = MeanFlowModel(mdp, PolicySpec("oblivious"), basis)
        cert = negativity_certificate(model, 50, np.random.default_rng(0))
        assert cert.beta0 == pytest.approx(1 - mdp.discount)
        assert cert.analytic_bound == pytest.approx(-(1 - mdp.discount) * cert.lambda_min)

    @pytest.mark.parametrize("gamma", [0.5, 0.8, 0.9, 0.99])
    def test_coefficient_positive_below_threshold(self, gamma):
        assert beta_zero(epsilon_gamma(gamma) * (1 - 1e-6), gamma) > 0
        assert beta_zero(0.0, gamma) == pytest.approx(1 - gamma)

    def test_six_state_epsilon_greedy(self):
        mdp = six_state_example(0.8)
        assert epsilon_gamma(0.8) == pytest.approx(0.0588, abs=1e-4)
        model = MeanFlowModel(mdp, PolicySpec("epsilon_greedy", epsilon=0.05), tabular_basis(mdp))
        cert = negativity_certificate(model, 300, np.random.default_rng(1))
        assert not cert.expected_failure
        assert np.all(cert.ratios <= cert.analytic_bound + 1e-9)
        assert cert.holds

    def test_expected_failure_flag(self, six_tabular):
        mdp, basis = six_tabular
        model = MeanFlowModel(mdp, PolicySpec("epsilon_greedy", epsilon=0.1), basis)
        assert negativity_certificate(model, 5, np.random.default_rng(0)).expected_failure


class TestODE:
    def test_linear_decay(self):
        tr = ode_integrate(lambda t: -t, np.array([1.0, -2.0]), 3.0, 0.01)
        np.testing.assert_allclose(tr.final, np.array([1.0, -2.0]) * math.exp(-3.0), atol=1e-9)

    def test_fourth_order(self):
        errs = [abs(ode_integrate(lambda t: -t, np.ones(1), 1.0, h).final[0] - math.exp(-1)) for h in (0.1, 0.05)]
        assert errs[0] / errs[1] == pytest.approx(16.0, rel=0.1)

    def test_divergence_detected(self):
        tr = ode_integrate(lambda t: t, np.ones(2), 100.0, 0.1)
        assert tr.diverged and "exceeded" in tr.message

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            ode_integrate(lambda t: t, np.ones(1), 1.0, 0.0)

    def test_newton_raphson_flow(self):
        mdp = six_state_example(0.8)
        basis = random_basis(mdp, 4, np.random.default_rng(3))
        model = MeanFlowModel(mdp, PolicySpec("tamed_gibbs", epsilon=0.04, kappa0=2.0), basis)
        theta0 = np.full(4, 0.3)
        tr = ode_integrate(newton_raphson_field(model), theta0, 2.0, 0.01, record_every=50)
        f0 = np.linalg.norm(mean_flow(model, theta0))
        for t, th in zip(tr.t, tr.theta):
            assert np.linalg.norm(mean_flow(model, th)) / f0 == pytest.approx(math.exp(-t), abs=1e-4)

    def test_tabular_sup_norm_lyapunov(self, six_tabular):
        mdp, basis = six_tabular
        model = MeanFlowModel(mdp, PolicySpec("oblivious"), basis, matrix_gain=True)
        q_star = value_iteration(mdp)[mdp.mask]
        q0 = q_star + np.random.default_rng(5).normal(size=q_star.size) * 5
        tr = ode_integrate(lambda t: mean_flow(model, t), q0, 10.0, 0.01, record_every=10)
        e0 = np.abs(q0 - q_star).max()
        bound = np.exp(-(1 - mdp.discount) * tr.t) * e0
        assert np.all(np.abs(tr.theta - q_star).max(axis=1) <= bound + 1e-9)

    def test_zap_field_exponential_in_region(self, six_tabular):
        mdp, basis = six_tabular
        model = MeanFlowModel(mdp, PolicySpec("oblivious"), basis)
        q_star = value_iteration(mdp)[mdp.mask]
        theta0 = q_star + 1e-3 * np.random.default_rng(0).normal(size=q_star.size)
        tr = ode_integrate(zap_field(model), theta0, 3.0, 0.01, record_every=100)
        expected = q_star + np.outer(np.exp(-tr.t), theta0 - q_star)
        np.testing.assert_allclose(tr.theta, expected, atol=1e-10)


class TestOdeAtInfinity:
    def test_origin(self, small_random):
        mdp, basis = small_random
        model = MeanFlowModel(mdp, PolicySpec("tamed_gibbs", epsilon=0.2), basis)
        np.testing.assert_array_equal(ode_at_infinity(model, np.zeros(3)), 0.0)

    # Plain Gibbs uses the finite-radius quotient, homogeneous only up to O(1/r).
    @pytest.mark.parametrize("kind,rtol", [("epsilon_greedy", 1e-12), ("tamed_gibbs", 1e-12), ("gibbs", 1e-5)])
    @pytest.mark.parametrize("r", [2.0, 10.0])
    def test_homogeneous(self, small_random, kind, rtol, r):
        mdp, basis = small_random
        model = MeanFlowModel(mdp, PolicySpec(kind, epsilon=0.2), basis)
        theta = np.array([0.4, -1.0, 2.0])
        np.testing.assert_allclose(ode_at_infinity(model, r * theta), r * ode_at_infinity(model, theta),
                                   rtol=rtol, atol=1e-12)

    def test_tamed_gibbs_finite_radius(self, small_random):
        mdp, basis = small_random
        model = MeanFlowModel(mdp, PolicySpec("tamed_gibbs", epsilon=0.2, kappa0=4.0), basis)
        theta = np.array([0.4, -1.0, 2.0])
        r = 1e6
        A, b = flow_matrices(model, r * theta)
        finite = mean_flow(model, r * theta) / r
        shortcut = ode_at_infinity(model, theta)
        # The finite quotient differs from the limit by exactly b / r.
        np.testing.assert_allclose(finite + b / r, shortcut, atol=1e-8)
        assert np.linalg.norm(finite - shortcut) == pytest.approx(np.linalg.norm(b) / r, rel=1e-4)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10 ** 6), st.floats(1.0, 1e3), st.sampled_from(["epsilon_greedy", "tamed_gibbs"]))
    def test_radial_invariance_of_matrices(self, seed, r, kind):
        model, g = random_instance(seed, kind)
        theta = g.normal(size=3)
        theta *= (1 + g.exponential()) / np.linalg.norm(theta)
        A1, b1 = flow_matrices(model, theta)
        A2, b2 = flow_matrices(model, r * theta)
        np.testing.assert_allclose(A1, A2, atol=1e-12)
        np.testing.assert_allclose(b1, b2, atol=1e-12)


class TestLinearize:
    def test_linear_field(self):
        M = np.random.default_rng(0).normal(size=(4, 4))
        np.testing.assert_allclose(fd_jacobian(lambda t: M @ t, np.ones(4)), M, atol=1e-8)

    def test_hurwitz_iff_margin(self, small_random):
        mdp, basis = small_random
        model = MeanFlowModel(mdp, PolicySpec("tamed_gibbs", epsilon=0.2), basis)
        rep = linearize(model, np.array([0.1, 0.2, 0.3]))
        assert rep.hurwitz == (rep.margin < 0)
        assert rep.margin == pytest.approx(np.max(rep.eigenvalues.real))

    def test_switch_warning(self):
        mdp = six_state_example(0.8)
        basis = tabular_basis(mdp)
        model = MeanFlowModel(mdp, PolicySpec("epsilon_greedy", epsilon=0.05), basis)
        with pytest.warns(RuntimeWarning, match="switching"):
            rep = linearize(model, np.zeros(basis.shape[0]))
        assert rep.near_switch


class TestPBE:
    def test_tabular_equals_value_iteration(self, six_tabular):
        mdp, basis = six_tabular
        model = MeanFlowModel(mdp, PolicySpec("oblivious"), basis)
        res = solve_pbe(model, tol=1e-12)
        assert res.converged
        np.testing.assert_allclose(res.theta, value_iteration(mdp)[mdp.mask], atol=1e-8)

    def test_rejects_bad_tol(self, six_tabular):
        with pytest.raises(ValueError):
            solve_pbe(MeanFlowModel(six_tabular[0], PolicySpec(), six_tabular[1]), tol=0.0)

    def test_tamed_gibbs_reduced_basis_from_random_starts(self):
        mdp = six_state_example(0.8)
        r = np.random.default_rng(8)
        basis = random_basis(mdp, 4, r)
        pol = PolicySpec("tamed_gibbs", epsilon=0.8 * epsilon_gamma(0.8), kappa0=10.0)
        model = MeanFlowModel(mdp, pol, basis)
        tol = 1e-9
        roots = []
        for _ in range(10):
            res = solve_pbe(model, r.normal(size=4) * 10, tol=tol)
            assert res.converged and res.residual <= 1e-8
            assert np.all(np.isfinite(res.theta))
            fresh = MeanFlowModel(mdp, pol, basis)
            assert np.linalg.norm(mean_flow(fresh, res.theta)) <= 2 * tol
            M = np.diag([1.0, 2.0, 0.5, 1.5])
            fields = residual_gradient_field(fresh, res.theta, M)
            assert fields.gq_objective <= 0.5 * np.linalg.norm(M, 2) * tol ** 2
            assert np.abs(fields.gq_field).max() <= 1e-7
            roots.append(res.theta)
        assert np.ptp(np.array(roots), axis=0).max() < 1e-6

    def test_finite_kappa_trend(self):
        mdp = six_state_example(0.8)
        basis = random_basis(mdp, 4, np.random.default_rng(8))
        eps = 0.8 * epsilon_gamma(0.8)
        greedy_model = MeanFlowModel(mdp, PolicySpec("epsilon_greedy", epsilon=eps), basis)
        resid = []
        for k in (1e2, 1e3, 1e4):
            res = solve_pbe(MeanFlowModel(mdp, PolicySpec("tamed_gibbs", epsilon=eps, kappa0=k), basis))
            resid.append(np.linalg.norm(mean_flow(greedy_model, res.theta)))
        assert resid[0] >= resid[1] >= resid[2]


class TestResidualFields:
    def test_baird_gradient_finite_difference(self):
        for seed in range(5):
            model, r = random_instance(seed, "tamed_gibbs", 0.3)
            theta = r.normal(size=3)
            w = model.chain(theta).pi
            g = residual_gradient_field(model, theta).baird_gradient
            fd = np.array([(baird_objective(model, theta + h, w) - baird_objective(model, theta - h, w)) / 2e-6
                           for h in np.eye(3) * 1e-6])
            assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(fd)

    def test_baird_gradient_relative_variant(self):
        mdp = random_mdp(4, 2, np.random.default_rng(1))
        basis = random_basis(mdp, 3, np.random.default_rng(2))
        model = MeanFlowModel(mdp, PolicySpec("epsilon_greedy", epsilon=0.3), basis, variant="relative")
        theta = np.array([0.3, -0.2, 0.7])
        w = model.chain(theta).pi
        g = residual_gradient_field(model, theta).baird_gradient
        fd = np.array([(baird_objective(model, theta + h, w) - baird_objective(model, theta - h, w)) / 2e-6
                       for h in np.eye(3) * 1e-6])
        assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(fd)

    def test_gq_hessian_slow_mode(self):
        ratios = []
        r = np.random.default_rng(0)
        for _ in range(5):
            base = random_mdp(5, 3, r)
            lam = []
            for gamma in (0.9, 0.99):
                mdp = ControlledMDP(base.transitions, base.cost, gamma)
                model = MeanFlowModel(mdp, PolicySpec("oblivious"), tabular_basis(mdp))
                lam.append(np.linalg.eigvalsh(gq_hessian(model, value_iteration(mdp)[mdp.mask]))[0])
            ratios.append(lam[0] / lam[1])
        assert np.all(np.abs(np.array(ratios) / 100 - 1) <= 0.2)


def test_rank_floor_over_sampled_theta():
    mdp = six_state_example(0.8)
    basis = random_basis(mdp, 4, np.random.default_rng(0))
    model = MeanFlowModel(mdp, PolicySpec("tamed_gibbs", epsilon=0.04, kappa0=10.0), basis)
    r = np.random.default_rng(1)
    floor = min(r_matrices(model, r.normal(size=4) * s).psd_min_eig["R0"] for s in np.logspace(-2, 3, 40))
    assert floor > 0
