import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qsalab.mdp import (ControlledMDP, ValueIterationError, bellman_error, bellman_operator,
                        dumps_structured, greedy_actions, load_mdp, mdp_from_dict, mdp_to_dict,
                        random_mdp, relative_qfunction, save_mdp, six_state_example, span_seminorm,
                        validate, value_iteration)

from conftest import two_state_m1


class TestValidate:
    def test_valid_model_has_empty_report(self, m1):
        assert validate(m1) == []

    def test_bad_row_sum_names_the_row(self):
        P = np.array([np.eye(2), [[0.0, 1.0], [1.0, 0.0]]])
        P[1, 0] = [0.0, 0.99]
        mdp = ControlledMDP(P, np.zeros((2, 2)), 0.5)
        report = validate(mdp)
        assert len(report) == 1 and "u=1, x=0" in report[0]

    def test_discount_one_is_reported(self):
        mdp = ControlledMDP(np.array([np.eye(2)]), np.zeros((2, 1)), 1.0)
        assert any("discount out of range" in r for r in validate(mdp))

    def test_six_state_is_valid(self, six):
        assert validate(six) == []


class TestValueIteration:
    def test_zero_discount_returns_cost(self, rng):
        mdp = random_mdp(4, 3, rng, discount=0.0)
        np.testing.assert_array_equal(value_iteration(mdp), mdp.cost)

    def test_two_state_closed_form(self, m1):
        Q = value_iteration(m1, tol=1e-13)
        np.testing.assert_allclose(Q, [[1.5, 1.0], [0.0, 0.5]], atol=1e-12)

    @pytest.mark.parametrize("gamma", [0.5, 0.8, 0.99, 0.999])
    def test_six_state_residual(self, gamma):
        mdp = six_state_example(gamma)
        Q = value_iteration(mdp)
        assert bellman_error(mdp, Q)[1] <= 1e-10

    def test_unpolished_iterate_meets_tolerance(self, m1):
        Q = value_iteration(m1, tol=1e-10, polish=False)
        assert bellman_error(m1, Q)[1] <= 1e-10

    def test_unachievable_tolerance_raises(self, six):
        with pytest.raises(ValueIterationError):
            value_iteration(six, tol=1e-18)

    def test_nonpositive_tolerance_rejected(self, six):
        with pytest.raises(ValueError):
            value_iteration(six, tol=0.0)

    def test_inadmissible_pairs_stay_infinite(self, six):
        Q = value_iteration(six)
        assert np.all(np.isinf(Q[~six.mask])) and np.all(np.isfinite(Q[six.mask]))


class TestBellmanError:
    def test_fixed_point(self, six):
        Q = value_iteration(six)
        B, m = bellman_error(six, Q)
        assert m <= 1e-10

    def test_constant_shift(self, six):
        Q = value_iteration(six)
        B, m = bellman_error(six, Q + 1.0)
        np.testing.assert_allclose(B[six.mask], -(1 - 0.8), atol=1e-10)
        assert m == pytest.approx(0.2, abs=1e-10)

    def test_dense_recomputation_on_m1(self, m1, rng):
        Q = rng.normal(size=(2, 2))
        B, m = bellman_error(m1, Q)
        expected = np.empty((2, 2))
        for x in range(2):
            for u in range(2):
                nxt = x if u == 0 else 1 - x
                expected[x, u] = m1.cost[x, u] + 0.5 * Q[nxt].min() - Q[x, u]
        np.testing.assert_allclose(B, expected, atol=1e-14)
        assert m == pytest.approx(np.abs(expected).max())

    def test_dimension_mismatch(self, six):
        with pytest.raises(ValueError):
            bellman_error(six, np.zeros((3, 3)))


class TestSpan:
    def test_constant_shift_vanishes(self, rng):
        Q = rng.normal(size=(3, 4))
        assert span_seminorm(Q, Q + 7.5) == pytest.approx(0.0, abs=1e-12)

    def test_closed_form(self):
        Q1 = np.array([[3.0, -1.0], [0.0, 1.0]])
        assert span_seminorm(Q1, np.zeros((2, 2))) == 2.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_matches_grid_minimization(self, seed):
        r = np.random.default_rng(seed)
        D = r.normal(size=(3, 3))
        grid = np.linspace(D.min(), D.max(), 20001)
        brute = np.min(np.max(np.abs(D.ravel()[None, :] - grid[:, None]), axis=1))
        assert span_seminorm(D, np.zeros_like(D)) == pytest.approx(brute, abs=1e-3)

    def test_mask_ignores_inadmissible(self, six):
        Q = value_iteration(six)
        assert span_seminorm(Q, Q, six.mask) == 0.0


class TestHelpers:
    def test_greedy_lowest_index_tie(self):
        assert list(greedy_actions(np.array([[1.0, 1.0, 2.0]]))) == [0]

    def test_relative_qfunction_shifts_by_nu_mean(self, six):
        Q = value_iteration(six)
        nu = six.mask / six.mask.sum()
        H = relative_qfunction(Q, nu, six.mask)
        assert np.sum(nu[six.mask] * H[six.mask]) == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_array_equal(greedy_actions(H, six.mask), greedy_actions(Q, six.mask))

    def test_bellman_operator_is_contraction(self, rng, six):
        Q1 = np.where(six.mask, rng.normal(size=six.cost.shape), np.inf)
        Q2 = np.where(six.mask, rng.normal(size=six.cost.shape), np.inf)
        m = six.mask
        d_in = np.abs(Q1[m] - Q2[m]).max()
        d_out = np.abs(bellman_operator(six, Q1)[m] - bellman_operator(six, Q2)[m]).max()
        assert d_out <= 0.8 * d_in + 1e-12


class TestSixState:
    @pytest.mark.parametrize("gamma", [0.5, 0.8, 0.99, 0.9999])
    def test_unique_greedy_action(self, gamma):
        mdp = six_state_example(gamma)
        Q = value_iteration(mdp)
        Qm = np.where(mdp.mask, Q, np.inf)
        srt = np.sort(Qm, axis=1)
        multi = mdp.mask.sum(axis=1) > 1
        assert np.all(srt[multi, 1] - srt[multi, 0] > 1e-9)

    def test_goal_renews_at_zero_cost(self, six):
        goal = six.n_states - 1
        assert six.mask[goal].sum() == 1
        assert six.cost[goal, 0] == 0.0 and six.transitions[0, goal, 0] == 1.0


class TestFileFormat:
    def test_round_trip(self, six, tmp_path):
        save_mdp(six, tmp_path / "m.json")
        back = load_mdp(tmp_path / "m.json")
        np.testing.assert_array_equal(back.transitions, six.transitions)
        np.testing.assert_array_equal(back.cost, six.cost)
        np.testing.assert_array_equal(back.mask, six.mask)
        assert back.discount == six.discount

    def test_structured_floats_are_lossless(self, rng):
        x = rng.normal(size=5)
        assert json.loads(dumps_structured({"x": x}))["x"] == x.tolist()

    def test_shape_mismatch_rejected(self, six):
        d = mdp_to_dict(six)
        d["n_states"] = 5
        with pytest.raises(ValueError):
            mdp_from_dict(json.loads(dumps_structured(d)))


def test_module_helper_two_state_is_deterministic():
    mdp = two_state_m1(0.9)
    assert set(np.unique(mdp.transitions)) == {0.0, 1.0}
