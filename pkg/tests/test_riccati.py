import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lqturnpike.benchmarks import random_model
from lqturnpike.errors import BlowUpError, NotStabilizableError, RegularityError
from lqturnpike.model import LQModel
from lqturnpike.riccati import (are_residual, dre_are_gap, feedback_gain, riccati_operator,
                                solve_are, solve_dre)
from lqturnpike.stability import is_stabilizer


def scalar_lq(**kw):
    base = dict(A=0.0, B=1.0, C=0.0, D=0.0, Q=1.0, S=0.0, R=1.0)
    base.update(kw)
    return LQModel.from_regimes([[0.0]], [base])


def min_eig(X):
    X = 0.5 * (X + np.swapaxes(X, -1, -2))
    return np.linalg.eigvalsh(X)[..., 0].min()


# -- DRE ----------------------------------------------------------------

def test_scalar_dre_is_tanh(scalar):
    dre = solve_dre(scalar, 2.0, 1e-3)
    assert dre.P[0, 0, 0, 0] == pytest.approx(np.tanh(2.0), abs=1e-10)
    np.testing.assert_allclose(dre.P[:, 0, 0, 0], np.tanh(2.0 - dre.grid.nodes), atol=1e-10)


def test_dre_terminal_value_is_exactly_zero(three):
    dre = solve_dre(three, 1.0, 0.01)
    assert np.all(dre.P[-1] == 0.0)


def test_dre_symmetric_psd_and_regular(three, two_input):
    for model in (three, two_input):
        dre = solve_dre(model, 3.0, 0.01)
        assert np.array_equal(dre.P, np.swapaxes(dre.P, -1, -2))
        assert min_eig(dre.P) >= -1e-12
        assert dre.regularity_margin > 0


def test_coupled_dre_matches_fine_grid_reference(coupled):
    coarse = solve_dre(coupled, 2.0, 0.01)
    fine = solve_dre(coupled, 2.0, 0.01 / 16)
    np.testing.assert_allclose(coarse.P[0], fine.P[0], atol=1e-8)


def test_dre_observed_order_of_accuracy(coupled):
    P = [solve_dre(coupled, 2.0, h).P[0] for h in (0.2, 0.1, 0.05)]
    e1 = np.abs(P[0] - P[1]).max()
    e2 = np.abs(P[1] - P[2]).max()
    assert np.log2(e1 / e2) >= 3.5


def test_dre_time_shift_identity(coupled):
    long = solve_dre(coupled, 3.0, 0.01)
    for t in (0.5, 1.0, 2.0):
        short = solve_dre(coupled, 3.0 - t, 0.01)
        np.testing.assert_allclose(long.at(t), short.P[0], atol=1e-9)


def test_dre_gap_form_agrees_with_direct_integration(coupled):
    are = solve_are(coupled)
    direct = solve_dre(coupled, 4.0, 0.01)
    gap = solve_dre(coupled, 4.0, 0.01, reference=are)
    np.testing.assert_allclose(gap.P, direct.P, atol=1e-9)
    np.testing.assert_allclose(gap.gain_gap(), are.Theta_inf[None] - direct.gains().Theta, atol=1e-8)


def test_dre_gap_form_resolves_tiny_gaps(scalar, scalar_are):
    dre = solve_dre(scalar, 30.0, 0.01, reference=scalar_are)
    s = 30.0 - dre.grid.nodes
    # 1 - tanh(s) = 2 e^{-2s} / (1 + e^{-2s}), far below the precision of P itself
    exact = 2 * np.exp(-2 * s) / (1 + np.exp(-2 * s))
    rel = np.abs(dre.P_gap[:, 0, 0, 0] - exact) / exact
    assert rel.max() < 1e-6


def test_dre_argument_checks(scalar):
    with pytest.raises(ValueError):
        solve_dre(scalar, 0.0, 0.1)
    with pytest.raises(ValueError):
        solve_dre(scalar, 1.0, 2.0)


def test_blow_up_error_carries_last_good_time():
    # negative R gives dP/dt = -(1 + P^2): tan blow-up at T - t = pi/2
    model = scalar_lq(R=-1.0)
    with pytest.raises(BlowUpError) as info:
        solve_dre(model, 3.0, 0.01)
    assert info.value.last_good_time == pytest.approx(3.0 - np.pi / 2, abs=0.05)


# -- gains --------------------------------------------------------------

def test_scalar_gain_at_limit(scalar):
    gain = feedback_gain(scalar, np.ones((1, 1, 1)))
    assert gain.Theta[0, 0, 0] == pytest.approx(-1.0)
    assert gain.A_cl[0, 0, 0] == pytest.approx(-1.0)
    assert gain.C_cl[0, 0, 0] == pytest.approx(0.0)


def test_gain_at_zero_is_cross_weight_term(three):
    gain = feedback_gain(three, np.zeros((3, 2, 2)))
    expected = -np.linalg.solve(three.R, three.S)
    np.testing.assert_allclose(gain.Theta, expected, atol=1e-14)


@given(st.integers(0, 2 ** 31 - 1))
def test_gain_matches_direct_formula(seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, m0=2, n=2, m=1)
    L = rng.normal(size=(2, 2, 2))
    P = L @ np.swapaxes(L, -1, -2)
    gain = feedback_gain(model, P)
    for i in range(2):
        A, B, C, D = (np.array(model.A[i]), np.array(model.B[i]),
                      np.array(model.C[i]), np.array(model.D[i]))
        Rt = model.R[i] + D.T @ P[i] @ D
        Th = -np.linalg.inv(Rt) @ (B.T @ P[i] + D.T @ P[i] @ C + model.S[i])
        np.testing.assert_allclose(gain.Theta[i], Th, atol=1e-12, rtol=1e-10)
        np.testing.assert_allclose(gain.A_cl[i], A + B @ Th, atol=1e-12, rtol=1e-10)
        np.testing.assert_allclose(gain.C_cl[i], C + D @ Th, atol=1e-12, rtol=1e-10)


def test_gain_needs_regular_weight():
    model = scalar_lq(D=1.0, R=1.0)
    with pytest.raises(RegularityError):
        feedback_gain(model, -np.ones((1, 1, 1)))


def test_gain_from_solution_needs_time(scalar):
    dre = solve_dre(scalar, 1.0, 0.1)
    with pytest.raises(ValueError):
        feedback_gain(scalar, dre)
    assert feedback_gain(scalar, dre, 0.5).Theta.shape == (1, 1, 1)


# -- ARE ----------------------------------------------------------------

def test_scalar_are(scalar_are):
    assert scalar_are.P_inf[0, 0, 0] == pytest.approx(1.0, abs=1e-9)
    assert scalar_are.Theta_inf[0, 0, 0] == pytest.approx(-1.0, abs=1e-9)
    assert scalar_are.residual < scalar_are.tol


def test_are_for_stable_uncontrolled_system():
    are = solve_are(scalar_lq(A=-1.0, B=0.0))
    assert are.P_inf[0, 0, 0] == pytest.approx(0.5, abs=1e-9)


def test_are_rejects_unstabilizable_model():
    with pytest.raises(NotStabilizableError, match="possibly not stabilizable"):
        solve_are(scalar_lq(A=1.0, B=0.0), T_max=50.0)


def test_are_invariants(coupled, three, two_input):
    for model in (coupled, three, two_input):
        are = solve_are(model)
        assert are.residual <= are.tol
        assert are_residual(model, are.P_inf) == pytest.approx(are.residual)
        assert are.regularity_margin > 0
        assert min_eig(are.P_inf) > 0
        assert is_stabilizer(model, are.Theta_inf)[0]
        np.testing.assert_allclose(riccati_operator(model, are.P_inf), 0.0, atol=1e-9)


def test_monotone_in_horizon(three):
    are = solve_are(three)
    prev = np.zeros((3, 2, 2))
    for T in (1, 2, 4, 8):
        P0 = solve_dre(three, float(T), 0.01).P[0]
        assert min_eig(P0 - prev) >= -1e-9
        assert min_eig(are.P_inf - P0) >= -1e-9
        prev = P0


def test_are_serialises(scalar_are):
    d = scalar_are.to_dict()
    assert d["P_inf"] == [[[pytest.approx(1.0)]]]
    assert set(d) >= {"Theta_inf", "residual", "horizon_used"}


# -- gaps ---------------------------------------------------------------

def test_scalar_gap_decays_at_rate_two(scalar, scalar_are):
    dre = solve_dre(scalar, 20.0, 0.01)
    gap = dre_are_gap(dre, scalar_are)
    assert gap.fit.available
    assert gap.fit.slope == pytest.approx(-2.0, abs=0.02)
    assert gap.P_gap[-1] == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(gap.P_gap, 1 - np.tanh(gap.lag), atol=1e-9)


def test_coupled_gap_positive_and_fitted(coupled):
    are = solve_are(coupled)
    dre = solve_dre(coupled, 20.0, 0.01, reference=are)
    gap = dre_are_gap(dre, are)
    assert min_eig(dre.P_gap) >= -1e-9
    assert gap.fit.r2 >= 0.99 and gap.fit.slope < 0
    assert gap.fit_gain.slope < 0


def test_short_horizon_gap_fit_unavailable(scalar, scalar_are):
    gap = dre_are_gap(solve_dre(scalar, 1.0, 0.01), scalar_are)
    assert not gap.fit.available


def test_dre_csv_rows(coupled):
    header, rows = solve_dre(coupled, 1.0, 0.5).to_rows()
    assert header == ["t", "regime", "P_11"]
    assert len(rows) == 3 * 2
    assert rows[-1][:2] == [1.0, 2]
