import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lqturnpike.benchmarks import coupled_scalar_model
from lqturnpike.errors import ModelStructureError, PaddingError
from lqturnpike.model import SignalSet
from lqturnpike.offsets import (couple_vectors, offset_gap, solve_offset_finite,
                                solve_offset_infinite, stationary_operator)
from lqturnpike.riccati import solve_are, solve_dre
from lqturnpike.stability import DissipativityCertificate, dissipativity_certificate


@pytest.fixture(scope="module")
def coupled_setup(coupled):
    are = solve_are(coupled)
    return are, dissipativity_certificate(coupled, are.Theta_inf)


def test_zero_signals_give_zero_offsets(coupled, coupled_setup):
    zero = SignalSet.zeros(2, 1, 1)
    fin = solve_offset_finite(coupled, solve_dre(coupled, 3.0, 0.01), zero)
    inf = solve_offset_infinite(coupled, *coupled_setup, zero, 3.0)
    for sol in (fin, inf):
        assert np.all(sol.h == 0) and np.all(sol.v == 0)
    gap = offset_gap(fin, inf)
    assert np.all(gap.e_h == 0) and np.all(gap.e_v == 0)


def test_scalar_finite_offset_closed_form(scalar):
    # h' = tanh(T - t) (h - beta), h(T) = 0  =>  h = beta (1 - sech(T - t))
    beta = 1.5
    dre = solve_dre(scalar, 6.0, 0.01)
    sol = solve_offset_finite(scalar, dre, SignalSet.constant(1, 1, 1, b=[beta]))
    s = 6.0 - sol.grid.nodes
    np.testing.assert_allclose(sol.h[:, 0, 0], beta * (1 - 1 / np.cosh(s)), atol=1e-9)
    assert np.all(sol.h[-1] == 0)
    # v = -(B'h + r) with D = 0
    np.testing.assert_allclose(sol.v[:, 0, 0], -sol.h[:, 0, 0], atol=1e-14)


def test_scalar_infinite_offset_drift_signal(scalar, scalar_are, scalar_cert):
    sol = solve_offset_infinite(scalar, scalar_are, scalar_cert, SignalSet.constant(1, 1, 1, b=[2.0]), 5.0)
    np.testing.assert_allclose(sol.h, 2.0, atol=1e-9)
    np.testing.assert_allclose(sol.v, -2.0, atol=1e-9)
    assert sol.h_tail[0, 0] == pytest.approx(2.0)
    assert sol.kind == "infinite"


def test_scalar_infinite_offset_control_signal(scalar, scalar_are, scalar_cert):
    sol = solve_offset_infinite(scalar, scalar_are, scalar_cert, SignalSet.constant(1, 1, 1, r=[1.0]), 5.0)
    np.testing.assert_allclose(sol.h, -1.0, atol=1e-9)
    np.testing.assert_allclose(sol.v, 0.0, atol=1e-9)


def test_finite_offset_tends_to_infinite_offset(scalar, scalar_are, scalar_cert):
    sig = SignalSet.constant(1, 1, 1, b=[1.0])
    fin = solve_offset_finite(scalar, solve_dre(scalar, 30.0, 0.01), sig)
    inf = solve_offset_infinite(scalar, scalar_are, scalar_cert, sig, 30.0)
    assert fin.h[0, 0, 0] == pytest.approx(inf.h[0, 0, 0], abs=1e-9)


def test_regime_distinct_constant_q_grid_refinement(coupled):
    sig = SignalSet.constant(2, 1, 1, q=[[1.0], [-0.5]])
    coarse = solve_offset_finite(coupled, solve_dre(coupled, 2.0, 0.01), sig)
    fine = solve_offset_finite(coupled, solve_dre(coupled, 2.0, 0.01 / 16), sig)
    np.testing.assert_allclose(coarse.h, fine.h[::16], atol=1e-8)
    np.testing.assert_allclose(coarse.v, fine.v[::16], atol=1e-8)


@settings(max_examples=10)
@given(st.lists(st.floats(-2, 2), min_size=8, max_size=8), st.floats(-2, 2))
def test_offsets_are_linear_in_signals(vals, c):
    model = coupled_scalar_model()
    dre = solve_dre(model, 2.0, 0.05)
    s1 = SignalSet.piecewise([0.0, 1.0, 2.0], 2, 1, 1, b=[vals[0], vals[1]], q=[vals[2], vals[3]])
    s2 = SignalSet.piecewise([0.0, 0.5, 2.0], 2, 1, 1, sigma=[vals[4], vals[5]], r=[vals[6], vals[7]])
    h1 = solve_offset_finite(model, dre, s1)
    h2 = solve_offset_finite(model, dre, s2)
    h12 = solve_offset_finite(model, dre, s1.scaled(c) + s2)
    np.testing.assert_allclose(h12.h, c * h1.h + h2.h, atol=1e-10)
    np.testing.assert_allclose(h12.v, c * h1.v + h2.v, atol=1e-10)


def test_backward_equation_residual_is_second_order(coupled):
    sig = SignalSet.constant(2, 1, 1, b=[[1.0], [0.5]], sigma=[[0.2], [0.0]], r=[[0.3], [-0.1]])

    def residual(step):
        dre = solve_dre(coupled, 2.0, step)
        sol = solve_offset_finite(coupled, dre, sig)
        h = sol.h
        dh = (h[2:] - h[:-2]) / (2 * step)
        A_cl = coupled.A + coupled.B @ sol.Theta_nodes
        drift = (couple_vectors(coupled.generator, h) + np.einsum("tiba,tib->tia", A_cl, h) + sol.phi)
        return np.abs(dh + drift[1:-1]).max()

    r1, r2 = residual(0.02), residual(0.01)
    assert r1 < 1e-3
    assert np.log2(r1 / r2) >= 1.8


def test_horizon_shift_identity(coupled):
    sig = SignalSet.piecewise([0.0, 1.5, 4.0], 2, 1, 1, b=[1.0, -1.0], q=[0.5, 1.0])
    long = solve_offset_finite(coupled, solve_dre(coupled, 4.0, 0.01), sig)
    short = solve_offset_finite(coupled, solve_dre(coupled, 3.0, 0.01), sig.shifted(1.0))
    k = long.grid.index(1.0)
    np.testing.assert_allclose(long.h[k:], short.h, atol=1e-10)


def test_infinite_offset_bounded_by_tail_scale(scalar, scalar_are, scalar_cert):
    sig = SignalSet.piecewise([0.0, 1.0], 1, 1, 1, b=[2.0], tail={"b": 1.0})
    sol = solve_offset_infinite(scalar, scalar_are, scalar_cert, sig, 5.0)
    assert np.abs(sol.h).max() <= 10 * np.abs(sol.h_tail).max()
    np.testing.assert_allclose(sol.h[-1], 1.0, atol=1e-9)


def test_padding_without_tail_needs_covering_signals(scalar, scalar_are, scalar_cert):
    sig = SignalSet.piecewise([0.0, 5.0], 1, 1, 1, b=[1.0])
    with pytest.raises(PaddingError, match="cannot certify padding"):
        solve_offset_infinite(scalar, scalar_are, scalar_cert, sig, 2.0)
    long_sig = SignalSet.piecewise([0.0, 200.0], 1, 1, 1, b=[1.0])
    sol = solve_offset_infinite(scalar, scalar_are, scalar_cert, long_sig, 2.0, step=0.05)
    np.testing.assert_allclose(sol.h, 1.0, atol=1e-8)
    assert sol.h_tail is None


def test_padding_cap(scalar, scalar_are):
    slow = DissipativityCertificate(np.ones((1, 1, 1)), 1e-3, 0.0)
    with pytest.raises(PaddingError, match="exceeds cap"):
        solve_offset_infinite(scalar, scalar_are, slow, SignalSet.piecewise([0.0, 1e6], 1, 1, 1, b=[1.0]), 1.0)


def test_offset_gap_terminal_value_and_decay(scalar, scalar_are, scalar_cert):
    sig = SignalSet.constant(1, 1, 1, b=[1.0])
    T = 20.0
    fin = solve_offset_finite(scalar, solve_dre(scalar, T, 0.01), sig)
    inf = solve_offset_infinite(scalar, scalar_are, scalar_cert, sig, T)
    gap = offset_gap(fin, inf)
    assert gap.e_h[-1] == np.abs(inf.h[-1]).max()
    assert gap.fit_h.available
    assert gap.fit_h.slope < 0
    assert -gap.fit_h.slope >= scalar_cert.delta / 8 - 1e-6


def test_structural_fields(coupled, coupled_setup):
    sig = SignalSet.constant(2, 1, 1, b=[[1.0], [0.5]])
    sol = solve_offset_infinite(coupled, *coupled_setup, sig, 2.0)
    assert np.all(sol.diffusion_offset == 0)
    np.testing.assert_allclose(sol.jump, -np.swapaxes(sol.jump, 1, 2))
    np.testing.assert_allclose(sol.jump[:, 0, 1], sol.h[:, 1] - sol.h[:, 0])
    header, rows = sol.to_rows()
    assert header == ["t", "regime", "h_1", "v_1"]
    assert len(rows) == 2 * len(sol.grid)


def test_stationary_tail_solves_linear_system(coupled, coupled_setup):
    are, cert = coupled_setup
    sig = SignalSet.constant(2, 1, 1, b=[[1.0], [0.5]], q=[[0.2], [0.1]])
    sol = solve_offset_infinite(coupled, are, cert, sig, 2.0)
    L = stationary_operator(coupled, are.Theta_inf)
    np.testing.assert_allclose(sol.h, np.broadcast_to(sol.h_tail, sol.h.shape), atol=1e-9)
    phi = sol.phi[0].reshape(-1)
    np.testing.assert_allclose(L @ sol.h_tail.reshape(-1) + phi, 0.0, atol=1e-12)


def test_dimension_mismatch(coupled, scalar):
    with pytest.raises(ModelStructureError):
        solve_offset_finite(coupled, solve_dre(coupled, 1.0, 0.1), SignalSet.zeros(1, 1, 1))
    with pytest.raises(ModelStructureError):
        solve_offset_finite(coupled, solve_dre(scalar, 1.0, 0.1), SignalSet.zeros(2, 1, 1))
