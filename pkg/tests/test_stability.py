import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lqturnpike.benchmarks import random_generator, random_model
from lqturnpike.errors import CertificateError, HorizonTooShortError, LQError
from lqturnpike.model import Generator, LQModel, SignalSet, TimeGrid
from lqturnpike.moments import FeedbackLaw, monte_carlo_simulate
from lqturnpike.riccati import solve_are, solve_dre
from lqturnpike.stability import (build_ms_generator, dissipativity_certificate, find_T0,
                                  is_stabilizer, lyapunov_operator, spectral_abscissa)


def scalar_gen(lam=((0.0,),)):
    return Generator(np.array(lam, dtype=float))


def direct_drift(lam, A, C, M):
    out = np.empty_like(M)
    m0 = len(lam)
    for i in range(m0):
        out[i] = A[i] @ M[i] + M[i] @ A[i].T + C[i] @ M[i] @ C[i].T
        for j in range(m0):
            out[i] += lam[j][i] * M[j]
    return out


def shifted(model, s):
    """Same model with every drift matrix moved by ``-s I``."""
    regs = [dict(A=model.A[i] - s * np.eye(model.n), B=model.B[i], C=model.C[i], D=model.D[i],
                 Q=model.Q[i], S=model.S[i], R=model.R[i]) for i in range(model.m0)]
    return LQModel.from_regimes(model.generator.lam, regs)


# -- lift ---------------------------------------------------------------

@pytest.mark.parametrize("a,c", [(-1.0, 0.0), (0.3, 0.5), (-1.0, np.sqrt(2.0))])
def test_scalar_lift_is_ito_rate(a, c):
    op = build_ms_generator([[[a]]], [[[c]]], scalar_gen())
    assert op.matrix.shape == (1, 1)
    assert op.matrix[0, 0] == pytest.approx(2 * a + c * c)
    assert spectral_abscissa(op) == pytest.approx(2 * a + c * c)


def test_two_regime_abscissa_matches_quadratic_formula():
    op = build_ms_generator([[[-3.0]], [[1.0]]], [[[0.0]], [[0.0]]],
                            scalar_gen([[-2.0, 2.0], [2.0, -2.0]]))
    # [[-8, 2], [2, 0]]: eigenvalues -4 +- sqrt(16 + 4)
    np.testing.assert_allclose(op.matrix, [[-8.0, 2.0], [2.0, 0.0]])
    assert spectral_abscissa(op) == pytest.approx(-4.0 + np.sqrt(20.0))


def test_decoupled_lift_is_block_diagonal(rng):
    A = rng.normal(size=(2, 2, 2))
    C = rng.normal(size=(2, 2, 2))
    op = build_ms_generator(A, C, scalar_gen([[0.0, 0.0], [0.0, 0.0]]))
    for i in range(2):
        single = build_ms_generator(A[i:i + 1], C[i:i + 1], scalar_gen())
        np.testing.assert_allclose(op.matrix[4 * i:4 * i + 4, 4 * i:4 * i + 4], single.matrix)
    np.testing.assert_allclose(op.matrix[:4, 4:], 0.0)


@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2 ** 31 - 1))
def test_lift_matches_direct_evaluation_and_keeps_symmetry(m0, n, seed):
    rng = np.random.default_rng(seed)
    lam = random_generator(rng, m0, scale=2.0)
    A = rng.normal(size=(m0, n, n))
    C = rng.normal(size=(m0, n, n))
    op = build_ms_generator(A, C, Generator(lam))
    M = rng.normal(size=(m0, n, n))
    np.testing.assert_allclose(op.apply(M), direct_drift(lam, A, C, M), atol=1e-12)
    Ms = M + np.swapaxes(M, -1, -2)
    out = op.apply(Ms)
    assert np.abs(out - np.swapaxes(out, -1, -2)).max() <= 1e-12


@given(st.integers(0, 2 ** 31 - 1), st.floats(-2, 2), st.floats(-2, 2))
def test_lift_linear_in_drift_and_chain(seed, a, b):
    rng = np.random.default_rng(seed)
    C = rng.normal(size=(2, 2, 2))
    A1, A2 = rng.normal(size=(2, 2, 2, 2))
    l1, l2 = random_generator(rng, 2), random_generator(rng, 2)
    zero = np.zeros_like(C)
    # the C part is fixed, so the affine map is linear after removing it
    base = build_ms_generator(zero, C, Generator(np.zeros((2, 2)))).matrix

    def part(A, lam):
        return build_ms_generator(A, C, Generator(lam)).matrix - base

    combo = part(a * A1 + b * A2, a * l1 + b * l2)
    np.testing.assert_allclose(combo, a * part(A1, l1) + b * part(A2, l2), atol=1e-10)


def test_lift_dimension_checks():
    with pytest.raises(ValueError):
        build_ms_generator(np.zeros((2, 1, 1)), np.zeros((2, 1, 1)), scalar_gen())
    with pytest.raises(ValueError):
        build_ms_generator(np.zeros((1, 2, 2)), np.zeros((1, 1, 1)), scalar_gen())


# -- stabilizer ---------------------------------------------------------

def test_scalar_stabilizer(scalar):
    ok, rho = is_stabilizer(scalar, [[[-1.0]]])
    assert ok and rho == pytest.approx(-2.0)
    ok, rho = is_stabilizer(scalar, [[[0.0]]])
    assert not ok and rho == pytest.approx(0.0)


def test_are_gain_is_a_stabilizer(coupled, three, two_input):
    for model in (coupled, three, two_input):
        assert is_stabilizer(model, solve_are(model).Theta_inf)[0]


# -- certificates -------------------------------------------------------

def test_scalar_certificate(scalar):
    cert = dissipativity_certificate(scalar, [[[-1.0]]])
    assert cert.Sigma[0, 0, 0] == pytest.approx(0.5)
    assert cert.delta == pytest.approx(2.0)
    assert cert.slack >= -1e-12


def test_decoupled_copies_share_certificate():
    model = LQModel.from_regimes([[0.0, 0.0], [0.0, 0.0]], [
        dict(A=-1.0, B=1.0, C=0.0, D=0.0, Q=1.0, S=0.0, R=1.0)] * 2)
    cert = dissipativity_certificate(model, np.zeros((2, 1, 1)))
    np.testing.assert_allclose(cert.Sigma[:, 0, 0], [0.5, 0.5])
    assert cert.delta == pytest.approx(2.0)


def test_certificate_resubstitution_on_random_stabilizers(rng):
    done = 0
    while done < 5:
        model = random_model(rng, m0=2, n=2, m=1)
        try:
            are = solve_are(model, T_max=100.0)
        except LQError:
            continue
        cert = dissipativity_certificate(model, are.Theta_inf)
        A_cl = model.A + model.B @ are.Theta_inf
        C_cl = model.C + model.D @ are.Theta_inf
        resid = -lyapunov_operator(model.generator, A_cl, C_cl, cert.Sigma) - cert.delta * cert.Sigma
        assert np.linalg.eigvalsh(resid).min() >= -1e-10
        assert cert.slack >= -1e-10
        assert np.linalg.eigvalsh(cert.Sigma).min() > 0
        _, rho = is_stabilizer(model, are.Theta_inf)
        assert cert.delta <= -rho + 1e-6
        done += 1


def test_certificate_exists_iff_mean_square_stable(rng):
    seen = {True: 0, False: 0}
    for _ in range(40):
        model = shifted(random_model(rng, m0=2, n=2, m=1, noise=0.5), rng.uniform(0.0, 3.0))
        Theta = rng.normal(scale=0.5, size=(2, 1, 2))
        ok, rho = is_stabilizer(model, Theta)
        if abs(rho) < 1e-6:
            continue
        seen[ok] += 1
        if ok:
            cert = dissipativity_certificate(model, Theta)
            assert cert.delta > 0 and cert.delta <= -rho + 1e-6
        else:
            with pytest.raises(CertificateError, match="no certificate found"):
                dissipativity_certificate(model, Theta)
    assert seen[True] > 0 and seen[False] > 0


def test_certificate_serialises(scalar):
    d = dissipativity_certificate(scalar, [[[-1.0]]]).to_dict()
    assert d["delta"] == pytest.approx(2.0)
    assert d["Sigma"] == [[[pytest.approx(0.5)]]]


def test_second_moment_decays_at_least_at_certified_rate():
    model = LQModel.from_regimes([[-1.0, 1.0], [1.0, -1.0]], [
        dict(A=-1.0, B=1.0, C=0.3, D=0.0, Q=1.0, S=0.0, R=1.0),
        dict(A=-0.5, B=1.0, C=0.2, D=0.0, Q=1.0, S=0.0, R=1.0)])
    Theta = np.zeros((2, 1, 1))
    cert = dissipativity_certificate(model, Theta)
    grid = TimeGrid(0.0, 2.0, 0.01)
    law = FeedbackLaw.constant(grid, Theta)
    mc = monte_carlo_simulate(model, law, SignalSet.zeros(2, 1, 1), np.ones(1), 0, grid,
                              20_000, seed=3, record_times=[0.0, 1.0, 2.0])
    logm = np.log(mc.second_moment)
    slope = np.polyfit(mc.times, logm, 1)[0]
    rel_se = mc.second_moment_se[-1] / mc.second_moment[-1]
    assert slope <= -cert.delta + 3 * rel_se


# -- T0 -----------------------------------------------------------------

def test_scalar_T0_is_atanh_half(scalar, scalar_cert):
    dre = solve_dre(scalar, 5.0, 1e-3)
    T0 = find_T0(scalar, dre, scalar_cert)
    assert T0 == pytest.approx(np.arctanh(0.5), abs=1e-3)


def test_T0_too_short_horizon(scalar, scalar_cert):
    with pytest.raises(HorizonTooShortError, match="horizon too short"):
        find_T0(scalar, solve_dre(scalar, 0.3, 0.01), scalar_cert)


def test_T0_non_increasing_in_horizon(coupled):
    are = solve_are(coupled)
    cert = dissipativity_certificate(coupled, are.Theta_inf)
    values = [find_T0(coupled, solve_dre(coupled, T, 0.01), cert) for T in (4.0, 8.0, 16.0)]
    assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))
    assert values[-1] < 16.0
