"""Mean-square stability of switching linear systems and Lyapunov certificates.

Second moments ``M(i) = E[X X' 1{alpha = i}]`` of ``dX = A X dt + C X dW``
evolve by a linear map on stacked, row-major vectorised matrices. Its
spectral abscissa decides mean-square stability; the adjoint map gives the
coupled Lyapunov equation used for dissipativity certificates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CertificateError, HorizonTooShortError, LQError, ModelStructureError
from .model import Generator, LQModel, couple

PSD_TOL = 1e-10


@dataclass(frozen=True)
class MeanSquareOperator:
    matrix: np.ndarray
    n: int
    m0: int

    def apply(self, M) -> np.ndarray:
        """Second-moment drift for the family ``M`` of shape ``(m0, n, n)``."""
        M = np.asarray(M, dtype=float)
        out = self.matrix @ M.reshape(-1)
        return out.reshape(self.m0, self.n, self.n)


def build_ms_generator(A, C, gen: Generator) -> MeanSquareOperator:
    A = np.asarray(A, dtype=float)
    C = np.asarray(C, dtype=float)
    m0 = gen.m0
    if A.ndim != 3 or A.shape[0] != m0 or A.shape[1] != A.shape[2]:
        raise ModelStructureError(f"A must be (m0, n, n) with m0={m0}, got {A.shape}")
    if C.shape != A.shape:
        raise ModelStructureError(f"C has shape {C.shape}, A has {A.shape}")
    n = A.shape[1]
    eye = np.eye(n)
    nn = n * n
    L = np.zeros((m0 * nn, m0 * nn))
    lam = gen.lam
    for i in range(m0):
        blk = np.kron(A[i], eye) + np.kron(eye, A[i]) + np.kron(C[i], C[i])
        for j in range(m0):
            # mass flowing from regime j into regime i
            rate = lam[j, i] if j != i else -gen.exit_rates[i]
            sub = rate * np.eye(nn)
            if j == i:
                sub = sub + blk
            L[i * nn:(i + 1) * nn, j * nn:(j + 1) * nn] = sub
    return MeanSquareOperator(L, n, m0)


def spectral_abscissa(op: MeanSquareOperator) -> float:
    try:
        eig = np.linalg.eigvals(op.matrix)
    except np.linalg.LinAlgError as exc:
        raise LQError(f"eigenvalue computation failed: {exc}") from None
    return float(eig.real.max())


def closed_loop(model: LQModel, Theta):
    Theta = np.asarray(Theta, dtype=float)
    return model.A + model.B @ Theta, model.C + model.D @ Theta


def is_stabilizer(model: LQModel, Theta) -> tuple[bool, float]:
    """Whether ``Theta`` renders the closed loop mean-square stable, with its abscissa."""
    A_cl, C_cl = closed_loop(model, Theta)
    rho = spectral_abscissa(build_ms_generator(A_cl, C_cl, model.generator))
    return rho < 0, rho


def lyapunov_operator(gen: Generator, A_cl, C_cl, Sigma) -> np.ndarray:
    """``Lambda[Sigma] + Sigma A + A' Sigma + C' Sigma C`` per regime (batched over leading axes)."""
    At = np.swapaxes(A_cl, -1, -2)
    Ct = np.swapaxes(C_cl, -1, -2)
    return couple(gen, Sigma) + Sigma @ A_cl + At @ Sigma + Ct @ Sigma @ C_cl


@dataclass(frozen=True)
class DissipativityCertificate:
    Sigma: np.ndarray
    delta: float
    slack: float

    def to_dict(self) -> dict:
        return {"Sigma": self.Sigma.tolist(), "delta": self.delta, "slack": self.slack}


def _sym_basis(n):
    """Duplication matrix (n^2 x n(n+1)/2) and the upper-triangle index pairs."""
    iu = np.triu_indices(n)
    dup = np.zeros((n * n, iu[0].size))
    for k, (a, b) in enumerate(zip(*iu)):
        dup[a * n + b, k] = 1.0
        dup[b * n + a, k] = 1.0
    sel = iu[0] * n + iu[1]
    return dup, sel


def dissipativity_certificate(model: LQModel, Theta) -> DissipativityCertificate:
    """Solve the coupled Lyapunov equation with right side ``-I`` for the closed loop.

    The solve runs over symmetric families only, an
    ``m0 * n(n+1)/2``-dimensional linear system. The decay rate is
    ``delta = 1 / max_i lambda_max(Sigma(i))`` so that ``-I <= -delta Sigma``.

    Raises
    ------
    CertificateError
        If the system is singular or the solution is not positive definite.
    """
    A_cl, C_cl = closed_loop(model, Theta)
    op = build_ms_generator(A_cl, C_cl, model.generator)
    adj = op.matrix.T
    n, m0 = model.n, model.m0
    dup, sel = _sym_basis(n)
    nn = n * n
    big_dup = np.kron(np.eye(m0), dup)
    big_sel = (np.arange(m0)[:, None] * nn + sel[None, :]).ravel()
    system = (adj @ big_dup)[big_sel]
    rhs = -np.tile(np.eye(n).reshape(-1)[sel], m0)
    try:
        sol = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError:
        raise CertificateError("no certificate found: coupled Lyapunov system is singular") from None
    Sigma = (big_dup @ sol).reshape(m0, n, n)
    Sigma = 0.5 * (Sigma + np.swapaxes(Sigma, -1, -2))
    eig = np.linalg.eigvalsh(Sigma)
    if not np.all(np.isfinite(eig)) or eig[:, 0].min() <= PSD_TOL:
        raise CertificateError(
            f"no certificate found: Lyapunov solution not positive definite (min eigenvalue {eig[:, 0].min():.3g})")
    delta = 1.0 / eig[:, -1].max()
    resid = -lyapunov_operator(model.generator, A_cl, C_cl, Sigma) - delta * Sigma
    slack = float(np.linalg.eigvalsh(0.5 * (resid + np.swapaxes(resid, -1, -2)))[:, 0].min())
    Sigma.setflags(write=False)
    return DissipativityCertificate(Sigma, float(delta), slack)


def find_T0(model: LQModel, dre, cert: DissipativityCertificate, tol: float = PSD_TOL) -> float:
    """Smallest lag ``T - t`` beyond which the finite-horizon loop keeps half the certified decay.

    Scans every node of the DRE grid; the returned lag is the first node past
    the largest failing lag, so ties go to the conservative side.
    """
    gains = dre.gains()
    S = np.broadcast_to(cert.Sigma, gains.A_cl.shape)
    form = lyapunov_operator(model.generator, gains.A_cl, gains.C_cl, S) + 0.5 * cert.delta * S
    worst = np.linalg.eigvalsh(0.5 * (form + np.swapaxes(form, -1, -2)))[..., -1].max(axis=1)
    lags = dre.T - dre.grid.nodes
    bad = worst > tol
    if not bad.any():
        return 0.0
    k_bad = int(np.nonzero(bad)[0].min())  # smallest t, i.e. largest failing lag
    if k_bad == 0:
        raise HorizonTooShortError(
            f"horizon too short for the perturbed Lyapunov bound: it still fails at lag {lags[0]:g}")
    return float(lags[k_bad - 1])
