"""Reference models used by the examples, the CLI configs and the test suite."""

from __future__ import annotations

import numpy as np

from .model import LQModel


def scalar_model() -> LQModel:
    """``dX = u dt`` with cost ``(x^2 + u^2) / 2``: ``P_T(t) = tanh(T - t)``, ``P_inf = 1``."""
    return LQModel.from_regimes([[0.0]], [dict(A=0.0, B=1.0, C=0.0, D=0.0, Q=1.0, S=0.0, R=1.0)])


def coupled_scalar_model() -> LQModel:
    """Two scalar regimes, one open-loop unstable, with multiplicative noise in both."""
    lam = [[-1.0, 1.0], [1.0, -1.0]]
    return LQModel.from_regimes(lam, [
        dict(A=0.5, B=1.0, C=0.3, D=0.2, Q=1.0, S=0.0, R=1.0),
        dict(A=-0.5, B=0.5, C=0.1, D=0.0, Q=2.0, S=0.1, R=1.0),
    ])


def three_regime_model() -> LQModel:
    """``n = 2``, ``m = 1``, three regimes with state and control noise."""
    lam = [[-1.5, 1.0, 0.5], [0.4, -0.8, 0.4], [1.0, 1.0, -2.0]]
    regs = [
        dict(A=[[0.0, 1.0], [-1.0, 0.2]], B=[[0.0], [1.0]], C=[[0.2, 0.0], [0.0, 0.1]], D=[[0.0], [0.3]],
             Q=[[1.0, 0.0], [0.0, 1.0]], S=[[0.0, 0.1]], R=[[1.0]]),
        dict(A=[[0.3, 0.5], [0.0, -0.4]], B=[[1.0], [0.5]], C=[[0.1, 0.1], [0.0, 0.2]], D=[[0.1], [0.0]],
             Q=[[2.0, 0.3], [0.3, 1.0]], S=[[0.0, 0.0]], R=[[0.5]]),
        dict(A=[[-0.2, 0.0], [0.4, 0.1]], B=[[0.5], [1.0]], C=[[0.0, 0.0], [0.2, 0.0]], D=[[0.2], [0.2]],
             Q=[[1.0, -0.2], [-0.2, 1.5]], S=[[0.1, 0.0]], R=[[2.0]]),
    ]
    return LQModel.from_regimes(lam, regs)


def two_input_model() -> LQModel:
    """``n = 2``, ``m = 2``, two regimes; used where a multi-input control is exercised."""
    lam = [[-0.7, 0.7], [1.2, -1.2]]
    regs = [
        dict(A=[[0.1, 0.3], [-0.2, 0.0]], B=[[1.0, 0.0], [0.2, 1.0]], C=[[0.1, 0.0], [0.0, 0.1]],
             D=[[0.1, 0.0], [0.0, 0.1]], Q=[[1.0, 0.0], [0.0, 2.0]], S=[[0.0, 0.0], [0.0, 0.0]],
             R=[[1.0, 0.0], [0.0, 1.0]]),
        dict(A=[[-0.3, 0.0], [0.5, 0.2]], B=[[0.5, 0.5], [0.0, 1.0]], C=[[0.2, 0.1], [0.0, 0.0]],
             D=[[0.0, 0.1], [0.1, 0.0]], Q=[[1.5, 0.2], [0.2, 1.0]], S=[[0.1, 0.0], [0.0, 0.1]],
             R=[[2.0, 0.0], [0.0, 1.0]]),
    ]
    return LQModel.from_regimes(lam, regs)


def random_generator(rng: np.random.Generator, m0: int, scale: float = 1.0) -> np.ndarray:
    lam = rng.uniform(0.0, scale, size=(m0, m0))
    np.fill_diagonal(lam, 0.0)
    np.fill_diagonal(lam, -lam.sum(axis=1))
    return lam


def random_model(rng: np.random.Generator, m0: int = 2, n: int = 2, m: int = 1,
                 noise: float = 0.3) -> LQModel:
    """Random instance satisfying the positivity hypotheses (``S = 0``, ``Q, R`` positive definite)."""
    lam = random_generator(rng, m0)
    regs = []
    for _ in range(m0):
        Lq = rng.normal(size=(n, n))
        Lr = rng.normal(size=(m, m))
        regs.append(dict(
            A=rng.normal(scale=0.7, size=(n, n)), B=rng.normal(size=(n, m)),
            C=rng.normal(scale=noise, size=(n, n)), D=rng.normal(scale=noise, size=(n, m)),
            Q=Lq @ Lq.T + 0.5 * np.eye(n), S=np.zeros((m, n)), R=Lr @ Lr.T + 0.5 * np.eye(m)))
    return LQModel.from_regimes(lam, regs)
