"""Coupled Riccati equations: backward DRE, horizon-limit ARE, feedback gains."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import (BlowUpError, NotStabilizableError, NumericalIntegrityError,
                     RegularityError)
from .fitting import DEFAULT_WINDOW, FitResult, fit_exponential_rates
from .model import LQModel, TimeGrid, couple

PSD_TOL = 1e-9
BLOWUP_NORM = 1e12


def _T(x):
    return np.swapaxes(x, -1, -2)


def _sym(x):
    return 0.5 * (x + _T(x))


class Gain(NamedTuple):
    Theta: np.ndarray
    A_cl: np.ndarray
    C_cl: np.ndarray


def _gain_terms(model: LQModel, P: np.ndarray):
    """``Rtilde``, the bracket ``B'P + D'PC + S`` and ``Theta`` for stacked ``P``."""
    B, C, D = model.B, model.C, model.D
    DtP = _T(D) @ P
    Rt = model.R + DtP @ D
    N = _T(B) @ P + DtP @ C + model.S
    try:
        Theta = -np.linalg.solve(Rt, N)
    except np.linalg.LinAlgError as exc:
        raise RegularityError(f"R + D'PD is singular: {exc}") from None
    return Rt, N, Theta


def riccati_operator(model: LQModel, P: np.ndarray) -> np.ndarray:
    """Left side of the algebraic Riccati equation evaluated at ``P``.

    ``P`` may carry leading batch axes in front of the regime axis.
    """
    A, C = model.A, model.C
    Rt, N, Theta = _gain_terms(model, P)
    return couple(model.generator, P) + P @ A + _T(A) @ P + _T(C) @ P @ C + model.Q + _T(N) @ Theta


def dre_rhs(model: LQModel, P: np.ndarray) -> np.ndarray:
    """Time derivative of the DRE solution, ``dP/dt = -riccati_operator(P)``."""
    return -riccati_operator(model, P)


def regularity_margins(model: LQModel, P: np.ndarray) -> np.ndarray:
    Rt = model.R + _T(model.D) @ P @ model.D
    return np.linalg.eigvalsh(_sym(Rt))[..., 0]


def feedback_gain(model: LQModel, P, t=None) -> Gain:
    """Feedback gain and closed-loop matrices for a per-regime ``P``.

    ``P`` is a stacked array ``(..., m0, n, n)`` or a :class:`DRESolution`,
    in which case ``t`` selects the grid node.
    """
    if isinstance(P, DRESolution):
        if t is None:
            raise ValueError("t is required when passing a DRESolution")
        P = P.at(t)
    P = np.asarray(P, dtype=float)
    margin = regularity_margins(model, P)
    if np.min(margin) <= 0:
        raise RegularityError(f"R + D'PD not positive definite (margin {np.min(margin):.3g})")
    _, _, Theta = _gain_terms(model, P)
    return Gain(Theta, model.A + model.B @ Theta, model.C + model.D @ Theta)


def _rk4_backward(model, P, h):
    k1 = dre_rhs(model, P)
    k2 = dre_rhs(model, P - 0.5 * h * k1)
    k3 = dre_rhs(model, P - 0.5 * h * k2)
    k4 = dre_rhs(model, P - h * k3)
    return _sym(P - h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))


@dataclass(frozen=True)
class DRESolution:
    """``P_T(t, i)`` on the nodes of ``grid`` (shape ``(nodes, m0, n, n)``)."""

    model: LQModel
    grid: TimeGrid
    P: np.ndarray
    regularity_margin: float
    P_gap: Optional[np.ndarray] = None
    reference: Optional["ARESolution"] = None

    @property
    def T(self) -> float:
        return self.grid.t1

    def at(self, t: float) -> np.ndarray:
        return self.P[self.grid.index(t)]

    def derivative(self) -> np.ndarray:
        """``dP/dt`` at every node, from the Riccati right-hand side."""
        return dre_rhs(self.model, self.P)

    def midpoints(self) -> np.ndarray:
        """Cubic Hermite values of ``P`` at step midpoints."""
        dP = self.derivative()
        h = self.grid.step
        return _sym(0.5 * (self.P[:-1] + self.P[1:]) + h / 8.0 * (dP[:-1] - dP[1:]))

    def gains(self) -> Gain:
        return feedback_gain(self.model, self.P)

    def gap_midpoints(self) -> np.ndarray:
        """Cubic Hermite values of ``P_inf - P_T`` at step midpoints."""
        if self.P_gap is None:
            raise ValueError("solution was computed without a reference ARE solution")
        dG = gap_rhs(self.model, self.reference, self.P_gap)
        h = self.grid.step
        G = self.P_gap
        return _sym(0.5 * (G[:-1] + G[1:]) + h / 8.0 * (dG[:-1] - dG[1:]))

    def gain_gap(self, midpoints: bool = False) -> np.ndarray:
        """``Theta_inf - Theta_T`` computed from the gap itself, free of cancellation."""
        if self.P_gap is None:
            raise ValueError("solution was computed without a reference ARE solution")
        if midpoints:
            return _gain_gap(self.model, self.reference, self.reference.P_inf - self.gap_midpoints(),
                             self.gap_midpoints())
        return _gain_gap(self.model, self.reference, self.P, self.P_gap)

    def to_rows(self):
        """CSV rows ``t, regime (1-based), P entries row-major``."""
        t = self.grid.nodes
        n = self.model.n
        header = ["t", "regime"] + [f"P_{a + 1}{b + 1}" for a in range(n) for b in range(n)]
        rows = []
        for k, tk in enumerate(t):
            for i in range(self.model.m0):
                rows.append([tk, i + 1, *self.P[k, i].ravel()])
        return header, rows


def _gain_gap(model: LQModel, are: "ARESolution", P, G):
    """``Theta_inf - Theta_P = -(R + D'PD)^-1 (B'G + D'G C_inf)`` for ``G = P_inf - P``."""
    C_inf = model.C + model.D @ are.Theta_inf
    Rt = model.R + _T(model.D) @ P @ model.D
    return -np.linalg.solve(Rt, _T(model.B) @ G + _T(model.D) @ G @ C_inf)


def gap_rhs(model: LQModel, are: "ARESolution", G: np.ndarray) -> np.ndarray:
    """Time derivative of ``G = P_inf - P_T``.

    Writing the Riccati map at ``P`` as its value at ``P_inf`` minus a
    linear part and a completed square gives
    ``dG/dt = -(Lambda[G] + G A_inf + A_inf' G + C_inf' G C_inf) - dTheta' Rt dTheta``
    with ``dTheta = Theta_inf - Theta_P``; every term is proportional to
    ``G``, so small gaps keep full relative precision. The ARE residual of
    ``P_inf`` is neglected.
    """
    A_inf = model.A + model.B @ are.Theta_inf
    C_inf = model.C + model.D @ are.Theta_inf
    P = are.P_inf - G
    dTh = _gain_gap(model, are, P, G)
    Rt = model.R + _T(model.D) @ P @ model.D
    lin = couple(model.generator, G) + G @ A_inf + _T(A_inf) @ G + _T(C_inf) @ G @ C_inf
    return -lin - _T(dTh) @ Rt @ dTh


def _solve_dre_gap(model: LQModel, are: "ARESolution", grid: TimeGrid) -> np.ndarray:
    G = np.empty((grid.n_steps + 1, model.m0, model.n, model.n))
    G[-1] = are.P_inf
    h = grid.step
    f = lambda X: gap_rhs(model, are, X)
    for k in range(grid.n_steps, 0, -1):
        X = G[k]
        k1 = f(X)
        k2 = f(X - 0.5 * h * k1)
        k3 = f(X - 0.5 * h * k2)
        k4 = f(X - h * k3)
        G[k - 1] = _sym(X - h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
    return G


def solve_dre(model: LQModel, T: float, step: float,
              reference: Optional["ARESolution"] = None) -> DRESolution:
    """Integrate the coupled DRE backward from ``P(T) = 0`` with classical RK4.

    With an ARE ``reference`` the gap ``P_inf - P_T`` is integrated instead,
    from the gap equation, and ``P_T = P_inf - gap``. This keeps gaps far
    below machine precision of ``P`` itself resolvable.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    if not 0 < step <= T:
        raise ValueError("step must satisfy 0 < step <= T")
    grid = TimeGrid(0.0, T, step)
    if reference is not None:
        try:
            G = _solve_dre_gap(model, reference, grid)
        except (np.linalg.LinAlgError, RegularityError):
            raise RegularityError("regularity lost while integrating the Riccati gap") from None
        if not np.all(np.isfinite(G)):
            raise BlowUpError("Riccati gap integration produced non-finite values")
        P = _sym(reference.P_inf[None] - G)
        margins = regularity_margins(model, P).min(axis=1)
        if margins.min() <= 0:
            raise RegularityError(f"regularity lost at t={grid.nodes[np.nonzero(margins <= 0)[0][-1]]:.6g}")
        P.setflags(write=False)
        G.setflags(write=False)
        return DRESolution(model, grid, P, float(margins.min()), G, reference)
    nt = grid.n_steps + 1
    P = np.zeros((nt, model.m0, model.n, model.n))
    t = grid.nodes
    for k in range(grid.n_steps, 0, -1):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                nxt = _rk4_backward(model, P[k], step)
        except RegularityError:
            raise RegularityError(f"regularity lost at t={t[k]:.6g}") from None
        if not np.all(np.isfinite(nxt)):
            raise BlowUpError(f"DRE blew up before t={t[k - 1]:.6g}; last good node t={t[k]:.6g}",
                              last_good_time=float(t[k]))
        P[k - 1] = nxt
    margins = regularity_margins(model, P).min(axis=1)
    bad = np.nonzero(margins <= 0)[0]
    if bad.size:
        raise RegularityError(f"regularity lost at t={t[bad[-1]]:.6g}")
    P.setflags(write=False)
    return DRESolution(model, grid, P, float(margins.min()))


@dataclass(frozen=True)
class ARESolution:
    P_inf: np.ndarray
    Theta_inf: np.ndarray
    residual: float
    horizon_used: float
    regularity_margin: float
    spectral_abscissa: float
    tol: float

    def to_dict(self) -> dict:
        return {
            "P_inf": self.P_inf.tolist(),
            "Theta_inf": self.Theta_inf.tolist(),
            "residual": self.residual,
            "horizon_used": self.horizon_used,
            "regularity_margin": self.regularity_margin,
            "spectral_abscissa": self.spectral_abscissa,
            "tol": self.tol,
        }


def are_residual(model: LQModel, P: np.ndarray) -> float:
    res = riccati_operator(model, P)
    return float(np.sqrt(np.sum(res ** 2, axis=(-1, -2))).max())


def solve_are(model: LQModel, tol: float = 1e-10, step: float = 0.01,
              T_step: float = 5.0, T_max: float = 500.0) -> ARESolution:
    """Limit of ``P_T(0)`` as the horizon grows.

    The horizon is extended in chunks of ``T_step`` by continuing the
    autonomous backward integration. Convergence requires both the chunk
    increment (Frobenius norm over all regimes) and the Riccati residual to
    fall below ``tol``. Every increment must be positive semidefinite.
    """
    from .stability import is_stabilizer

    n_sub = int(round(T_step / step))
    if n_sub < 1 or abs(n_sub * step - T_step) > 1e-9 * T_step:
        raise ValueError("T_step must be a multiple of step")
    P = np.zeros((model.m0, model.n, model.n))
    T = 0.0
    while True:
        if T + T_step > T_max + 1e-9:
            raise NotStabilizableError(
                f"possibly not stabilizable: Riccati continuation did not converge by T_max={T_max}")
        Pn = P
        with np.errstate(over="raise", invalid="raise"):
            try:
                for _ in range(n_sub):
                    Pn = _rk4_backward(model, Pn, step)
                    if np.abs(Pn).max() > BLOWUP_NORM:
                        raise FloatingPointError
            except (FloatingPointError, RegularityError):
                raise NotStabilizableError(
                    f"possibly not stabilizable: Riccati solution diverged near T={T + T_step:g}") from None
        T += T_step
        incr = Pn - P
        low = np.linalg.eigvalsh(_sym(incr))[:, 0].min()
        if low < -PSD_TOL:
            raise NumericalIntegrityError(
                f"P_T(0) decreased when extending the horizon to T={T:g} (eigenvalue {low:.3g})")
        P = Pn
        if np.sqrt(np.sum(incr ** 2)) < tol and are_residual(model, P) <= tol:
            break
    residual = are_residual(model, P)
    margin = float(regularity_margins(model, P).min())
    if margin <= 0:
        raise RegularityError("ARE solution is not regular")
    _, _, Theta = _gain_terms(model, P)
    stable, rho = is_stabilizer(model, Theta)
    if not stable:
        raise NumericalIntegrityError(f"ARE gain is not a stabilizer (spectral abscissa {rho:.3g})")
    P.setflags(write=False)
    Theta.setflags(write=False)
    return ARESolution(P, Theta, residual, T, margin, rho, tol)


@dataclass(frozen=True)
class RiccatiGap:
    t: np.ndarray
    lag: np.ndarray
    P_gap: np.ndarray
    Theta_gap: np.ndarray
    fit: FitResult
    fit_gain: FitResult


def dre_are_gap(dre: DRESolution, are: ARESolution, window=DEFAULT_WINDOW) -> RiccatiGap:
    """Spectral-norm gaps ``P_inf - P_T(t)`` and ``Theta_inf - Theta_T(t)`` per node."""
    diff = dre.P_gap if dre.P_gap is not None else are.P_inf[None] - dre.P
    low = np.linalg.eigvalsh(_sym(diff))[..., 0].min()
    if low < -PSD_TOL:
        raise NumericalIntegrityError(f"P_T(t) exceeds P_inf (eigenvalue {low:.3g})")
    g = np.linalg.norm(diff, ord=2, axis=(-2, -1)).max(axis=1)
    if dre.P_gap is not None:
        dTh = dre.gain_gap()
    else:
        dTh = are.Theta_inf[None] - dre.gains().Theta
    h = np.linalg.norm(dTh, ord=2, axis=(-2, -1)).max(axis=1)
    t = dre.grid.nodes
    lag = dre.T - t
    return RiccatiGap(t, lag, g, h, fit_exponential_rates(lag, g, window),
                      fit_exponential_rates(lag, h, window))
