"""Offset functions carrying the nonhomogeneous terms into the feedback law.

With deterministic, regime-modulated signals the adjoint backward equation
reduces to a coupled linear ODE for per-regime vectors ``h(t, i)``::

    dh/dt + Lambda[h] + (A + B Theta)' h + phi = 0,
    phi = P b + (C + D Theta)' P sigma + Theta' r + q,

and the affine part of the optimal control is
``v = -(R + D'PD)^-1 (D'P sigma + B'h + r)``. The Brownian component of the
backward solution vanishes identically in this signal class.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import expm

from .errors import (ModelStructureError, NumericalIntegrityError, PaddingError)
from .fitting import DEFAULT_WINDOW, FitResult, fit_exponential_rates
from .model import Generator, LQModel, SignalSet, TimeGrid
from .riccati import ARESolution, DRESolution, feedback_gain
from .stability import DissipativityCertificate

PAD_CAP = 1000.0


def _T(x):
    return np.swapaxes(x, -1, -2)


def couple_vectors(gen: Generator, h: np.ndarray) -> np.ndarray:
    """Generator action on vector families shaped ``(..., m0, d)``."""
    off = gen.offdiag
    return np.einsum("ij,...ja->...ia", off, h) - off.sum(axis=1)[:, None] * h


def offset_forcing(model: LQModel, P, Theta, b, sigma, q, r) -> np.ndarray:
    """``phi = P b + (C + D Theta)' P sigma + Theta' r + q`` (broadcast over leading axes)."""
    C_cl = model.C + model.D @ Theta
    mv = lambda M, x: np.einsum("...ab,...b->...a", M, x)
    return mv(P, b) + mv(_T(C_cl), mv(P, sigma)) + mv(_T(Theta), r) + q


def affine_term(model: LQModel, P, h, sigma, r) -> np.ndarray:
    """``v = -(R + D'PD)^-1 (D'P sigma + B'h + r)``."""
    mv = lambda M, x: np.einsum("...ab,...b->...a", M, x)
    Dt = _T(model.D)
    Rt = model.R + Dt @ P @ model.D
    rhs = mv(Dt @ P, sigma) + mv(_T(model.B), h) + r
    return -np.linalg.solve(Rt, rhs[..., None])[..., 0]


@dataclass(frozen=True)
class OffsetSolution:
    """Offsets on ``grid``.

    ``h``, ``phi`` are ``(nodes, m0, n)``; ``v`` is ``(nodes, m0, m)``.
    Node values of ``phi`` and ``v`` are right-continuous (they use the
    signals of the step starting at the node; the final node uses the last
    step). ``v_stages`` holds ``v`` at the left end, midpoint and right end
    of each step with that step's signals, which is what the moment
    integrators consume. ``jump[k, i, j] = h(t_k, j) - h(t_k, i)``.
    """

    grid: TimeGrid
    h: np.ndarray
    jump: np.ndarray
    v: np.ndarray
    phi: np.ndarray
    kind: str
    Theta_nodes: np.ndarray
    Theta_mid: np.ndarray
    v_stages: np.ndarray
    h_tail: Optional[np.ndarray] = None

    @property
    def diffusion_offset(self) -> np.ndarray:
        """The Brownian integrand of the backward equation; zero for deterministic signals."""
        return np.zeros(self.h.shape + (self.h.shape[-1],))

    def restricted(self, t1: float) -> "OffsetSolution":
        k = self.grid.index(t1)
        grid = TimeGrid(self.grid.t0, t1, self.grid.step)
        return OffsetSolution(grid, self.h[:k + 1], self.jump[:k + 1], self.v[:k + 1],
                              self.phi[:k + 1], self.kind, self.Theta_nodes[:k + 1],
                              self.Theta_mid[:k], self.v_stages[:k], self.h_tail)

    def to_rows(self):
        n, m = self.h.shape[-1], self.v.shape[-1]
        header = (["t", "regime"] + [f"h_{a + 1}" for a in range(n)]
                  + [f"v_{a + 1}" for a in range(m)])
        rows = []
        for k, tk in enumerate(self.grid.nodes):
            for i in range(self.h.shape[1]):
                rows.append([tk, i + 1, *self.h[k, i], *self.v[k, i]])
        return header, rows


def _backward_sweep(model: LQModel, grid: TimeGrid, P_st, Theta_st, sig, h_end, kind,
                    h_tail=None) -> OffsetSolution:
    """RK4 sweep from ``grid.t1`` down to ``grid.t0``.

    ``P_st``/``Theta_st`` hold (left, mid, right) stage values per step,
    shapes ``(nsteps, 3, m0, ., .)``; ``sig`` is the per-step signal tuple.
    """
    gen = model.generator
    b, sigma, q, r = (s[:, None] for s in sig)
    phi_st = offset_forcing(model, P_st, Theta_st, b, sigma, q, r)
    AclT = _T(model.A + model.B @ Theta_st)

    def rhs(k, s, h):
        return -(couple_vectors(gen, h) + np.einsum("iab,ib->ia", AclT[k, s], h) + phi_st[k, s])

    ns = grid.n_steps
    dt = grid.step
    h = np.empty((ns + 1,) + h_end.shape)
    h[ns] = h_end
    h_mid = np.empty((ns,) + h_end.shape)
    for k in range(ns - 1, -1, -1):
        h1 = h[k + 1]
        k1 = rhs(k, 2, h1)
        k2 = rhs(k, 1, h1 - 0.5 * dt * k1)
        k3 = rhs(k, 1, h1 - 0.5 * dt * k2)
        k4 = rhs(k, 0, h1 - dt * k3)
        h0 = h1 - dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        h[k] = h0
        h_mid[k] = 0.5 * (h0 + h1) + dt / 8.0 * (rhs(k, 0, h0) - k1)
    if not np.all(np.isfinite(h)):
        raise NumericalIntegrityError("offset integration produced non-finite values")

    h_st = np.stack([h[:-1], h_mid, h[1:]], axis=1)
    v_st = affine_term(model, P_st, h_st, sigma, r)
    v = np.concatenate([v_st[:, 0], v_st[-1:, 2]], axis=0)
    phi = np.concatenate([phi_st[:, 0], phi_st[-1:, 2]], axis=0)
    Theta_nodes = np.concatenate([Theta_st[:, 0], Theta_st[-1:, 2]], axis=0)
    jump = h[:, None, :, :] - h[:, :, None, :]
    for arr in (h, jump, v, phi, Theta_nodes, v_st):
        arr.setflags(write=False)
    return OffsetSolution(grid, h, jump, v, phi, kind, Theta_nodes,
                          np.ascontiguousarray(Theta_st[:, 1]), v_st, h_tail)


def _check_dims(model: LQModel, signals: SignalSet):
    if signals.dims != (model.m0, model.n, model.m):
        raise ModelStructureError(
            f"signals have dimensions {signals.dims}, model has {(model.m0, model.n, model.m)}")


def solve_offset_finite(model: LQModel, dre: DRESolution, signals: SignalSet) -> OffsetSolution:
    """Finite-horizon offset on the DRE grid with ``h(T) = 0``.

    Uses the DRE's RK4 stepping; Riccati values at step midpoints come from
    cubic Hermite interpolation with the exact Riccati slope at the nodes.
    """
    _check_dims(model, signals)
    if (dre.model.m0, dre.model.n, dre.model.m) != (model.m0, model.n, model.m):
        raise ModelStructureError("DRE solution belongs to a model of different dimensions")
    grid = dre.grid
    sig = signals.on_steps(grid)
    P = dre.P
    Pm = dre.midpoints()
    Th = dre.gains().Theta
    Thm = feedback_gain(model, Pm).Theta
    P_st = np.stack([P[:-1], Pm, P[1:]], axis=1)
    Th_st = np.stack([Th[:-1], Thm, Th[1:]], axis=1)
    return _backward_sweep(model, grid, P_st, Th_st, sig, np.zeros((model.m0, model.n)), "finite")


def stationary_operator(model: LQModel, Theta) -> np.ndarray:
    """Matrix of ``h -> Lambda[h] + (A + B Theta)' h`` on stacked ``(m0*n,)`` vectors."""
    gen = model.generator
    n, m0 = model.n, model.m0
    A_cl = model.A + model.B @ np.asarray(Theta)
    L = np.kron(gen.offdiag, np.eye(n)) - np.kron(np.diag(gen.exit_rates), np.eye(n))
    for i in range(m0):
        L[i * n:(i + 1) * n, i * n:(i + 1) * n] += A_cl[i].T
    return L


def solve_offset_infinite(model: LQModel, are: ARESolution, cert: DissipativityCertificate,
                          signals: SignalSet, T_max: float, tol: float = 1e-10,
                          step: float = 1e-2) -> OffsetSolution:
    """Bounded offset for the infinite-horizon law, returned on ``[0, T_max]``.

    The backward equation is started from zero at ``T_end + T_pad`` with
    ``T_pad = 8 / delta * ln(1 / tol)``. With a constant tail the padded
    stretch has constant coefficients and is propagated exactly by a matrix
    exponential; the result is checked against the stationary tail value.
    Without a tail the signals must cover the padded horizon, which is capped
    at ``PAD_CAP``.
    """
    _check_dims(model, signals)
    if not 0 < tol < 1:
        raise ValueError("tol must lie in (0, 1)")
    T_pad = 8.0 / cert.delta * np.log(1.0 / tol)
    P = np.asarray(are.P_inf)
    Th = np.asarray(are.Theta_inf)
    m0, n = model.m0, model.n
    bp_end = signals.last_breakpoint
    if signals.has_tail:
        T_end = max(T_max, bp_end)
        T_end = step * np.ceil(T_end / step - 1e-9)
        tail = [v for v in signals.tail]
        phi_bar = offset_forcing(model, P, Th, *tail).reshape(-1)
        L = stationary_operator(model, Th)
        try:
            h_bar = -np.linalg.solve(L, phi_bar)
        except np.linalg.LinAlgError:
            raise NumericalIntegrityError(
                "stationary offset system is singular: the infinite-horizon loop is not stable") from None
        aug = np.zeros((m0 * n + 1, m0 * n + 1))
        aug[:-1, :-1] = L
        aug[:-1, -1] = phi_bar
        h_end = (expm(aug * T_pad)[:-1, -1])
        err = np.abs(h_end - h_bar).max()
        if err > 10 * tol * (1 + np.abs(h_bar).max()):
            raise NumericalIntegrityError(
                f"padded offset misses the stationary tail value by {err:.3g}")
        h_end = h_end.reshape(m0, n)
        h_tail = h_bar.reshape(m0, n)
    else:
        if T_pad > PAD_CAP:
            raise PaddingError(f"cannot certify padding: required padding {T_pad:.4g} exceeds cap {PAD_CAP}")
        T_end = step * np.ceil((T_max + T_pad) / step - 1e-9)
        if T_end > bp_end + 1e-9:
            raise PaddingError(
                f"cannot certify padding: signals end at {bp_end:g}, padded horizon needs {T_end:g}")
        h_end = np.zeros((m0, n))
        h_tail = None
    grid = TimeGrid(0.0, float(T_end), step)
    sig = signals.on_steps(grid)
    P_st = np.broadcast_to(P, (grid.n_steps, 3) + P.shape)
    Th_st = np.broadcast_to(Th, (grid.n_steps, 3) + Th.shape)
    sol = _backward_sweep(model, grid, P_st, Th_st, sig, h_end, "infinite", h_tail)
    T_cut = step * np.round(T_max / step)
    if T_cut < grid.t1 - 1e-9 * grid.t1:
        sol = sol.restricted(float(T_cut))
    return sol


@dataclass(frozen=True)
class OffsetGap:
    t: np.ndarray
    lag: np.ndarray
    e_h: np.ndarray
    e_v: np.ndarray
    fit_h: FitResult
    fit_v: FitResult


def offset_gap(fin: OffsetSolution, inf: OffsetSolution, window=DEFAULT_WINDOW) -> OffsetGap:
    """Max-over-regime gaps between finite and infinite offsets on the common nodes."""
    if abs(fin.grid.step - inf.grid.step) > 1e-12 * fin.grid.step or fin.grid.t0 != inf.grid.t0:
        raise ValueError("offset grids are not compatible")
    k = min(fin.grid.n_steps, inf.grid.n_steps) + 1
    if k < 1:
        raise ValueError("offset grids do not overlap")
    t = fin.grid.nodes[:k]
    e_h = np.linalg.norm(fin.h[:k] - inf.h[:k], axis=-1).max(axis=1)
    e_v = np.linalg.norm(fin.v[:k] - inf.v[:k], axis=-1).max(axis=1)
    lag = fin.grid.t1 - t
    return OffsetGap(t, lag, e_h, e_v, fit_exponential_rates(lag, e_h, window),
                     fit_exponential_rates(lag, e_v, window))
