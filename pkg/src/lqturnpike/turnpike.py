"""Long-horizon experiments comparing finite-horizon optimal pairs with the infinite-horizon law."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ModelStructureError
from .fitting import FitResult, fit_exponential_rates
from .model import LQModel, SignalSet, TimeGrid, chain_law, validate_model
from .moments import (FeedbackLaw, closed_loop_moments, evaluate_cost, joint_difference_moments,
                      running_cost, stationary_moments)
from .offsets import affine_term, offset_gap, solve_offset_finite, solve_offset_infinite
from .riccati import ARESolution, solve_are, solve_dre
from .stability import DissipativityCertificate, dissipativity_certificate

__all__ = ["fit_exponential_rates", "TurnpikeReport", "HorizonResult", "run_turnpike_experiment",
           "check_integrable_case", "check_ergodic_case", "stationary_cost_rate", "discounted_profile"]

MIDPOINT_WINDOW = (1e-300, np.inf)
MIDPOINT_PROBE = 1e-4
MIDPOINT_RATIO = 0.5
BOUND_RTOL = 1e-9


def discounted_profile(values, step: float, rate: float) -> np.ndarray:
    """``H(t_k) = int e^{-rate |t_k - s|} xi(s) ds`` over the sampled range, by exact recursions.

    ``values`` are samples on a uniform grid; each step is integrated with
    the trapezoid rule applied to the discounted integrand.
    """
    xi = np.asarray(values, dtype=float)
    decay = np.exp(-rate * step)
    left = np.zeros_like(xi)
    right = np.zeros_like(xi)
    for k in range(1, xi.size):
        left[k] = decay * left[k - 1] + 0.5 * step * (decay * xi[k - 1] + xi[k])
    for k in range(xi.size - 2, -1, -1):
        right[k] = decay * right[k + 1] + 0.5 * step * (decay * xi[k + 1] + xi[k])
    return left + right


@dataclass(frozen=True)
class HorizonResult:
    """Per-node errors for one horizon ``T``."""

    T: float
    t: np.ndarray
    ex_hat: np.ndarray
    eu_hat: np.ndarray
    e_h: np.ndarray
    e_v: np.ndarray
    shape: np.ndarray

    @property
    def lhs(self) -> np.ndarray:
        return self.ex_hat + self.eu_hat

    @property
    def midpoint(self) -> float:
        k = int(np.argmin(np.abs(self.t - 0.5 * self.T)))
        return float(self.ex_hat[k])

    @property
    def integral(self) -> float:
        """``int_0^T (E|X_hat|^2 + E|u_hat|^2) dt`` by the trapezoid rule."""
        y = self.lhs
        return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(self.t)))


@dataclass
class TurnpikeReport:
    horizons: list
    delta_cert: float
    results: list
    midpoint_series: np.ndarray
    fitted: FitResult
    K_bound: float
    bound_check: list
    are: ARESolution
    cert: DissipativityCertificate
    ergodic: Optional[dict] = None
    checks: dict = field(default_factory=dict)
    K_calibration: dict = field(default_factory=dict)

    @property
    def bound_pass_rates(self) -> list:
        return [float(np.mean(b)) for b in self.bound_check]

    @property
    def bound_pass_rate(self) -> float:
        flags = np.concatenate(self.bound_check)
        return float(np.mean(flags))

    @property
    def integrals(self) -> list:
        return [r.integral for r in self.results]

    def midpoint_ratios(self) -> list:
        s = self.midpoint_series
        return [float(s[k + 1] / s[k]) if s[k] > 0 else 0.0 for k in range(len(s) - 1)]

    def midpoint_decay_ok(self) -> bool:
        """Each consecutive midpoint ratio is at most 0.5 once both values are below 1e-4."""
        s = self.midpoint_series
        for k in range(len(s) - 1):
            if s[k] < MIDPOINT_PROBE and s[k + 1] < MIDPOINT_PROBE and s[k + 1] > MIDPOINT_RATIO * s[k]:
                return False
        return True

    def error_rows(self):
        header = ["T", "t", "EXhat2", "EUhat2", "e_h", "e_v", "bound_ok"]
        rows = []
        for r, ok in zip(self.results, self.bound_check):
            for k in range(r.t.size):
                rows.append([r.T, r.t[k], r.ex_hat[k], r.eu_hat[k], r.e_h[k], r.e_v[k], int(ok[k])])
        return header, rows

    def midpoint_rows(self):
        return ["T", "EXhat2_mid"], [[T, v] for T, v in zip(self.horizons, self.midpoint_series)]

    def to_dict(self) -> dict:
        f = self.fitted
        return {
            "horizons": list(self.horizons),
            "delta_cert": self.delta_cert,
            "predicted_rate": self.delta_cert / 8.0,
            "midpoint_series": self.midpoint_series.tolist(),
            "midpoint_ratios": self.midpoint_ratios(),
            "midpoint_fit": {"K": f.K, "beta": f.beta, "r2": f.r2, "n_points": f.n_points,
                             "available": f.available},
            "K_bound": self.K_bound,
            "K_calibration": self.K_calibration,
            "bound_pass_rates": self.bound_pass_rates,
            "bound_pass_rate": self.bound_pass_rate,
            "integrals": self.integrals,
            "are": self.are.to_dict(),
            "certificate": self.cert.to_dict(),
            "ergodic": self.ergodic,
            "checks": self.checks,
        }


def _xi_nodes(model, signals, i0, t_end, step):
    """``xi`` on ``[0, t_end]``; zero where the signals are undefined."""
    grid = TimeGrid(0.0, t_end, step)
    t = grid.nodes
    p = chain_law(model.generator, i0, grid)
    inside = t <= signals.domain_end
    xi = np.zeros_like(t)
    if inside.any():
        xi[inside] = np.einsum("ti,ti->t", p[inside], signals.squared_norm(t[inside]))
    return xi


def run_turnpike_experiment(model: LQModel, signals: SignalSet, x, x_inf, i0: int,
                            T_list: Sequence[float], grid_step: float, tol: float = 1e-10,
                            are_step: float = 0.01) -> TurnpikeReport:
    """Measure finite-versus-infinite gaps for every horizon in ``T_list``.

    The bound constant ``K_bound`` is the smallest constant for which the
    predicted right-hand side dominates the observed errors on the shortest
    horizon and in the horizon-free limit (both systems on the
    infinite-horizon law); the remaining horizons are then checked against
    it node by node.
    The predicted right-hand side uses ``delta_cert`` with the exponents
    ``delta/2`` (initial layer), ``delta/8`` (terminal layer) and ``delta/4``
    (signal profile).
    """
    T_list = [float(T) for T in T_list]
    if not T_list or any(b <= a for a, b in zip(T_list, T_list[1:])):
        raise ValueError("T_list must be nonempty and strictly increasing")
    report = validate_model(model)
    if not report.passed:
        raise ModelStructureError("model fails validation:\n" + str(report))
    x = np.asarray(x, dtype=float).reshape(-1)
    x_inf = np.asarray(x_inf, dtype=float).reshape(-1)
    are = solve_are(model, tol=tol, step=are_step)
    cert = dissipativity_certificate(model, are.Theta_inf)
    delta = cert.delta
    T_max = T_list[-1]
    off_inf = solve_offset_infinite(model, are, cert, signals, T_max, tol=tol, step=grid_step)
    law_inf = FeedbackLaw.from_offsets(off_inf)

    pad = 4.0 / delta * np.log(1e16)
    t_ext = grid_step * np.ceil((T_max + pad) / grid_step)
    H_all = discounted_profile(_xi_nodes(model, signals, i0, t_ext, grid_step), grid_step, delta / 4.0)
    dx2 = float(np.sum((x_inf - x) ** 2))
    x2 = float(np.sum(x ** 2))

    results = []
    for T in T_list:
        dre = solve_dre(model, T, grid_step, reference=are)
        off = solve_offset_finite(model, dre, signals)
        law = FeedbackLaw.from_offsets(off)
        joint = joint_difference_moments(model, law, law_inf, signals, x, x_inf, i0, dre.grid,
                                         gain_gap=(dre.gain_gap(), dre.gain_gap(midpoints=True)))
        gap = offset_gap(off, off_inf)
        t = dre.grid.nodes
        H = H_all[:t.size]
        shape = (np.exp(-0.5 * delta * t) * dx2
                 + np.exp(-delta / 8.0 * (T - t)) * (np.exp(-0.25 * delta * t) * x2 + H))
        results.append(HorizonResult(T, t, joint.ex_hat, joint.eu_hat, gap.e_h, gap.e_v, shape))

    # K is calibrated on the shortest horizon and on the horizon-free limit in
    # which both systems use the infinite-horizon law (only the initial layer
    # survives); intermediate and longer horizons are then out-of-sample.
    first = results[0]
    grid1 = TimeGrid(0.0, T_list[0], grid_step)
    zero_gap = np.zeros((grid1.n_steps + 1,) + are.Theta_inf.shape)
    limit = joint_difference_moments(model, law_inf, law_inf, signals, x, x_inf, i0, grid1,
                                     gain_gap=(zero_gap, zero_gap[:-1]))
    limit_lhs = limit.ex_hat + limit.eu_hat
    limit_shape = np.exp(-0.5 * delta * grid1.nodes) * dx2
    K_short = _max_ratio(first.lhs, first.shape)
    K_limit = _max_ratio(limit_lhs, limit_shape)
    K_bound = max(K_short, K_limit)
    checks = [r.lhs <= K_bound * r.shape * (1 + BOUND_RTOL) for r in results]
    mids = np.array([r.midpoint for r in results])
    fit = fit_exponential_rates(np.array(T_list), mids, MIDPOINT_WINDOW)
    return TurnpikeReport(T_list, delta, results, mids, fit, K_bound, checks, are, cert,
                          K_calibration={"shortest_horizon": K_short, "horizon_free": K_limit})


def _max_ratio(lhs, shape) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(shape > 0, lhs / shape, np.where(lhs > 0, np.inf, 0.0))
    return float(ratio.max())


@dataclass(frozen=True)
class Verdict:
    passed: bool
    message: str
    values: dict


def check_integrable_case(report: TurnpikeReport, signals: SignalSet, fraction: float = 0.05) -> Verdict:
    """``I(T)`` must fall to at most ``fraction`` of its first value by the last horizon."""
    I = np.array(report.integrals)
    if I[0] == 0.0:
        passed = bool(np.all(I == 0.0))
    else:
        passed = bool(I[-1] <= fraction * I[0])
    if signals.has_tail and any(np.any(v) for v in signals.tail):
        note = "signals have a nonzero tail; the integrable-case hypothesis does not hold"
    else:
        note = "integrable signals"
    msg = (f"I(T) from {I[0]:.6g} (T={report.horizons[0]:g}) to {I[-1]:.6g} "
           f"(T={report.horizons[-1]:g}); {note}")
    return Verdict(passed, msg, {"T": list(report.horizons), "I": I.tolist()})


def stationary_cost_rate(model: LQModel, are: ARESolution, h_tail, signals: SignalSet) -> float:
    """Long-run average cost of the infinite-horizon law under constant tail signals.

    Evaluates the running cost at the stationary moments, obtained by
    linear solves rather than time integration.
    """
    if not signals.has_tail:
        raise ValueError("stationary cost needs constant tail signals")
    b, sigma, q, r = signals.tail
    v = affine_term(model, are.P_inf, h_tail, sigma, r)
    p, m1, M2 = stationary_moments(model, are.Theta_inf, v, b, sigma)
    return float(running_cost(model, are.Theta_inf, v, q, r, p, m1, M2).sum())


def check_ergodic_case(model: LQModel, signals: SignalSet, x, i0: int, T_list: Sequence[float],
                       grid_step: float = 0.01, tol: float = 1e-10) -> Verdict:
    """Average cost of the infinite-horizon law on growing windows.

    The Cesaro limit is estimated as the slope of ``J(T)`` between the two
    largest horizons, which removes the transient constant in
    ``J(T) = c T + d + o(1)``. Passes when ``|J/T - limit|`` is
    non-increasing in ``T``.
    """
    T_list = [float(T) for T in T_list]
    if len(T_list) < 2 or any(b <= a for a, b in zip(T_list, T_list[1:])):
        raise ValueError("T_list needs at least two increasing horizons")
    are = solve_are(model, tol=tol)
    cert = dissipativity_certificate(model, are.Theta_inf)
    off = solve_offset_infinite(model, are, cert, signals, T_list[-1], tol=tol, step=grid_step)
    law = FeedbackLaw.from_offsets(off)
    J = []
    for T in T_list:
        grid = TimeGrid(0.0, T, grid_step)
        traj = closed_loop_moments(model, law, signals, x, i0, grid)
        J.append(evaluate_cost(model, law, signals, traj).J)
    J = np.array(J)
    T_arr = np.array(T_list)
    avg = J / T_arr
    limit = float((J[-1] - J[-2]) / (T_arr[-1] - T_arr[-2]))
    dev = np.abs(avg - limit)
    passed = bool(np.all(np.diff(dev) <= 1e-12 * (1 + abs(limit))))
    values = {"T": T_list, "J": J.tolist(), "J_per_T": avg.tolist(), "limit": limit}
    if signals.has_tail and off.h_tail is not None:
        values["stationary_rate"] = stationary_cost_rate(model, are, off.h_tail, signals)
    msg = f"J/T at T={T_list[-1]:g}: {avg[-1]:.8g}; extrapolated limit {limit:.8g}"
    return Verdict(passed, msg, values)
