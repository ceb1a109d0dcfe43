"""Exact moments of closed-loop switching diffusions, a Monte Carlo oracle and cost quadrature.

For ``dX = (F X + f) dt + (G X + g) dW`` with coefficients switched by the
chain, the regime-weighted moments ``p(i) = P(alpha = i)``,
``m1(i) = E[X 1{alpha = i}]`` and ``M2(i) = E[X X' 1{alpha = i}]`` solve a
closed linear ODE system, integrated here with RK4 on the law's grid.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import BlowUpError, ModelStructureError
from .model import ChainSampler, Generator, LQModel, SignalSet, TimeGrid
from .offsets import OffsetSolution

BLOWUP_NORM = 1e150
DEFAULT_BATCH = 50_000
MAX_RATE_STEP = 0.1


def _T(x):
    return np.swapaxes(x, -1, -2)


def _mv(M, x):
    return np.einsum("...ab,...b->...a", M, x)


# ---------------------------------------------------------------------------
# feedback laws
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeedbackLaw:
    """Affine feedback ``u = Theta(t, i) x + v(t, i)`` on a grid.

    ``Theta``/``v`` hold node values; ``Theta_mid`` the step-midpoint gains;
    ``v_stages`` the (left, mid, right) affine terms of every step, built
    with that step's signals so jumps at breakpoints are resolved.
    """

    grid: TimeGrid
    Theta: np.ndarray
    Theta_mid: np.ndarray
    v: np.ndarray
    v_stages: np.ndarray

    @classmethod
    def from_offsets(cls, off: OffsetSolution) -> "FeedbackLaw":
        return cls(off.grid, off.Theta_nodes, off.Theta_mid, off.v, off.v_stages)

    @classmethod
    def constant(cls, grid: TimeGrid, Theta, v=None) -> "FeedbackLaw":
        Theta = np.asarray(Theta, dtype=float)
        if Theta.ndim != 3:
            raise ModelStructureError("Theta must be per-regime, shape (m0, m, n)")
        v = np.zeros(Theta.shape[:2]) if v is None else np.asarray(v, dtype=float)
        if v.shape != Theta.shape[:2]:
            raise ModelStructureError(f"v has shape {v.shape}, expected {Theta.shape[:2]}")
        ns = grid.n_steps
        return cls(grid, np.broadcast_to(Theta, (ns + 1,) + Theta.shape),
                   np.broadcast_to(Theta, (ns,) + Theta.shape),
                   np.broadcast_to(v, (ns + 1,) + v.shape),
                   np.broadcast_to(v, (ns, 3) + v.shape))

    def with_open_loop(self, w_steps, eps: float) -> "FeedbackLaw":
        """Add the regime-independent, piecewise-constant control ``eps * w`` (shape ``(n_steps, m)``)."""
        w = np.asarray(w_steps, dtype=float)
        ns = self.grid.n_steps
        if w.shape != (ns, self.v.shape[-1]):
            raise ModelStructureError(f"w must have shape {(ns, self.v.shape[-1])}, got {w.shape}")
        dv = eps * w
        v_nodes = self.v + np.concatenate([dv, dv[-1:]], axis=0)[:, None, :]
        return replace(self, v=v_nodes, v_stages=self.v_stages + dv[:, None, None, :])

    def stages_on(self, grid: TimeGrid):
        """(left, mid, right) gains and affine terms for every step of ``grid``."""
        if abs(grid.step - self.grid.step) > 1e-12 * grid.step or abs(grid.t0 - self.grid.t0) > 1e-12:
            raise ValueError("law grid is not compatible with the requested grid")
        ns = grid.n_steps
        if ns > self.grid.n_steps:
            raise ValueError(f"law covers [{self.grid.t0}, {self.grid.t1}], grid needs {grid.t1}")
        Th = np.stack([self.Theta[:ns], self.Theta_mid[:ns], self.Theta[1:ns + 1]], axis=1)
        return Th, self.v_stages[:ns]


# ---------------------------------------------------------------------------
# moment ODEs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MomentTrajectory:
    grid: TimeGrid
    p: np.ndarray
    m1: np.ndarray
    M2: np.ndarray

    @property
    def second_moment(self) -> np.ndarray:
        """``E|X(t)|^2`` per node."""
        return np.trace(self.M2, axis1=-2, axis2=-1).sum(axis=-1)

    @property
    def mean(self) -> np.ndarray:
        return self.m1.sum(axis=1)

    def to_rows(self):
        n = self.m1.shape[-1]
        header = (["t", "regime", "p"] + [f"m1_{a + 1}" for a in range(n)]
                  + [f"M2_{a + 1}{b + 1}" for a in range(n) for b in range(n)] + ["EX2"])
        ex2 = self.second_moment
        rows = []
        for k, tk in enumerate(self.grid.nodes):
            for i in range(self.p.shape[1]):
                rows.append([tk, i + 1, self.p[k, i], *self.m1[k, i], *self.M2[k, i].ravel(), ex2[k]])
        return header, rows


def _adjoint_rates(gen: Generator) -> np.ndarray:
    return gen.offdiag - np.diag(gen.exit_rates)


def integrate_moments(gen: Generator, grid: TimeGrid, F, f, G, g, p0, m10, M20) -> MomentTrajectory:
    """RK4 for the moment system with per-step stage coefficients.

    ``F, G`` have shape ``(n_steps, 3, m0, d, d)`` and ``f, g`` shape
    ``(n_steps, 3, m0, d)``, the three stages being the left end, midpoint
    and right end of each step.
    """
    lam = _adjoint_rates(gen)
    FT, GT = _T(F), _T(G)

    def rhs(k, s, p, m1, M2):
        Fk, fk, Gk, gk = F[k, s], f[k, s], G[k, s], g[k, s]
        dp = lam.T @ p
        dm1 = _mv(Fk, m1) + fk * p[:, None] + lam.T @ m1
        Gm = _mv(Gk, m1)
        fm = fk[:, :, None] * m1[:, None, :]
        gm = Gm[:, :, None] * gk[:, None, :]
        FM = Fk @ M2
        dM2 = (FM + _T(FM) + Gk @ M2 @ GT[k, s] + fm + _T(fm) + gm + _T(gm)
               + gk[:, :, None] * gk[:, None, :] * p[:, None, None]
               + np.einsum("ji,jab->iab", lam, M2))
        return dp, dm1, dM2

    ns, dt = grid.n_steps, grid.step
    p = np.empty((ns + 1,) + p0.shape)
    m1 = np.empty((ns + 1,) + m10.shape)
    M2 = np.empty((ns + 1,) + M20.shape)
    p[0], m1[0], M2[0] = p0, m10, M20
    t = grid.nodes
    for k in range(ns):
        y = (p[k], m1[k], M2[k])
        k1 = rhs(k, 0, *y)
        k2 = rhs(k, 1, *(a + 0.5 * dt * b for a, b in zip(y, k1)))
        k3 = rhs(k, 1, *(a + 0.5 * dt * b for a, b in zip(y, k2)))
        k4 = rhs(k, 2, *(a + dt * b for a, b in zip(y, k3)))
        new = [a + dt / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4) for a, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4)]
        if not all(np.all(np.isfinite(x)) for x in new) or np.abs(new[2]).max() > BLOWUP_NORM:
            raise BlowUpError(f"moment integration blew up after t={t[k]:.6g}", last_good_time=float(t[k]))
        p[k + 1], m1[k + 1] = new[0], new[1]
        M2[k + 1] = 0.5 * (new[2] + _T(new[2]))
    for arr in (p, m1, M2):
        arr.setflags(write=False)
    return MomentTrajectory(grid, p, m1, M2)


def _initial(m0, x0, i0, n):
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape != (n,):
        raise ModelStructureError(f"initial state has {x0.size} entries, expected {n}")
    if not 0 <= i0 < m0:
        raise ValueError(f"initial regime {i0} outside 0..{m0 - 1}")
    p0 = np.zeros(m0)
    p0[i0] = 1.0
    m10 = np.zeros((m0, n))
    m10[i0] = x0
    M20 = np.zeros((m0, n, n))
    M20[i0] = np.outer(x0, x0)
    return p0, m10, M20


def _coefficients(model: LQModel, Th, v, b, sigma):
    F = model.A + model.B @ Th
    G = model.C + model.D @ Th
    f = _mv(model.B, v) + b
    g = _mv(model.D, v) + sigma
    return F, f, G, g


def closed_loop_moments(model: LQModel, law: FeedbackLaw, signals: SignalSet, x0, i0: int,
                        grid: TimeGrid) -> MomentTrajectory:
    """Exact regime-weighted moments of the closed loop started at ``(x0, i0)``."""
    Th, v = law.stages_on(grid)
    b, sigma, _, _ = (s[:, None] for s in signals.on_steps(grid))
    F, f, G, g = _coefficients(model, Th, v, b, sigma)
    return integrate_moments(model.generator, grid, F, f, G, g, *_initial(model.m0, x0, i0, model.n))


@dataclass(frozen=True)
class JointMomentTrajectory:
    """Moments of ``Y = (X_a, X_b - X_a)`` for two laws driven by common noise and chain.

    ``ex_hat`` is ``E|X_b - X_a|^2`` and ``eu_hat`` is ``E|u_b - u_a|^2`` per node.
    """

    joint: MomentTrajectory
    ex_hat: np.ndarray
    eu_hat: np.ndarray
    n: int

    @property
    def grid(self) -> TimeGrid:
        return self.joint.grid

    def marginal_a(self) -> MomentTrajectory:
        n = self.n
        j = self.joint
        return MomentTrajectory(j.grid, j.p, j.m1[..., :n], j.M2[..., :n, :n])

    def marginal_b(self) -> MomentTrajectory:
        n = self.n
        j = self.joint
        E = np.hstack([np.eye(n), np.eye(n)])
        return MomentTrajectory(j.grid, j.p, _mv(E, j.m1), E @ j.M2 @ E.T)


def joint_difference_moments(model: LQModel, law_a: FeedbackLaw, law_b: FeedbackLaw,
                             signals: SignalSet, x0_a, x0_b, i0: int,
                             grid: TimeGrid, gain_gap=None) -> JointMomentTrajectory:
    """Joint moments of two closed loops sharing Brownian motion and chain.

    The difference ``X_b - X_a`` is carried as its own coordinate, so small
    gaps are never computed by cancellation of large moments. ``gain_gap``
    optionally supplies ``Theta_b - Theta_a`` as ``(node values, midpoint
    values)`` computed without cancellation; otherwise the gains are
    subtracted.
    """
    n, m0 = model.n, model.m0
    Tha, va = law_a.stages_on(grid)
    Thb, vb = law_b.stages_on(grid)
    b, sigma, _, _ = (s[:, None] for s in signals.on_steps(grid))
    Fa, fa, Ga, ga = _coefficients(model, Tha, va, b, sigma)
    Fb, _, Gb, _ = _coefficients(model, Thb, vb, b, sigma)
    ns = grid.n_steps
    if gain_gap is None:
        dTh = Thb - Tha
        dTh_nodes = law_b.Theta[:ns + 1] - law_a.Theta[:ns + 1]
    else:
        g_nodes, g_mid = (np.asarray(a) for a in gain_gap)
        dTh = np.stack([g_nodes[:ns], g_mid[:ns], g_nodes[1:ns + 1]], axis=1)
        dTh_nodes = g_nodes[:ns + 1]
    dv = vb - va
    shape = Fa.shape[:-2]
    F = np.zeros(shape + (2 * n, 2 * n))
    G = np.zeros_like(F)
    F[..., :n, :n], F[..., n:, :n], F[..., n:, n:] = Fa, model.B @ dTh, Fb
    G[..., :n, :n], G[..., n:, :n], G[..., n:, n:] = Ga, model.D @ dTh, Gb
    f = np.concatenate([fa, _mv(model.B, dv)], axis=-1)
    g = np.concatenate([ga, _mv(model.D, dv)], axis=-1)
    xa = np.asarray(x0_a, dtype=float).reshape(-1)
    xb = np.asarray(x0_b, dtype=float).reshape(-1)
    init = _initial(m0, np.concatenate([xa, xb - xa]), i0, 2 * n)
    traj = integrate_moments(model.generator, grid, F, f, G, g, *init)

    ex_hat = np.trace(traj.M2[..., n:, n:], axis1=-2, axis2=-1).sum(axis=-1)
    K = np.concatenate([dTh_nodes, law_b.Theta[:ns + 1]], axis=-1)
    dv_nodes = law_b.v[:ns + 1] - law_a.v[:ns + 1]
    quad = np.trace(K @ traj.M2 @ _T(K), axis1=-2, axis2=-1)
    lin = 2.0 * np.einsum("tia,tia->ti", dv_nodes, _mv(K, traj.m1))
    const = np.sum(dv_nodes ** 2, axis=-1) * traj.p
    eu_hat = (quad + lin + const).sum(axis=-1)
    # tiny negative values are round-off in a nonnegative quantity
    ex_hat = np.maximum(ex_hat, 0.0)
    eu_hat = np.maximum(eu_hat, 0.0)
    return JointMomentTrajectory(traj, ex_hat, eu_hat, n)


def stationary_moments(model: LQModel, Theta, v, b, sigma):
    """Stationary ``(p, m1, M2)`` of a time-invariant, mean-square stable closed loop."""
    from .stability import build_ms_generator

    gen = model.generator
    m0, n = model.m0, model.n
    F, f, G, g = _coefficients(model, np.asarray(Theta), np.asarray(v), np.asarray(b), np.asarray(sigma))
    lam = _adjoint_rates(gen)
    A_p = lam.T.copy()
    A_p[-1] = 1.0
    rhs = np.zeros(m0)
    rhs[-1] = 1.0
    p = np.linalg.solve(A_p, rhs)
    L1 = np.kron(lam.T, np.eye(n))
    for i in range(m0):
        L1[i * n:(i + 1) * n, i * n:(i + 1) * n] += F[i]
    m1 = np.linalg.solve(L1, -(f * p[:, None]).reshape(-1)).reshape(m0, n)
    op = build_ms_generator(F, G, gen)
    Gm = _mv(G, m1)
    fm = f[:, :, None] * m1[:, None, :]
    gm = Gm[:, :, None] * g[:, None, :]
    forcing = fm + _T(fm) + gm + _T(gm) + g[:, :, None] * g[:, None, :] * p[:, None, None]
    M2 = np.linalg.solve(op.matrix, -forcing.reshape(-1)).reshape(m0, n, n)
    return p, m1, 0.5 * (M2 + _T(M2))


# ---------------------------------------------------------------------------
# cost
# ---------------------------------------------------------------------------

def running_cost(model: LQModel, Theta, v, q, r, p, m1, M2) -> np.ndarray:
    """Expected running cost per regime for ``u = Theta x + v`` given moments."""
    Q, S, R = model.Q, model.S, model.R
    ThT = _T(Theta)
    tr = lambda M: np.trace(M, axis1=-2, axis2=-1)
    Sm = _mv(S, m1)
    RTh = R @ Theta
    Thm = _mv(Theta, m1)
    return (0.5 * tr(Q @ M2) + tr(ThT @ S @ M2) + np.sum(v * Sm, axis=-1)
            + 0.5 * tr(ThT @ RTh @ M2) + np.sum(v * _mv(RTh, m1), axis=-1)
            + 0.5 * np.sum(v * _mv(R, v), axis=-1) * p
            + np.sum(q * m1, axis=-1) + np.sum(r * (Thm + v * p[..., None]), axis=-1))


@dataclass(frozen=True)
class CostResult:
    J: float
    J_per_T: float


def evaluate_cost(model: LQModel, law: FeedbackLaw, signals: SignalSet, traj: MomentTrajectory) -> CostResult:
    """Trapezoid rule for the expected cost along ``traj``.

    Each step uses left and right end values computed with that step's law
    stages and signals, so breakpoints at nodes are integrated exactly.
    """
    grid = traj.grid
    Th, v = law.stages_on(grid)
    _, _, q, r = signals.on_steps(grid)
    ends = []
    for s, sl in ((0, slice(None, -1)), (2, slice(1, None))):
        c = running_cost(model, Th[:, s], v[:, s], q, r, traj.p[sl], traj.m1[sl], traj.M2[sl])
        ends.append(c.sum(axis=-1))
    J = float(np.sum(0.5 * grid.step * (ends[0] + ends[1])))
    return CostResult(J, J / (grid.t1 - grid.t0))


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MonteCarloMoments:
    """Empirical moments at ``times`` with standard errors of the mean."""

    times: np.ndarray
    n_paths: int
    p: np.ndarray
    m1: np.ndarray
    M2: np.ndarray
    second_moment: np.ndarray
    p_se: np.ndarray
    m1_se: np.ndarray
    M2_se: np.ndarray
    second_moment_se: np.ndarray

    def to_rows(self):
        n = self.m1.shape[-1]
        header = (["t", "regime", "p", "p_se"] + [f"m1_{a + 1}" for a in range(n)]
                  + [f"m1_{a + 1}_se" for a in range(n)]
                  + [f"M2_{a + 1}{b + 1}" for a in range(n) for b in range(n)]
                  + [f"M2_{a + 1}{b + 1}_se" for a in range(n) for b in range(n)] + ["EX2", "EX2_se"])
        rows = []
        for k, tk in enumerate(self.times):
            for i in range(self.p.shape[1]):
                rows.append([tk, i + 1, self.p[k, i], self.p_se[k, i], *self.m1[k, i], *self.m1_se[k, i],
                             *self.M2[k, i].ravel(), *self.M2_se[k, i].ravel(),
                             self.second_moment[k], self.second_moment_se[k]])
        return header, rows


def _simulate_batch(model, coef, x0, i0, grid, n, rng, rec_idx):
    """Euler-Maruyama with exact chain clocks for one batch.

    Returns, per channel, the batch mean and centred sum of squares at each
    record time.

    ``coef[k, i]`` stacks ``[F | f]`` over ``[G | g]`` for step ``k`` and regime
    ``i``, so one gather and one contraction advance every path.
    """
    m0, d = model.m0, model.n
    sampler = ChainSampler(model.generator, rng)
    X = np.tile(np.asarray(x0, dtype=float), (n, 1))
    state = np.full(n, i0, dtype=np.int64)
    t_nodes = grid.nodes
    clock = t_nodes[0] + sampler.holding(state)
    nrec = len(rec_idx)
    # per record time: batch mean and centred sum of squares of every channel
    stats = {}
    rec_pos = {k: j for j, k in enumerate(rec_idx)}

    def record(j):
        onehot = np.zeros((n, m0))
        onehot[np.arange(n), state] = 1.0
        outer = X[:, :, None] * X[:, None, :]
        channels = {
            "p": onehot,
            "m1": onehot[:, :, None] * X[:, None, :],
            "M2": onehot[:, :, None, None] * outer[:, None],
            "ex2": np.sum(X ** 2, axis=1),
        }
        for key, vals in channels.items():
            mean = vals.mean(axis=0)
            css = ((vals - mean) ** 2).sum(axis=0)
            if key not in stats:
                stats[key] = (np.zeros((nrec,) + mean.shape), np.zeros((nrec,) + mean.shape))
            stats[key][0][j] = mean
            stats[key][1][j] = css

    def increments(x, reg, k, tau):
        xe = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
        out = np.einsum("pab,pb->pa", coef[k][reg], xe)
        dW = rng.standard_normal(x.shape[0]) * np.sqrt(tau)
        return out[:, :d] * np.reshape(tau, (-1, 1)) + out[:, d:] * dW[:, None]

    if 0 in rec_pos:
        record(rec_pos[0])
    dt = grid.step
    for k in range(grid.n_steps):
        t0, t1 = t_nodes[k], t_nodes[k + 1]
        jumps = clock < t1
        if not jumps.any():
            X += increments(X, state, k, dt)
        else:
            stop = np.where(jumps, clock, t1)
            X += increments(X, state, k, stop - t0)
            pending = np.nonzero(jumps)[0]
            now = stop[pending]
            while pending.size:
                state[pending] = sampler.jump(state[pending])
                clock[pending] = now + sampler.holding(state[pending])
                c = clock[pending]
                stop = np.minimum(c, t1)
                X[pending] += increments(X[pending], state[pending], k, stop - now)
                more = c < t1
                pending, now = pending[more], stop[more]
        if k + 1 in rec_pos:
            record(rec_pos[k + 1])
    return stats


def monte_carlo_simulate(model: LQModel, law: FeedbackLaw, signals: SignalSet, x0, i0: int,
                         grid: TimeGrid, n_paths: int, seed: int, record_times=None,
                         batch_size: int = DEFAULT_BATCH) -> MonteCarloMoments:
    """Euler-Maruyama estimate of the regime-weighted moments.

    The chain is simulated exactly with exponential holding times and the
    state step is split at every jump. Paths are processed in batches of
    ``batch_size``; batch ``j`` draws from ``SeedSequence(seed).spawn``'s
    ``j``-th child, so the output depends only on ``(seed, n_paths,
    batch_size)``. Coefficients on each step are the law's left-end values.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    rate = model.generator.exit_rates.max() if model.m0 else 0.0
    if grid.step * rate > MAX_RATE_STEP:
        raise ValueError(f"step {grid.step} too coarse for jump rate {rate:g}: "
                         f"need step * rate <= {MAX_RATE_STEP}")
    Th, v = law.stages_on(grid)
    b, sigma, _, _ = signals.on_steps(grid)
    F, f, G, g = _coefficients(model, Th[:, 0], v[:, 0], b, sigma)
    coef = np.concatenate([np.concatenate([F, f[..., None]], axis=-1),
                           np.concatenate([G, g[..., None]], axis=-1)], axis=-2)
    _initial(model.m0, x0, i0, model.n)
    if record_times is None:
        rec_idx = list(range(grid.n_steps + 1))
    else:
        rec_idx = sorted({grid.index(t) for t in np.atleast_1d(record_times)})
    n_batches = -(-n_paths // batch_size)
    children = np.random.SeedSequence(seed).spawn(n_batches)
    total = None
    count = 0
    for j, child in enumerate(children):
        size = min(batch_size, n_paths - j * batch_size)
        stats = _simulate_batch(model, coef, x0, i0, grid, size,
                                np.random.default_rng(child), rec_idx)
        if total is None:
            total = stats
        else:
            # pairwise merge of means and centred sums of squares
            merged = {}
            for key, (mb, cb) in stats.items():
                ma, ca = total[key]
                delta = mb - ma
                n_ab = count + size
                merged[key] = (ma + delta * size / n_ab, ca + cb + delta ** 2 * count * size / n_ab)
            total = merged
        count += size
    N = float(n_paths)

    def mean_se(key):
        mean, css = total[key]
        var = css / max(N - 1.0, 1.0)
        return mean, np.sqrt(var / N)

    p, p_se = mean_se("p")
    m1, m1_se = mean_se("m1")
    M2, M2_se = mean_se("M2")
    ex2, ex2_se = mean_se("ex2")
    times = grid.nodes[rec_idx]
    return MonteCarloMoments(times, n_paths, p, m1, M2, ex2, p_se, m1_se, M2_se, ex2_se)
