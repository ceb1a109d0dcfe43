"""Problem data for regime-switching linear-quadratic control.

Regimes are indexed ``0 .. m0-1`` inside the Python API. File formats and
the command line use ``1 .. m0`` and convert on the way in.

Per-regime matrices are stored as stacked arrays with the regime on the
leading axis, e.g. ``A.shape == (m0, n, n)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import expm

from .errors import ModelStructureError

ROW_SUM_TOL = 1e-12
PD_TOL = 0.0


def _frozen(a, ndim=None, name="array"):
    arr = np.array(a, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ModelStructureError(f"{name} must have {ndim} dimensions, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Generator:
    """Transition-rate matrix of a finite continuous-time Markov chain."""

    lam: np.ndarray

    def __post_init__(self):
        lam = _frozen(self.lam, 2, "lambda")
        if lam.shape[0] != lam.shape[1] or lam.shape[0] < 1:
            raise ModelStructureError(f"lambda must be square and non-empty, got shape {lam.shape}")
        object.__setattr__(self, "lam", lam)

    @property
    def m0(self) -> int:
        return self.lam.shape[0]

    @property
    def offdiag(self) -> np.ndarray:
        return self.lam - np.diag(np.diag(self.lam))

    @property
    def exit_rates(self) -> np.ndarray:
        """Total jump intensity out of each regime."""
        return self.offdiag.sum(axis=1)


@dataclass(frozen=True)
class LQModel:
    """Coefficients and weights of the controlled switching diffusion.

    Shapes: ``A, C, Q`` are ``(m0, n, n)``; ``B, D`` are ``(m0, n, m)``;
    ``S`` is ``(m0, m, n)``; ``R`` is ``(m0, m, m)``.
    """

    generator: Generator
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    S: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "C", "D", "Q", "S", "R"):
            object.__setattr__(self, name, _frozen(getattr(self, name), 3, name))
        m0 = self.generator.m0
        n = self.A.shape[1]
        m = self.B.shape[2]
        expected = {
            "A": (n, n), "B": (n, m), "C": (n, n), "D": (n, m),
            "Q": (n, n), "S": (m, n), "R": (m, m),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape[0] != m0:
                raise ModelStructureError(
                    f"{name} has {arr.shape[0]} regimes but the generator has {m0}")
            for i in range(m0):
                if arr[i].shape != shape:
                    raise ModelStructureError(
                        f"{name} in regime {i + 1} has shape {arr[i].shape}, expected {shape}")

    @property
    def m0(self) -> int:
        return self.generator.m0

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def m(self) -> int:
        return self.B.shape[2]

    @classmethod
    def from_regimes(cls, lam, regimes: Sequence[dict]) -> "LQModel":
        """Build a model from a generator and a list of per-regime dicts."""
        gen = Generator(lam)
        if len(regimes) != gen.m0:
            raise ModelStructureError(f"{len(regimes)} regime blocks for a generator of size {gen.m0}")
        stacked = {}
        for name in ("A", "B", "C", "D", "Q", "S", "R"):
            mats = []
            for i, reg in enumerate(regimes):
                if name not in reg:
                    raise ModelStructureError(f"regime {i + 1} is missing matrix {name}")
                mat = np.atleast_2d(np.asarray(reg[name], dtype=float))
                mats.append(mat)
            shapes = {mat.shape for mat in mats}
            if len(shapes) != 1:
                bad = next(i for i, mat in enumerate(mats) if mat.shape != mats[0].shape)
                raise ModelStructureError(
                    f"{name} in regime {bad + 1} has shape {mats[bad].shape}, "
                    f"regime 1 has {mats[0].shape}")
            stacked[name] = np.stack(mats)
        return cls(gen, **stacked)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t0, t0 + step, ..., t1``."""

    t0: float
    t1: float
    step: float
    n_steps: int = field(init=False)

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError(f"step must be positive, got {self.step}")
        if not self.t1 > self.t0:
            raise ValueError(f"t1 must exceed t0, got [{self.t0}, {self.t1}]")
        ratio = (self.t1 - self.t0) / self.step
        k = int(round(ratio))
        if k < 1 or abs(k - ratio) > 1e-7 * max(1.0, ratio):
            raise ValueError(f"interval length {self.t1 - self.t0} is not a multiple of step {self.step}")
        object.__setattr__(self, "n_steps", k)

    @property
    def nodes(self) -> np.ndarray:
        t = self.t0 + self.step * np.arange(self.n_steps + 1)
        t[-1] = self.t1
        return t

    @property
    def midpoints(self) -> np.ndarray:
        t = self.nodes
        return 0.5 * (t[1:] + t[:-1])

    def __len__(self):
        return self.n_steps + 1

    def index(self, t: float) -> int:
        """Index of the node at time ``t`` (must lie on the grid)."""
        k = int(round((t - self.t0) / self.step))
        if k < 0 or k > self.n_steps or abs(self.t0 + k * self.step - t) > 1e-7 * max(1.0, abs(t)):
            raise ValueError(f"t={t} is not a node of {self}")
        return k


_FIELDS = ("b", "sigma", "q", "r")


@dataclass(frozen=True)
class SignalSet:
    """Regime-modulated, piecewise-constant nonhomogeneous terms.

    On ``[breakpoints[k], breakpoints[k+1])`` regime ``i`` sees ``b[k, i]``,
    ``sigma[k, i]``, ``q[k, i]`` and ``r[k, i]``. Past the last breakpoint the
    ``tail`` values apply when present; otherwise the signals are undefined
    there. Functions are right-continuous at breakpoints.
    """

    breakpoints: np.ndarray
    b: np.ndarray
    sigma: np.ndarray
    q: np.ndarray
    r: np.ndarray
    tail: Optional[tuple] = None

    def __post_init__(self):
        bp = _frozen(self.breakpoints, 1, "breakpoints")
        if bp.size < 1 or np.any(np.diff(bp) <= 0):
            raise ModelStructureError("breakpoints must be non-empty and strictly increasing")
        object.__setattr__(self, "breakpoints", bp)
        k = bp.size - 1
        for name in _FIELDS:
            arr = _frozen(getattr(self, name), 3, name)
            if arr.shape[0] != k:
                raise ModelStructureError(f"{name} has {arr.shape[0]} intervals, breakpoints define {k}")
            object.__setattr__(self, name, arr)
        if self.tail is not None:
            tail = tuple(_frozen(v, 2, f"tail {nm}") for nm, v in zip(_FIELDS, self.tail))
            object.__setattr__(self, "tail", tail)
        m0, n, m = self.dims
        shapes = [(m0, n), (m0, n), (m0, n), (m0, m)]
        for j, name in enumerate(_FIELDS):
            if getattr(self, name).shape[1:] != shapes[j]:
                raise ModelStructureError(f"{name} has per-interval shape {getattr(self, name).shape[1:]}, "
                                          f"expected {shapes[j]}")
            if self.tail is not None and self.tail[j].shape != shapes[j]:
                raise ModelStructureError(f"tail {name} has shape {self.tail[j].shape}, expected {shapes[j]}")
        for name in _FIELDS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ModelStructureError(f"{name} has non-finite values")

    @property
    def dims(self) -> tuple[int, int, int]:
        src = self.tail if self.b.shape[0] == 0 else (self.b[0], self.sigma[0], self.q[0], self.r[0])
        if src is None:
            raise ModelStructureError("a signal set needs at least one interval or a tail")
        return src[0].shape[0], src[0].shape[1], src[3].shape[1]

    @property
    def has_tail(self) -> bool:
        return self.tail is not None

    @property
    def last_breakpoint(self) -> float:
        return float(self.breakpoints[-1])

    @property
    def domain_end(self) -> float:
        return np.inf if self.has_tail else self.last_breakpoint

    # -- constructors -------------------------------------------------

    @classmethod
    def zeros(cls, m0: int, n: int, m: int) -> "SignalSet":
        z = np.zeros((0, m0, n))
        tail = (np.zeros((m0, n)), np.zeros((m0, n)), np.zeros((m0, n)), np.zeros((m0, m)))
        return cls(np.array([0.0]), z, z, z, np.zeros((0, m0, m)), tail)

    @classmethod
    def constant(cls, m0, n, m, b=None, sigma=None, q=None, r=None) -> "SignalSet":
        """Time-constant signals; each argument is ``(n,)`` or per-regime ``(m0, n)``."""
        tail = tuple(_broadcast_regimes(v, m0, d) for v, d in zip((b, sigma, q, r), (n, n, n, m)))
        z = np.zeros((0, m0, n))
        return cls(np.array([0.0]), z, z, z, np.zeros((0, m0, m)), tail)

    @classmethod
    def piecewise(cls, breakpoints, m0, n, m, b=None, sigma=None, q=None, r=None,
                  tail: Optional[dict] = None) -> "SignalSet":
        """Piecewise-constant signals.

        ``b`` etc. are sequences with one entry per interval, each entry
        broadcastable to ``(m0, dim)``. ``tail`` is a dict with any of the
        keys ``b, sigma, q, r``; missing keys default to zero.
        """
        bp = np.asarray(breakpoints, dtype=float)
        k = bp.size - 1
        vals = []
        for v, d in zip((b, sigma, q, r), (n, n, n, m)):
            if v is None:
                vals.append(np.zeros((k, m0, d)))
            else:
                if len(v) != k:
                    raise ModelStructureError(f"expected {k} interval values, got {len(v)}")
                vals.append(np.stack([_broadcast_regimes(x, m0, d) for x in v]) if k else np.zeros((0, m0, d)))
        tail_t = None
        if tail is not None:
            tail_t = tuple(_broadcast_regimes(tail.get(nm), m0, d) for nm, d in zip(_FIELDS, (n, n, n, m)))
        return cls(bp, *vals, tail=tail_t)

    # -- evaluation ---------------------------------------------------

    def _piece_index(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        k = np.searchsorted(self.breakpoints, t, side="right") - 1
        if np.any(k < 0):
            raise ValueError(f"signals are undefined before t={self.breakpoints[0]}")
        nint = self.b.shape[0]
        if not self.has_tail:
            beyond = t > self.last_breakpoint * (1 + 1e-12) + 1e-12
            if np.any(beyond):
                raise ValueError(f"signals are undefined after t={self.last_breakpoint}")
            k = np.minimum(k, nint - 1)
        return k

    def evaluate(self, t) -> tuple[np.ndarray, ...]:
        """Values ``(b, sigma, q, r)`` at times ``t``; each has shape ``t.shape + (m0, dim)``."""
        t = np.asarray(t, dtype=float)
        k = self._piece_index(t)
        nint = self.b.shape[0]
        out = []
        for j, name in enumerate(_FIELDS):
            table = getattr(self, name)
            if self.has_tail:
                table = np.concatenate([table, self.tail[j][None]], axis=0)
            out.append(table[np.minimum(k, table.shape[0] - 1) if nint else np.zeros_like(k)])
        return tuple(out)

    def check_aligned(self, grid: TimeGrid) -> None:
        """Raise unless every breakpoint inside the grid is a grid node."""
        for t in self.breakpoints:
            if grid.t0 < t < grid.t1:
                k = (t - grid.t0) / grid.step
                if abs(k - round(k)) > 1e-7 * max(1.0, k):
                    raise ValueError(f"breakpoint {t} is not a node of the grid with step {grid.step}")

    def on_steps(self, grid: TimeGrid) -> tuple[np.ndarray, ...]:
        """Values on each grid step, shape ``(n_steps, m0, dim)``."""
        self.check_aligned(grid)
        return self.evaluate(grid.midpoints)

    def at_nodes(self, grid: TimeGrid) -> tuple[np.ndarray, ...]:
        return self.evaluate(grid.nodes)

    def squared_norm(self, t) -> np.ndarray:
        """``|b|^2 + |sigma|^2 + |q|^2 + |r|^2`` per regime, shape ``t.shape + (m0,)``."""
        return sum(np.sum(v ** 2, axis=-1) for v in self.evaluate(t))

    def is_zero(self) -> bool:
        arrays = [getattr(self, nm) for nm in _FIELDS] + list(self.tail or ())
        return all(not np.any(a) for a in arrays)

    # -- algebra ------------------------------------------------------

    def scaled(self, c: float) -> "SignalSet":
        tail = None if self.tail is None else tuple(c * v for v in self.tail)
        return SignalSet(self.breakpoints, c * self.b, c * self.sigma, c * self.q, c * self.r, tail)

    def __add__(self, other: "SignalSet") -> "SignalSet":
        if self.dims != other.dims:
            raise ModelStructureError("cannot add signal sets of different dimensions")
        start = max(self.breakpoints[0], other.breakpoints[0])
        end = min(self.domain_end, other.domain_end)
        bp = np.union1d(self.breakpoints, other.breakpoints)
        bp = bp[(bp >= start) & (bp <= end)]
        if bp.size == 0 or bp[0] > start:
            bp = np.concatenate([[start], bp])
        mids = 0.5 * (bp[1:] + bp[:-1])
        vals = [x + y for x, y in zip(self.evaluate(mids), other.evaluate(mids))]
        tail = None
        if self.has_tail and other.has_tail:
            tail = tuple(x + y for x, y in zip(self.tail, other.tail))
        return SignalSet(bp, *vals, tail=tail)

    def shifted(self, delta: float) -> "SignalSet":
        """Signals ``t -> s(t + delta)`` restricted to ``t >= 0``."""
        bp = self.breakpoints - delta
        keep = bp > 0
        new_bp = np.concatenate([[0.0], bp[keep]])
        mids = 0.5 * (new_bp[1:] + new_bp[:-1]) + delta
        vals = self.evaluate(mids) if mids.size else tuple(
            np.zeros((0,) + v.shape[1:]) for v in (self.b, self.sigma, self.q, self.r))
        if not self.has_tail and new_bp.size == 1:
            raise ValueError("shift moves the whole domain below zero")
        return SignalSet(new_bp, *vals, tail=self.tail)


def _broadcast_regimes(v, m0, d):
    if v is None:
        return np.zeros((m0, d))
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 0:
        arr = np.full((d,), float(arr))
    if arr.ndim == 1 and arr.shape[0] == d:
        arr = np.broadcast_to(arr, (m0, d))
    if arr.shape != (m0, d):
        raise ModelStructureError(f"signal value of shape {arr.shape} does not fit ({m0}, {d})")
    return np.array(arr)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    margin: float
    message: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple
    warnings: tuple = ()

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def failures(self) -> list:
        return [c for c in self.checks if not c.passed]

    def __str__(self):
        lines = []
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            line = f"[{status}] {c.name}: margin {c.margin:.6g}"
            if c.message:
                line += f" ({c.message})"
            lines.append(line)
        lines.extend(f"[WARN] {w}" for w in self.warnings)
        return "\n".join(lines)


def _min_eig(mats: np.ndarray) -> np.ndarray:
    sym = 0.5 * (mats + np.swapaxes(mats, -1, -2))
    return np.linalg.eigvalsh(sym)[..., 0]


def validate_model(model: LQModel) -> ValidationReport:
    """Check the generator and weight hypotheses, reporting numerical margins."""
    lam = model.generator.lam
    off = model.generator.offdiag
    checks = []
    warnings = []

    m0 = model.m0
    if m0 > 1:
        min_off = float(off[~np.eye(m0, dtype=bool)].min())
    else:
        min_off = 0.0
    checks.append(Check("generator off-diagonal rates nonnegative", min_off >= 0, min_off,
                        "" if min_off >= 0 else "negative transition rate"))
    max_diag = float(np.diag(lam).max())
    checks.append(Check("generator diagonal nonpositive", max_diag <= 0, -max_diag,
                        "" if max_diag <= 0 else "positive diagonal rate"))
    row_err = float(np.abs(lam.sum(axis=1)).max())
    checks.append(Check("generator rows sum to zero", row_err <= ROW_SUM_TOL, row_err,
                        "" if row_err <= ROW_SUM_TOL else f"row sum off by {row_err:.3g}"))
    if m0 > 1 and min_off == 0.0:
        zeros = [(i + 1, j + 1) for i in range(m0) for j in range(m0) if i != j and off[i, j] == 0]
        warnings.append(f"zero transition rates at {zeros}; strictly positive rates are assumed")

    def pd_check(name, label, mats):
        asym = float(np.abs(mats - np.swapaxes(mats, -1, -2)).max())
        eig = _min_eig(mats)
        worst = int(np.argmin(eig))
        margin = float(eig[worst])
        ok = margin > PD_TOL and asym <= 1e-12 * max(1.0, float(np.abs(mats).max()))
        msg = ""
        if asym > 1e-12 * max(1.0, float(np.abs(mats).max())):
            msg = f"{label} not symmetric"
        elif not ok:
            msg = f"{label} not positive definite in regime {worst + 1}"
        checks.append(Check(name, ok, margin, msg))
        return ok

    pd_check("state weight Q positive definite", "Q", model.Q)
    r_ok = pd_check("control weight R positive definite", "R", model.R)
    if r_ok:
        schur = model.Q - np.swapaxes(model.S, -1, -2) @ np.linalg.solve(model.R, model.S)
        pd_check("Q - S'R^-1 S positive definite", "Q - S'R^-1 S", schur)
    else:
        checks.append(Check("Q - S'R^-1 S positive definite", False, float("nan"),
                            "undefined: R not positive definite"))
    return ValidationReport(tuple(checks), tuple(warnings))


# ---------------------------------------------------------------------------
# generator calculus
# ---------------------------------------------------------------------------

def generator_apply(gen: Generator, F) -> np.ndarray:
    """Apply the chain generator to a per-regime family.

    ``out[i] = sum_{j != i} lam[i, j] * (F[j] - F[i])``.
    """
    F = np.asarray(F, dtype=float)
    if F.shape[0] != gen.m0:
        raise ModelStructureError(f"family has {F.shape[0]} members, generator has {gen.m0} regimes")
    off = gen.offdiag
    flat = F.reshape(gen.m0, -1)
    out = off @ flat - off.sum(axis=1)[:, None] * flat
    return out.reshape(F.shape)


def chain_law(gen: Generator, i0: int, grid: TimeGrid) -> np.ndarray:
    """Regime distribution at every grid node, shape ``(len(grid), m0)``."""
    if not 0 <= i0 < gen.m0:
        raise ValueError(f"initial regime {i0} outside 0..{gen.m0 - 1}")
    prop = expm(gen.lam.T * grid.step)
    p = np.empty((grid.n_steps + 1, gen.m0))
    p[0] = 0.0
    p[0, i0] = 1.0
    for k in range(grid.n_steps):
        p[k + 1] = prop @ p[k]
    if p.min() < -1e-12:
        raise ValueError(f"chain law went negative ({p.min():.3g}); check the generator")
    np.maximum(p, 0.0, out=p)
    return p


def xi_profile(signals: SignalSet, gen: Generator, i0: int, grid: TimeGrid) -> np.ndarray:
    """Expected squared size of all signals along the chain law, per node."""
    p = chain_law(gen, i0, grid)
    return np.einsum("ti,ti->t", p, signals.squared_norm(grid.nodes))


def sample_regimes(gen: Generator, i0: int, times, n_paths: int, rng: np.random.Generator) -> np.ndarray:
    """Exact samples of the chain at the given (sorted) times.

    Holding times are exponential and destinations are drawn from the jump
    matrix, so no time discretisation is involved. Returns an integer array
    of shape ``(len(times), n_paths)``.
    """
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0):
        raise ValueError("times must be sorted")
    sampler = ChainSampler(gen, rng)
    state = np.full(n_paths, i0, dtype=np.int64)
    clock = sampler.holding(state)
    out = np.empty((times.size, n_paths), dtype=np.int64)
    for j, t in enumerate(times):
        while True:
            due = clock <= t
            if not due.any():
                break
            idx = np.nonzero(due)[0]
            state[idx] = sampler.jump(state[idx])
            clock[idx] += sampler.holding(state[idx])
        out[j] = state
    return out


class ChainSampler:
    """Exponential clocks and jump-chain destinations for a generator."""

    def __init__(self, gen: Generator, rng: np.random.Generator):
        self.rng = rng
        self.rates = gen.exit_rates
        off = gen.offdiag
        with np.errstate(invalid="ignore", divide="ignore"):
            probs = np.where(self.rates[:, None] > 0, off / self.rates[:, None], 0.0)
        cum = np.cumsum(probs, axis=1)
        live = self.rates > 0
        cum[live] /= cum[live, -1:]
        self.cum = cum
        self.m0 = gen.m0

    def holding(self, state: np.ndarray) -> np.ndarray:
        rate = self.rates[state]
        e = self.rng.standard_exponential(state.size)
        with np.errstate(divide="ignore"):
            return np.where(rate > 0, e / np.where(rate > 0, rate, 1.0), np.inf)

    def jump(self, state: np.ndarray) -> np.ndarray:
        u = self.rng.random(state.size)
        new = (u[:, None] >= self.cum[state]).sum(axis=1)
        return np.minimum(new, self.m0 - 1)


def couple(gen: Generator, F: np.ndarray) -> np.ndarray:
    """Generator action on matrix families with the regime on axis ``-3``.

    Batched counterpart of :func:`generator_apply` for arrays shaped
    ``(..., m0, a, b)``.
    """
    off = gen.offdiag
    return np.einsum("ij,...jab->...iab", off, F) - off.sum(axis=1)[:, None, None] * F
