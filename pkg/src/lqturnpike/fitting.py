"""Log-linear fits of exponentially decaying series."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_WINDOW = (1e-10, 1e-2)
MIN_POINTS = 4


@dataclass(frozen=True)
class FitResult:
    """``value ~ K * exp(-beta * s)`` fitted on ``n_points`` samples."""

    K: float
    beta: float
    r2: float
    n_points: int
    available: bool = True

    @property
    def slope(self) -> float:
        return -self.beta

    @classmethod
    def unavailable(cls, n_points: int = 0) -> "FitResult":
        nan = float("nan")
        return cls(nan, nan, nan, n_points, available=False)


def fit_exponential_rates(s, values, window=DEFAULT_WINDOW) -> FitResult:
    """Least-squares fit of ``log(value) = log K - beta * s``.

    Only points whose value lies inside ``window`` (inclusive) are used.
    Fewer than four usable points gives an unavailable result rather than
    an error. ``r2`` is NaN when the retained log-values are constant.
    """
    s = np.asarray(s, dtype=float)
    v = np.asarray(values, dtype=float)
    lo, hi = window
    keep = np.isfinite(v) & (v >= lo) & (v <= hi) & (v > 0)
    npts = int(keep.sum())
    if npts < MIN_POINTS:
        return FitResult.unavailable(npts)
    x = s[keep]
    y = np.log(v[keep])
    if np.ptp(x) == 0:
        return FitResult.unavailable(npts)
    X = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")
    return FitResult(float(np.exp(coef[0])), float(-coef[1]), r2, npts)
