"""JSON model and experiment files, CSV and report writers.

Regimes are numbered from 1 in every file; arrays are indexed from 0 in
memory. A model file looks like::

    {
      "lambda": [[-1, 1], [1, -1]],
      "regimes": [{"A": [[0]], "B": [[1]], "C": [[0]], "D": [[0]],
                   "Q": [[1]], "S": [[0]], "R": [[1]]}, ...],
      "signals": {"breakpoints": [0, 5],
                  "b": [[[1.0], [0.5]]],            # [interval][regime][component]
                  "tail": {"b": [[0.0], [0.0]]}}    # optional, per regime
    }

Missing signal fields default to zero; a missing ``signals`` block means the
homogeneous problem.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ModelStructureError
from .model import LQModel, SignalSet

CASES = ("homogeneous", "integrable", "local_integrable")


class InputError(Exception):
    """A file is missing, unreadable or malformed."""


def _read_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path} is not valid JSON: {exc}") from None


def model_from_dict(data: dict) -> LQModel:
    try:
        lam = data["lambda"]
        regimes = data["regimes"]
    except KeyError as exc:
        raise InputError(f"model file lacks the key {exc}") from None
    if not isinstance(regimes, list) or not regimes:
        raise InputError("'regimes' must be a nonempty list")
    keys = ("A", "B", "C", "D", "Q", "S", "R")
    blocks = []
    for k, reg in enumerate(regimes):
        missing = [key for key in keys if key not in reg]
        if missing:
            raise InputError(f"regime {k + 1} lacks {', '.join(missing)}")
        blocks.append({key: reg[key] for key in keys})
    model = LQModel.from_regimes(lam, blocks)
    for key, val in (("n", model.n), ("m", model.m), ("m0", model.m0)):
        if key in data and int(data[key]) != val:
            raise ModelStructureError(f"declared {key}={data[key]} but the matrices give {val}")
    return model


def signals_from_dict(data: Optional[dict], m0: int, n: int, m: int) -> SignalSet:
    if data is None:
        return SignalSet.zeros(m0, n, m)
    bp = data.get("breakpoints", [0.0])
    kwargs = {}
    for name in ("b", "sigma", "q", "r"):
        if name in data:
            kwargs[name] = data[name]
    tail = data.get("tail")
    return SignalSet.piecewise(bp, m0, n, m, tail=tail, **kwargs)


def load_model(path):
    """Model and signals from a JSON model file."""
    data = _read_json(path)
    model = model_from_dict(data)
    signals = signals_from_dict(data.get("signals"), model.m0, model.n, model.m)
    return model, signals


@dataclass(frozen=True)
class ExperimentConfig:
    model_path: Path
    T_list: list
    grid_step: float
    case: str
    x: list
    x_inf: list
    regime: int
    seed: int
    output_dir: Path
    tol: float
    ergodic_T_list: list
    integrable_fraction: float
    bound_rate: float


def load_config(path) -> ExperimentConfig:
    """Experiment config; relative paths resolve against the config's directory."""
    path = Path(path)
    data = _read_json(path)
    base = path.parent
    try:
        model_path = base / data["model"]
        T_list = [float(T) for T in data["T_list"]]
    except KeyError as exc:
        raise InputError(f"config lacks the key {exc}") from None
    if not model_path.exists():
        raise InputError(f"model file {model_path} does not exist")
    if not T_list or any(b <= a for a, b in zip(T_list, T_list[1:])) or T_list[0] <= 0:
        raise InputError("T_list must be nonempty, positive and strictly increasing")
    case = data.get("case", "homogeneous")
    if case not in CASES:
        raise InputError(f"case must be one of {', '.join(CASES)}, got {case!r}")
    step = float(data.get("grid_step", 0.01))
    tol = float(data.get("tol", 1e-10))
    if step <= 0 or tol <= 0:
        raise InputError("grid_step and tol must be positive")
    out = Path(os.environ.get("LQTP_OUTPUT_DIR") or base / data.get("output_dir", "turnpike_out"))
    x = data.get("x", None)
    return ExperimentConfig(
        model_path=model_path, T_list=T_list, grid_step=step, case=case,
        x=x, x_inf=data.get("x_inf", x), regime=int(data.get("regime", 1)),
        seed=int(data.get("seed", 0)), output_dir=out, tol=tol,
        ergodic_T_list=[float(T) for T in data.get("ergodic_T_list", T_list[-2:])],
        integrable_fraction=float(data.get("integrable_fraction", 0.05)),
        bound_rate=float(data.get("bound_rate", 0.99)),
    )


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def write_csv(path, header, rows) -> None:
    """CSV with a header row; floats carry 17 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_json(path, data) -> None:
    """Strict JSON (non-finite numbers become null), sorted keys."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(data), indent=2, sort_keys=True) + "\n", encoding="utf-8")
