"""Command-line front end.

Exit codes: 0 success, 1 input error, 2 model fails validation, 3 solver
error, 4 an experiment check failed. Output files go to ``--out-dir``
(or the config's ``output_dir``); the ``LQTP_OUTPUT_DIR`` environment
variable overrides both.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .errors import LQError
from .io import InputError, load_config, load_model, write_csv, write_json
from .model import TimeGrid, validate_model
from .moments import FeedbackLaw, closed_loop_moments, monte_carlo_simulate
from .offsets import solve_offset_finite, solve_offset_infinite
from .riccati import solve_are, solve_dre
from .stability import dissipativity_certificate
from .turnpike import check_ergodic_case, check_integrable_case, run_turnpike_experiment

EXIT_OK, EXIT_INPUT, EXIT_INVALID, EXIT_SOLVER, EXIT_CHECK = 0, 1, 2, 3, 4
ENV_OUTPUT = "LQTP_OUTPUT_DIR"


def _out_dir(arg) -> Path:
    return Path(os.environ.get(ENV_OUTPUT) or arg or ".")


def _load_valid(path):
    """Model and signals, or an exit code after printing the reason."""
    try:
        model, signals = load_model(path)
    except (InputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return None, None, EXIT_INPUT
    report = validate_model(model)
    if not report.passed:
        print(report)
        return None, None, EXIT_INVALID
    return model, signals, EXIT_OK


def _fmt_matrix(M) -> str:
    M = np.atleast_2d(M)
    if M.size == 1:
        return f"{M.item():.6f}"
    rows = ["[" + ", ".join(f"{x:.6f}" for x in row) + "]" for row in M]
    return "[" + ", ".join(rows) + "]"


def cmd_validate(args) -> int:
    try:
        model, _ = load_model(args.model)
    except (InputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    report = validate_model(model)
    print(report)
    return EXIT_OK if report.passed else EXIT_INVALID


def cmd_solve(args) -> int:
    model, signals, code = _load_valid(args.model)
    if code:
        return code
    out = _out_dir(args.out_dir)
    try:
        if args.what == "dre":
            dre = solve_dre(model, args.T, args.step)
            write_csv(out / "dre.csv", *dre.to_rows())
            print(f"DRE solved on [0, {args.T:g}] with step {args.step:g}; "
                  f"regularity_margin={dre.regularity_margin:.6g}")
            for i in range(model.m0):
                print(f"regime {i + 1}: P_T(0) = {_fmt_matrix(dre.P[0, i])}")
        elif args.what == "are":
            are = solve_are(model, tol=args.tol, step=args.step, T_step=args.t_step, T_max=args.t_max)
            cert = dissipativity_certificate(model, are.Theta_inf)
            write_json(out / "are.json", {**are.to_dict(), "certificate": cert.to_dict()})
            for i in range(model.m0):
                print(f"regime {i + 1}: P_inf = {_fmt_matrix(are.P_inf[i])}")
                print(f"regime {i + 1}: Theta_inf = {_fmt_matrix(are.Theta_inf[i])}")
            print(f"horizon_used={are.horizon_used:g} residual={are.residual:.3g} "
                  f"regularity_margin={are.regularity_margin:.6g} delta_cert={cert.delta:.6g}")
        else:
            if args.infinite:
                are = solve_are(model, tol=args.tol)
                cert = dissipativity_certificate(model, are.Theta_inf)
                T_max = args.T if args.T is not None else 10.0
                off = solve_offset_infinite(model, are, cert, signals, T_max, tol=args.tol, step=args.step)
                print(f"infinite-horizon offsets on [0, {T_max:g}]; delta_cert={cert.delta:.6g}")
            else:
                if args.T is None:
                    print("error: offsets need --T or --infinite", file=sys.stderr)
                    return EXIT_INPUT
                dre = solve_dre(model, args.T, args.step)
                off = solve_offset_finite(model, dre, signals)
                print(f"finite-horizon offsets on [0, {args.T:g}]")
            write_csv(out / "offsets.csv", *off.to_rows())
    except LQError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


def cmd_simulate(args) -> int:
    model, signals, code = _load_valid(args.model)
    if code:
        return code
    out = _out_dir(args.out_dir)
    i0 = args.regime - 1
    x0 = np.zeros(model.n) if args.x0 is None else np.asarray(args.x0, dtype=float)
    try:
        grid = TimeGrid(0.0, args.T, args.dt)
        if args.law == "finite":
            dre = solve_dre(model, args.T, args.dt)
            law = FeedbackLaw.from_offsets(solve_offset_finite(model, dre, signals))
        else:
            are = solve_are(model)
            cert = dissipativity_certificate(model, are.Theta_inf)
            law = FeedbackLaw.from_offsets(solve_offset_infinite(model, are, cert, signals, args.T, step=args.dt))
        traj = closed_loop_moments(model, law, signals, x0, i0, grid)
        mc = monte_carlo_simulate(model, law, signals, x0, i0, grid, args.paths, args.seed,
                                  record_times=args.record)
    except LQError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    write_csv(out / "moments.csv", *traj.to_rows())
    write_csv(out / "monte_carlo.csv", *mc.to_rows())
    print(f"{'t':>8} {'E|X|^2 exact':>16} {'E|X|^2 MC':>16} {'SE':>12}")
    for j, t in enumerate(mc.times):
        k = grid.index(t)
        print(f"{t:8.3f} {traj.second_moment[k]:16.8g} {mc.second_moment[j]:16.8g} {mc.second_moment_se[j]:12.4g}")
    return EXIT_OK


def cmd_turnpike(args) -> int:
    try:
        cfg = load_config(args.config)
        model, signals = load_model(cfg.model_path)
    except (InputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    report = validate_model(model)
    if not report.passed:
        print(report)
        return EXIT_INVALID
    x = np.zeros(model.n) if cfg.x is None else np.asarray(cfg.x, dtype=float)
    x_inf = x if cfg.x_inf is None else np.asarray(cfg.x_inf, dtype=float)
    i0 = cfg.regime - 1
    try:
        rep = run_turnpike_experiment(model, signals, x, x_inf, i0, cfg.T_list, cfg.grid_step, tol=cfg.tol)
        checks = {
            "midpoint_decay": rep.midpoint_decay_ok(),
            "bound": rep.bound_pass_rate >= cfg.bound_rate,
        }
        extra = None
        if cfg.case == "integrable":
            extra = check_integrable_case(rep, signals, cfg.integrable_fraction)
            checks["integrable"] = extra.passed
        elif cfg.case == "local_integrable":
            extra = check_ergodic_case(model, signals, x, i0, cfg.ergodic_T_list, cfg.grid_step, cfg.tol)
            checks["ergodic"] = extra.passed
            rep.ergodic = extra.values
    except LQError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    rep.checks = checks
    out = cfg.output_dir
    doc = rep.to_dict()
    doc["case"] = cfg.case
    doc["seed"] = cfg.seed
    if extra is not None:
        doc["case_check"] = {"passed": extra.passed, "message": extra.message, **extra.values}
    write_json(out / "report.json", doc)
    write_csv(out / "error_table.csv", *rep.error_rows())
    write_csv(out / "midpoint_series.csv", *rep.midpoint_rows())

    beta = rep.fitted.beta
    beta_txt = f"{beta:.4f}" if rep.fitted.available else "n/a"
    print(f"case={cfg.case} delta_cert={rep.delta_cert:.6g} predicted rate={rep.delta_cert / 8:.6g} "
          f"K_bound={rep.K_bound:.4g}")
    print(f"{'T':>8} {'E|Xhat(T/2)|^2':>16} {'beta_hat':>10} {'bound pass':>11}")
    for T, mid, rate in zip(rep.horizons, rep.midpoint_series, rep.bound_pass_rates):
        print(f"{T:8g} {mid:16.6e} {beta_txt:>10} {rate:11.2%}")
    if extra is not None:
        print(extra.message)
        if cfg.case == "local_integrable":
            print(f"ergodic limit estimate: {extra.values['limit']:.8g}")
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    return EXIT_OK if all(checks.values()) else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lqturnpike",
                                     description="Regime-switching LQ control and turnpike experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check model hypotheses")
    p.add_argument("model")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("solve", help="solve DRE, ARE or offsets")
    p.add_argument("model")
    p.add_argument("what", choices=["dre", "are", "offsets"])
    p.add_argument("--T", type=float, default=None, help="horizon (dre, finite offsets) or window (infinite)")
    p.add_argument("--step", type=float, default=0.01)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--t-step", type=float, default=5.0, help="horizon increment for the ARE continuation")
    p.add_argument("--t-max", type=float, default=500.0, help="horizon cap for the ARE continuation")
    p.add_argument("--infinite", action="store_true", help="infinite-horizon offsets")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("simulate", help="exact moments and a Monte Carlo check")
    p.add_argument("model")
    p.add_argument("--law", choices=["finite", "infinite"], default="finite")
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--paths", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--x0", type=float, nargs="+", default=None)
    p.add_argument("--regime", type=int, default=1, help="initial regime (1-based)")
    p.add_argument("--record", type=float, nargs="+", default=None, help="record times (default: T)")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("turnpike", help="run a turnpike experiment from a config file")
    p.add_argument("config")
    p.set_defaults(func=cmd_turnpike)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "solve" and args.what == "dre" and args.T is None:
        print("error: dre needs --T", file=sys.stderr)
        return EXIT_INPUT
    if args.command == "simulate" and args.record is None:
        args.record = [args.T]
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
