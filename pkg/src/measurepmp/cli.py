"""Command-line front end: ``measurepmp {simulate,optimize,check} --config run.toml --out DIR``.

Exit codes: 0 success, 1 failed check, 2 configuration error, 3 numerical
failure, 4 optimizer did not converge within max_iters (report still written).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .adjoint import integrate_adjoint_backward, write_adjoint_summary_csv, write_costates_csv
from .config import Run, build, canonical_json, load_raw, resolve
from .errors import ConfigError, NumericalError
from .forward import discretize_initial, integrate_forward, moments, write_mass_curve_csv, write_moments_csv, write_trajectory_csv
from .optimize import optimize, sorted_control_grid, write_control_csv
from .suites import SUITES

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_NOCONV = 0, 1, 2, 3, 4


def _prepare(args) -> tuple[dict, Run, Path]:
    if args.config is None:
        raw, base = {}, Path.cwd()
    else:
        raw, base = load_raw(args.config), Path(args.config).resolve().parent
    cfg = resolve(raw, base, seed=args.seed)
    run = build(cfg)
    out = Path(args.out or cfg.get("out", "out"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(canonical_json(cfg), encoding="utf-8")
    return cfg, run, out


def _write_state(traj, out: Path) -> None:
    write_trajectory_csv(traj, out / "trajectory.csv")
    write_moments_csv(traj, out / "moments.csv")
    write_mass_curve_csv(traj, out / "mass_curve.csv")


def cmd_simulate(args) -> int:
    _, run, out = _prepare(args)
    if run.control is None:
        raise ConfigError("simulate needs a constant or csv control, not 'optimize'")
    traj = integrate_forward(run.spec, run.control, discretize_initial(run.theta), run.grid, run.integrator)
    _write_state(traj, out)
    last = moments(traj)[-1]
    print(f"simulated {len(run.theta)} particles over {run.grid.M} steps; final mass {last[1]:.10g}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    _, run, out = _prepare(args)
    report = optimize(run.spec, run.theta, run.grid, run.optimizer, u0=run.control)
    # the report is deterministic; wall time goes to stdout only
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report.to_dict(include_time=False), indent=2) + "\n", encoding="utf-8")
    write_control_csv(report.control, run.grid, out / "control.csv")
    traj = integrate_forward(run.spec, report.control, discretize_initial(run.theta), run.grid, run.integrator)
    costates = integrate_adjoint_backward(run.spec, report.control, traj)
    _write_state(traj, out)
    write_costates_csv(costates, out / "costates.csv")
    write_adjoint_summary_csv(
        run.spec, report.control, traj, costates, sorted_control_grid(run.spec, run.optimizer.grid_resolution), out / "adjoint_summary.csv"
    )
    print(f"final cost {report.cost:.12g}")
    print(f"final residual {report.residual:.3e}")
    print(f"stopped: {report.reason}; selected {report.selected}; {report.classification}; {report.wall_time:.2f} s")
    if not report.converged:
        print(f"warning: no convergence within {run.optimizer.max_iters} iterations", file=sys.stderr)
        return EXIT_NOCONV
    return EXIT_OK


def cmd_check(args) -> int:
    _, run, out = _prepare(args)
    try:
        rows = SUITES[args.suite](run)
    except ValueError as exc:
        # e.g. asking for a gradient check on a model without control derivatives
        raise ConfigError(str(exc)) from exc
    width = max(len(r.name) for r in rows)
    print(f"{'check':<{width}}  {'worst':>11}  {'tolerance':>9}  result")
    for r in rows:
        print(f"{r.name:<{width}}  {r.value:11.3e}  {r.tolerance:9.1e}  {'pass' if r.passed else 'FAIL'}")
    ok = all(r.passed for r in rows)
    summary = {"suite": args.suite, "passed": ok, "rows": [r.__dict__ for r in rows]}
    (out / f"check_{args.suite}.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK if ok else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="measurepmp", description="Optimal control of nonlocal balance laws on particle measures.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON run configuration (defaults if omitted)")
    common.add_argument("--out", help="output directory (overrides 'out' in the config)")
    common.add_argument("--seed", type=int, help="random seed (overrides 'seed' in the config)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="forward solve; trajectory, moments and mass CSVs").set_defaults(func=cmd_simulate)
    sub.add_parser("optimize", parents=[common], help="forward-backward sweeps; report JSON and CSVs").set_defaults(func=cmd_optimize)
    chk = sub.add_parser("check", parents=[common], help="run a validator suite")
    chk.add_argument("suite", choices=sorted(SUITES))
    chk.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
