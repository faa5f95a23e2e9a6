"""Indirect optimization by forward-backward sweeps.

Two update rules are available: the method of successive approximations
(pointwise maximization of the node Hamiltonian over a control grid, with
relaxation) and projected gradient descent with Armijo backtracking.
"""
from __future__ import annotations

import csv
import itertools
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .adjoint import (
    CostateBundle,
    control_gradient,
    control_grid,
    integrate_adjoint_backward,
    node_hamiltonians,
    pmp_residual,
)
from .forward import ControlSignal, TimeGrid, TrajectoryBundle, current_measure, discretize_initial, integrate_forward
from .measure import ParticleMeasure
from .model import ModelSpec

TIE_RTOL = 1e-12


@dataclass
class OptimizerConfig:
    method: str = "msa"                 # "msa" or "projected-gradient"
    max_iters: int = 50
    residual_tol: float = 1e-8
    cost_tol: float = 1e-12
    grid_resolution: int = 101
    damping: float = 1.0                # MSA relaxation u <- (1 - lam) u + lam argmax
    min_damping: float = 1e-6
    step_size: float = 1.0              # initial Armijo step (gradient method)
    armijo_c: float = 1e-4
    armijo_shrink: float = 0.5
    max_backtracks: int = 40
    integrator: str = "rk4"
    compare_candidates: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("msa", "projected-gradient"):
            raise ValueError(f"unknown optimization method {self.method!r}")
        if self.residual_tol <= 0 or self.cost_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.grid_resolution < 2:
            raise ValueError("grid resolution must be at least 2")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")


@dataclass
class Candidate:
    label: str
    cost: float
    residual: float
    extremal: bool


@dataclass
class OptimizationReport:
    costs: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    controls: list = field(default_factory=list)
    reason: str = ""
    control: ControlSignal | None = None
    cost: float = float("nan")
    residual: float = float("nan")
    converged: bool = False
    classification: str = ""
    candidates: list = field(default_factory=list)
    selected: str = "iterate"
    wall_time: float = 0.0

    def to_dict(self, include_time: bool = True) -> dict:
        d = {
            "iterations": [
                {"iter": i, "cost": c, "residual": r} for i, (c, r) in enumerate(zip(self.costs, self.residuals))
            ],
            "reason": self.reason,
            "converged": self.converged,
            "final_cost": self.cost,
            "final_residual": self.residual,
            "classification": self.classification,
            "selected": self.selected,
            "candidates": [asdict(c) for c in self.candidates],
            "final_control": self.control.values.tolist() if self.control is not None else None,
        }
        if include_time:
            d["wall_time"] = self.wall_time
        return d

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


@dataclass
class _Sweep:
    u: ControlSignal
    traj: TrajectoryBundle
    costates: CostateBundle
    cost: float


def _solve(spec: ModelSpec, u: ControlSignal, theta: ParticleMeasure, grid: TimeGrid, method: str) -> _Sweep:
    traj = integrate_forward(spec, u, discretize_initial(theta), grid, method)
    M = traj.M
    cost = float(spec.cost.value(current_measure(traj.positions[M], traj.masses[M], traj.weights)))
    costates = integrate_adjoint_backward(spec, u, traj)
    return _Sweep(u, traj, costates, cost)


def _cost(spec, u, theta, grid, method) -> float:
    traj = integrate_forward(spec, u, discretize_initial(theta), grid, method)
    M = traj.M
    return float(spec.cost.value(current_measure(traj.positions[M], traj.masses[M], traj.weights)))


def argmax_control(values: np.ndarray, u_grid: np.ndarray) -> np.ndarray:
    """Grid control with the largest Hamiltonian; near-ties go to the first (lexicographically smallest)."""
    best = values.max()
    tol = TIE_RTOL * (1.0 + abs(best))
    return u_grid[int(np.flatnonzero(values >= best - tol)[0])]


def _maximizers(spec: ModelSpec, sweep: _Sweep, u_grid: np.ndarray) -> np.ndarray:
    M = sweep.traj.M
    out = np.empty((M, spec.control_dim))
    for m in range(M):
        out[m] = argmax_control(node_hamiltonians(spec, sweep.traj, sweep.costates, m, u_grid), u_grid)
    return out


def sorted_control_grid(spec: ModelSpec, resolution: int) -> np.ndarray:
    g = control_grid(spec, resolution)
    return g[np.lexsort(g.T[::-1])]


def msa_sweep(spec: ModelSpec, u: ControlSignal, theta: ParticleMeasure, grid: TimeGrid, config: OptimizerConfig) -> ControlSignal:
    """One forward-backward pass followed by relaxed pointwise maximization of H."""
    sweep = _solve(spec, u, theta, grid, config.integrator)
    target = _maximizers(spec, sweep, sorted_control_grid(spec, config.grid_resolution))
    lam = config.damping
    return ControlSignal(spec.clip((1.0 - lam) * u.values + lam * target))


def projected_gradient_step(
    spec: ModelSpec,
    u: ControlSignal,
    theta: ParticleMeasure,
    grid: TimeGrid,
    config: OptimizerConfig,
) -> tuple[ControlSignal, float, str]:
    """Armijo-backtracked step along the L2 gradient, projected onto the box.

    Returns the new control, the accepted step (0 when none) and a status
    ("accepted", "zero-gradient" or "stalled").
    """
    if not spec.u_differentiable:
        raise ValueError("model not u-differentiable")
    sweep = _solve(spec, u, theta, grid, config.integrator)
    g = control_gradient(spec, u, sweep.traj, sweep.costates)
    return _armijo(spec, sweep, g, theta, grid, config)


def _armijo(spec, sweep: _Sweep, g, theta, grid, config):
    u = sweep.u
    direction = -g / grid.h  # function-space gradient density
    if not np.any(direction):
        return u, 0.0, "zero-gradient"
    alpha = config.step_size
    for _ in range(config.max_backtracks):
        cand = spec.clip(u.values + alpha * direction)
        decrease = float(np.sum(g * (cand - u.values)))
        if decrease < 0:
            new = ControlSignal(cand)
            if _cost(spec, new, theta, grid, config.integrator) <= sweep.cost + config.armijo_c * decrease:
                return new, alpha, "accepted"
        alpha *= config.armijo_shrink
    return u, 0.0, "stalled"


def switching_function(spec: ModelSpec, u: ControlSignal, traj: TrajectoryBundle, costates: CostateBundle) -> np.ndarray:
    """dH/du at every node for a scalar control (H assumed affine in u)."""
    lo, hi = spec.control_lower[0], spec.control_upper[0]
    a, b = (lo, hi) if hi > lo else (lo - 0.5, lo + 0.5)
    sigma = np.empty(traj.M + 1)
    for m in range(traj.M + 1):
        h = node_hamiltonians(spec, traj, costates, m, np.array([[a], [b]]))
        sigma[m] = (h[1] - h[0]) / (b - a)
    return sigma


def _is_affine_in_u(spec, traj, costates) -> bool:
    lo, hi = spec.control_lower[0], spec.control_upper[0]
    a, b = (lo, hi) if hi > lo else (lo - 0.5, lo + 0.5)
    for m in sorted({0, traj.M // 2, traj.M}):
        h = node_hamiltonians(spec, traj, costates, m, np.array([[a], [0.5 * (a + b)], [b]]))
        if abs(h[1] - 0.5 * (h[0] + h[2])) > 1e-9 * (1.0 + np.abs(h).max()):
            return False
    return True


def classify_extremal(spec: ModelSpec, u: ControlSignal, traj: TrajectoryBundle, costates: CostateBundle, tol: float = 1e-8) -> str:
    """"bang", "singular", "non-extremal" or "unsupported" (vector or non-affine controls).

    Interval m is judged by the switching function at its left node: bang if
    |sigma| > tol and u sits on the bound selected by sign(sigma), singular if
    |sigma| <= tol. Any inconsistent interval makes the control non-extremal; a
    consistent control with at least one singular interval is singular.
    """
    if spec.control_dim != 1 or not _is_affine_in_u(spec, traj, costates):
        return "unsupported"
    sigma = switching_function(spec, u, traj, costates)
    lo, hi = spec.control_lower[0], spec.control_upper[0]
    singular = False
    for m in range(traj.M):
        s, v = sigma[m], u[m][0]
        if abs(s) <= tol:
            singular = True
        elif abs(v - (hi if s > 0 else lo)) > 1e-9 * max(1.0, hi - lo):
            return "non-extremal"
    return "singular" if singular else "bang"


def _vertex_controls(spec: ModelSpec, M: int):
    if spec.control_dim > 3:
        return []
    corners = itertools.product(*zip(spec.control_lower, spec.control_upper))
    seen = []
    for c in corners:
        c = np.array(c)
        if not any(np.array_equal(c, s) for s in seen):
            seen.append(c)
    return [(f"u={c.tolist()}", ControlSignal.constant(c, M)) for c in seen]


def optimize(
    spec: ModelSpec,
    theta: ParticleMeasure,
    grid: TimeGrid,
    config: OptimizerConfig | None = None,
    u0: ControlSignal | None = None,
) -> OptimizationReport:
    """Iterate sweeps until the maximum condition holds on the grid, the cost stalls, or max_iters.

    MSA halves its relaxation factor whenever a full step fails to lower the
    cost. With ``compare_candidates`` the constant controls at the vertices of
    the box that also satisfy the discrete maximum condition are evaluated, and
    the cheapest extremal among them and the final iterate is returned.
    """
    config = config or OptimizerConfig()
    start = time.perf_counter()
    if u0 is None:
        u0 = ControlSignal.constant(0.5 * (spec.control_lower + spec.control_upper), grid.M)
    u_grid = sorted_control_grid(spec, config.grid_resolution)
    report = OptimizationReport()
    sweep = _solve(spec, u0, theta, grid, config.integrator)
    lam = config.damping
    reason = "max_iters"
    converged = False
    for it in range(config.max_iters + 1):
        res = pmp_residual(spec, sweep.u, sweep.traj, sweep.costates, u_grid)
        report.costs.append(sweep.cost)
        report.residuals.append(res)
        report.controls.append(sweep.u.values.copy())
        if res <= config.residual_tol:
            reason, converged = "residual", True
            break
        if it == config.max_iters:
            break
        if config.method == "msa":
            target = _maximizers(spec, sweep, u_grid)
            new = None
            while lam >= config.min_damping:
                cand = ControlSignal(spec.clip((1.0 - lam) * sweep.u.values + lam * target))
                cand_sweep = _solve(spec, cand, theta, grid, config.integrator)
                if cand_sweep.cost < sweep.cost or np.array_equal(cand.values, sweep.u.values):
                    new = cand_sweep
                    break
                lam *= 0.5
        else:
            g = control_gradient(spec, sweep.u, sweep.traj, sweep.costates)
            cand, _, status = _armijo(spec, sweep, g, theta, grid, config)
            new = _solve(spec, cand, theta, grid, config.integrator) if status == "accepted" else None
        if new is None:
            reason, converged = "stalled", True
            break
        delta = abs(new.cost - sweep.cost)
        sweep = new
        if delta <= config.cost_tol:
            res = pmp_residual(spec, sweep.u, sweep.traj, sweep.costates, u_grid)
            report.costs.append(sweep.cost)
            report.residuals.append(res)
            report.controls.append(sweep.u.values.copy())
            reason, converged = "cost", True
            break

    best_label, best = "iterate", sweep
    best_res = report.residuals[-1]
    if config.compare_candidates:
        for label, cu in _vertex_controls(spec, grid.M):
            cs = _solve(spec, cu, theta, grid, config.integrator)
            r = pmp_residual(spec, cu, cs.traj, cs.costates, u_grid)
            extremal = r <= config.residual_tol
            report.candidates.append(Candidate(label, cs.cost, r, extremal))
            if extremal and cs.cost < best.cost:
                best_label, best, best_res = label, cs, r
        report.candidates.append(Candidate("iterate", sweep.cost, report.residuals[-1], report.residuals[-1] <= config.residual_tol))

    report.reason = reason
    report.converged = converged
    report.control = best.u
    report.cost = best.cost
    report.residual = best_res
    report.selected = best_label
    report.classification = classify_extremal(spec, best.u, best.traj, best.costates, tol=max(config.residual_tol, 1e-10))
    report.wall_time = time.perf_counter() - start
    return report


def write_control_csv(u: ControlSignal, grid: TimeGrid, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"u_{j}" for j in range(u.values.shape[1])])
        for t, row in zip(grid.nodes[:-1], u.values):
            writer.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def read_control_csv(path: str | Path, M: int | None = None) -> ControlSignal:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or rows[0][0] != "t":
        raise ValueError(f"{path}: expected header t,u_0,...")
    vals = np.array([[float(v) for v in r[1:]] for r in rows[1:] if r])
    if M is not None and vals.shape[0] != M:
        raise ValueError(f"{path}: {vals.shape[0]} control intervals, grid has {M}")
    return ControlSignal(vals)
