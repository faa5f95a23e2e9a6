"""Validator suites behind ``measurepmp check <suite>``.

Every suite takes a built :class:`~measurepmp.config.Run` and returns rows of
(name, worst discrepancy, tolerance, passed).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adjoint import (
    control_gradient,
    control_grid,
    extract_adjoint_measures,
    finite_difference_gradient,
    hamiltonian_v1,
    hamiltonian_v2,
    integrate_adjoint_backward,
)
from .checks import (
    check_flat_derivative,
    check_lifted_derivative,
    check_model_derivatives,
    derivative_tolerance,
    functional_at,
)
from .forward import ControlSignal, TimeGrid, current_measure, discretize_initial, integrate_forward, weak_form_residual
from .measure import LiftedEnsemble, ParticleMeasure, barycentric_projection, flat_norm, w2_distance


@dataclass
class CheckRow:
    name: str
    value: float
    tolerance: float
    passed: bool


def _reference_control(run, rng) -> ControlSignal:
    """The configured control, else a seeded random interior control (avoids stationary points)."""
    if run.control is not None:
        return run.control
    lo = np.where(np.isfinite(run.spec.control_lower), run.spec.control_lower, -1.0)
    hi = np.where(np.isfinite(run.spec.control_upper), run.spec.control_upper, 1.0)
    frac = rng.uniform(0.1, 0.9, size=(run.grid.M, run.spec.control_dim))
    return ControlSignal(lo + (hi - lo) * frac)


def _random_measure(rng, n, atoms=4):
    return ParticleMeasure(rng.uniform(-1.5, 1.5, size=(atoms, n)), rng.uniform(0.2, 1.0, size=atoms))


def derivatives(run, rtol: float = 1e-6) -> list[CheckRow]:
    """Callback derivatives against finite differences, then flat and lifted checks of l (and G, F_i)."""
    spec = run.spec
    rows = []
    for name, err in sorted(check_model_derivatives(spec, seed=run.seed).items()):
        tol = derivative_tolerance(name)
        rows.append(CheckRow(f"callback {name}", err, tol, err <= tol))
    rng = np.random.default_rng(run.seed)
    n = spec.dim
    functionals = [("l", spec.cost)]
    t = 0.5 * run.grid.T
    u = 0.5 * (np.where(np.isfinite(spec.control_lower), spec.control_lower, 0.0)
               + np.where(np.isfinite(spec.control_upper), spec.control_upper, 0.0))
    x = rng.uniform(-1.0, 1.0, size=(1, n))
    if spec.source_flat is not None:
        functionals.append(("G", functional_at(spec, "source", t, u, x)))
    if spec.field_flat is not None:
        functionals += [(f"F_{i}", functional_at(spec, f"field:{i}", t, u, x)) for i in range(n)]
    for label, Q in functionals:
        worst_flat = worst_lift = 0.0
        for _ in range(5):
            mu, mu2 = _random_measure(rng, n), _random_measure(rng, n)
            worst_flat = max(worst_flat, check_flat_derivative(Q, mu, mu2, rtol=rtol).discrepancy / (1.0 + abs(Q.value(mu))))
            k = 4
            w = rng.uniform(0.2, 1.0, size=k)
            e = LiftedEnsemble(rng.uniform(-1.5, 1.5, size=(k, n)), rng.uniform(0.2, 2.0, size=k), w / w.sum())
            rep = check_lifted_derivative(Q, e, rtol=rtol)
            worst_lift = max(worst_lift, rep.flat_discrepancy, rep.intrinsic_discrepancy)
        rows.append(CheckRow(f"flat derivative of {label}", worst_flat, rtol, worst_flat <= rtol))
        rows.append(CheckRow(f"lifted derivative of {label}", worst_lift, rtol, worst_lift <= rtol))
    return rows


def gradient(run) -> list[CheckRow]:
    spec = run.spec
    if not spec.u_differentiable:
        raise ValueError("model not u-differentiable")
    rng = np.random.default_rng(run.seed)
    u = _reference_control(run, rng)
    traj = integrate_forward(spec, u, discretize_initial(run.theta), run.grid, run.integrator)
    g = control_gradient(spec, u, traj, integrate_adjoint_backward(spec, u, traj))
    M = run.grid.M
    k = min(int(run.checks["gradient_intervals"]), M)
    idx = sorted(set(np.linspace(0, M - 1, k).round().astype(int).tolist()))
    fd = finite_difference_gradient(spec, u, run.theta, run.grid, idx, step=run.checks["fd_step"], method=run.integrator)
    a, b = g[idx], fd[idx]
    scale = float(np.max(np.abs(b)))
    err = float(np.max(np.abs(a - b))) / scale if scale > 0 else float(np.max(np.abs(a)))
    tol = float(run.checks["gradient_rtol"])
    return [CheckRow(f"adjoint vs central differences ({len(idx)} intervals)", err, tol, err <= tol)]


def _test_functions(n):
    def one(x):
        return np.ones(x.shape[0])

    def bump(x):
        return np.exp(-0.25 * (x ** 2).sum(axis=1))

    def quad(x):
        return 0.5 * (x ** 2).sum(axis=1)

    return [
        ("1", one, lambda x: np.zeros_like(x)),
        ("|x|^2/2", quad, lambda x: x),
        ("exp(-|x|^2/4)", bump, lambda x: -0.5 * x * bump(x)[:, None]),
    ]


ROUNDOFF = 1e-11


def weak_form(run) -> list[CheckRow]:
    """Weak-form defect at M, 2M, 4M...; each refinement should cut it by about 4."""
    spec = run.spec
    rng = np.random.default_rng(run.seed)
    u0 = _reference_control(run, rng)
    levels = int(run.checks["weak_form_refinements"]) + 1
    worst = []
    for r in range(levels):
        f = 2 ** r
        grid = TimeGrid(run.grid.T, run.grid.M * f)
        u = ControlSignal(np.repeat(u0.values, f, axis=0))
        traj = integrate_forward(spec, u, discretize_initial(run.theta), grid, run.integrator)
        worst.append(max(float(weak_form_residual(traj, spec, u, phi, dphi).max()) for _, phi, dphi in _test_functions(spec.dim)))
    rows = [CheckRow(f"max residual at M={run.grid.M * 2 ** r}", worst[r], float("inf"), True) for r in range(levels)]
    for r in range(1, levels):
        if worst[r - 1] <= ROUNDOFF and worst[r] <= ROUNDOFF:
            rows.append(CheckRow(f"ratio M={run.grid.M * 2 ** (r - 1)}/{run.grid.M * 2 ** r} (round-off level)", 0.0, 0.8, True))
            continue
        ratio = worst[r - 1] / worst[r] if worst[r] > 0 else float("inf")
        dev = abs(ratio / 4.0 - 1.0)
        rows.append(CheckRow(f"ratio M={run.grid.M * 2 ** (r - 1)}/{run.grid.M * 2 ** r} = {ratio:.4f} (expect 4)", dev, 0.2, dev <= 0.2))
    return rows


def hamiltonian_gap(spec, traj, costates, nodes, controls) -> float:
    """Worst |H_v1 - H_v2| relative to the size of the summands, over nodes and controls."""
    worst = 0.0
    w = traj.weights
    for m in nodes:
        e = traj.ensemble(m)
        p, q = costates.node(m)
        adj = extract_adjoint_measures(traj, costates, m)
        mu = current_measure(traj.positions[m], traj.masses[m], w)
        t = traj.times[m]
        for v in controls:
            h1 = hamiltonian_v1(spec, t, v, e, (p, q))
            h2 = hamiltonian_v2(spec, t, v, adj, mu)
            F = spec.field(t, v, mu, e.positions)
            G = spec.source(t, v, mu, e.positions)
            scale = float(w @ (np.abs(p * F).sum(axis=1) + np.abs(q * e.masses * G)))
            gap = abs(h1 - h2)
            if gap > 0:
                worst = max(worst, gap / scale if scale > 0 else np.inf)
    return worst


def hamiltonian_equivalence(run) -> list[CheckRow]:
    spec = run.spec
    rng = np.random.default_rng(run.seed)
    u = _reference_control(run, rng)
    traj = integrate_forward(spec, u, discretize_initial(run.theta), run.grid, run.integrator)
    costates = integrate_adjoint_backward(spec, u, traj)
    nodes = sorted(set(np.linspace(0, traj.M, int(run.checks["hamiltonian_nodes"])).round().astype(int).tolist()))
    controls = control_grid(spec, min(int(run.optimizer.grid_resolution), 11))
    gap = hamiltonian_gap(spec, traj, costates, nodes, controls)
    tol = float(run.checks["hamiltonian_rtol"])
    return [CheckRow(f"|H_v1 - H_v2| relative ({len(nodes)} nodes x {len(controls)} controls)", gap, tol, gap <= tol)]


def random_ensemble(rng, atoms: int, n: int, b: float) -> LiftedEnsemble:
    w = rng.uniform(0.05, 1.0, size=atoms)
    return LiftedEnsemble(rng.uniform(-2.0, 2.0, size=(atoms, n)), rng.uniform(0.0, b, size=atoms), w / w.sum())


def beta_lipschitz_ratio(e: LiftedEnsemble, e2: LiftedEnsemble, b: float) -> tuple[float, float]:
    """(flat norm of beta(e) - beta(e2), 2b W2(e, e2))."""
    lhs = flat_norm(barycentric_projection(e) - barycentric_projection(e2))
    return lhs, 2.0 * b * w2_distance(e.as_product_measure(), e2.as_product_measure())


def lipschitz_beta(run) -> list[CheckRow]:
    rng = np.random.default_rng(run.seed)
    n = run.spec.dim
    rows = []
    for b in run.checks["lipschitz_bounds"]:
        b = float(b)
        worst_excess, worst_ratio = -np.inf, 0.0
        for _ in range(int(run.checks["lipschitz_pairs"])):
            e = random_ensemble(rng, int(run.checks["lipschitz_atoms"]), n, b)
            e2 = random_ensemble(rng, int(run.checks["lipschitz_atoms"]), n, b)
            lhs, rhs = beta_lipschitz_ratio(e, e2, b)
            worst_excess = max(worst_excess, lhs - rhs)
            if rhs > 0:
                worst_ratio = max(worst_ratio, lhs / rhs)
        rows.append(CheckRow(f"b={b:g}: max flat/(2b W2) = {worst_ratio:.4f}", max(worst_excess, 0.0), 1e-9, worst_excess <= 1e-9))
    return rows


SUITES = {
    "derivatives": derivatives,
    "gradient": gradient,
    "weak-form": weak_form,
    "hamiltonian-equivalence": hamiltonian_equivalence,
    "lipschitz-beta": lipschitz_beta,
}
