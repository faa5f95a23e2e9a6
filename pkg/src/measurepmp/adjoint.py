"""Backward costate integration, Hamiltonians and control gradients.

Each particle k carries a covector (p_k, q_k) dual to its state (x_k, y_k).
The costates solve the Hamiltonian flow of the lifted Hamiltonian

    H = sum_k w_k [ p_k . F(t, u, mu, x_k) + q_k y_k G(t, u, mu, x_k) ],

with mu = sum_j w_j y_j delta_{x_j}, backwards from p_k(T) = -y_k grad_mu l,
q_k(T) = -dl/dmu. The same information, pushed down to R^n, gives the
adjoint measures psi_i = sum_k w_k p_{k,i} delta_{x_k} and
xi = sum_k w_k y_k q_k delta_{x_k}.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import NumericalError
from .forward import ControlSignal, TimeGrid, TrajectoryBundle, current_measure, discretize_initial, integrate_forward
from .measure import LiftedEnsemble, ParticleMeasure, SignedParticleMeasure, integrate
from .model import ModelSpec


@dataclass(frozen=True, eq=False)
class CostateBundle:
    times: np.ndarray   # (M+1,)
    p: np.ndarray       # (M+1, N, n)
    q: np.ndarray       # (M+1, N)

    def node(self, m: int) -> tuple[np.ndarray, np.ndarray]:
        return self.p[m], self.q[m]


@dataclass(frozen=True, eq=False)
class AdjointMeasures:
    psi: list[SignedParticleMeasure]
    xi: SignedParticleMeasure

    def totals(self) -> tuple[np.ndarray, float]:
        return np.array([float(pi.weights.sum()) for pi in self.psi]), float(self.xi.weights.sum())


def terminal_costate(spec: ModelSpec, mu_T: ParticleMeasure, e_T: LiftedEnsemble) -> tuple[np.ndarray, np.ndarray]:
    x = e_T.positions
    p = -e_T.masses[:, None] * np.asarray(spec.cost.intrinsic(mu_T, x), dtype=float).reshape(x.shape)
    q = -np.asarray(spec.cost.flat(mu_T, x), dtype=float).reshape(-1)
    return p, q


def costate_rhs(spec: ModelSpec, t: float, u: np.ndarray, x, y, w, p, q):
    """Time derivative (dp/dt, dq/dt) of the costates at one instant."""
    mu = current_measure(x, y, w)
    qy = q * y
    dp = -np.einsum("ki,kil->kl", p, spec.eval_field_dx(t, u, mu, x))
    dp -= qy[:, None] * spec.eval_source_dx(t, u, mu, x)
    dq = -q * spec.source(t, u, mu, x)
    # nonlocal coupling: particle j feels a perturbation of the measure at x_k
    if spec.field_intrinsic is not None or spec.source_intrinsic is not None:
        acc = np.zeros_like(p)
        if spec.field_intrinsic is not None:
            acc += np.einsum("j,ji,jkil->kl", w, p, spec.field_intrinsic(t, u, mu, x, x))
        if spec.source_intrinsic is not None:
            acc += np.einsum("j,jkl->kl", w * qy, spec.source_intrinsic(t, u, mu, x, x))
        dp -= y[:, None] * acc
    if spec.field_flat is not None:
        dq -= np.einsum("j,ji,jki->k", w, p, spec.field_flat(t, u, mu, x, x))
    if spec.source_flat is not None:
        dq -= (w * qy) @ spec.source_flat(t, u, mu, x, x)
    return dp, dq


def integrate_adjoint_backward(spec: ModelSpec, u: ControlSignal, traj: TrajectoryBundle) -> CostateBundle:
    """Backward sweep with the integrator that produced ``traj``.

    Forward states at intermediate stage times are interpolated linearly
    between stored nodes.
    """
    if u.M != traj.M:
        raise ValueError(f"grid mismatch: control has {u.M} intervals, trajectory {traj.M}")
    M, h, w = traj.M, traj.h, traj.weights
    N, n = traj.positions.shape[1:]
    P = np.empty((M + 1, N, n))
    Q = np.empty((M + 1, N))
    mu_T = current_measure(traj.positions[M], traj.masses[M], w)
    p, q = terminal_costate(spec, mu_T, traj.ensemble(M))
    P[M], Q[M] = p, q
    for m in range(M - 1, -1, -1):
        um = u[m]
        t1, t0 = traj.times[m + 1], traj.times[m]
        x1, y1 = traj.positions[m + 1], traj.masses[m + 1]
        if traj.method == "euler":
            dp, dq = costate_rhs(spec, t1, um, x1, y1, w, p, q)
            p, q = p - h * dp, q - h * dq
        else:
            xm, ym = 0.5 * (x1 + traj.positions[m]), 0.5 * (y1 + traj.masses[m])
            x0, y0 = traj.positions[m], traj.masses[m]
            tm = 0.5 * (t0 + t1)
            k1p, k1q = costate_rhs(spec, t1, um, x1, y1, w, p, q)
            k2p, k2q = costate_rhs(spec, tm, um, xm, ym, w, p - 0.5 * h * k1p, q - 0.5 * h * k1q)
            k3p, k3q = costate_rhs(spec, tm, um, xm, ym, w, p - 0.5 * h * k2p, q - 0.5 * h * k2q)
            k4p, k4q = costate_rhs(spec, t0, um, x0, y0, w, p - h * k3p, q - h * k3q)
            p = p - (h / 6.0) * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
            q = q - (h / 6.0) * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise NumericalError(f"non-finite costate at step {m}", step=m)
        P[m], Q[m] = p, q
    return CostateBundle(traj.times.copy(), P, Q)


def extract_adjoint_measures(traj: TrajectoryBundle, costates: CostateBundle, m: int) -> AdjointMeasures:
    if not 0 <= m <= traj.M:
        raise IndexError(f"node {m} outside 0..{traj.M}")
    x, w = traj.positions[m], traj.weights
    p, q = costates.node(m)
    psi = [SignedParticleMeasure(x, w * p[:, i]) for i in range(p.shape[1])]
    xi = SignedParticleMeasure(x, w * traj.masses[m] * q)
    return AdjointMeasures(psi, xi)


def hamiltonian_v1(spec: ModelSpec, t: float, u, ensemble: LiftedEnsemble, costate) -> float:
    """Lifted Hamiltonian integrated against the particle measure on the cotangent bundle."""
    p, q = costate
    x, y, w = ensemble.positions, ensemble.masses, ensemble.weights
    u = np.atleast_1d(np.asarray(u, dtype=float))
    mu = current_measure(x, y, w)
    F = spec.field(t, u, mu, x)
    G = spec.source(t, u, mu, x)
    return float(w @ ((p * F).sum(axis=1) + q * y * G))


def hamiltonian_v2(spec: ModelSpec, t: float, u, adjoint: AdjointMeasures, mu: ParticleMeasure) -> float:
    """Sum of <psi_i, F^i> plus <xi, G>."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    total = 0.0
    for i, psi_i in enumerate(adjoint.psi):
        total += integrate(psi_i, lambda pts, i=i: spec.field(t, u, mu, pts)[:, i])
    total += integrate(adjoint.xi, lambda pts: spec.source(t, u, mu, pts))
    return total


def node_hamiltonians(spec: ModelSpec, traj: TrajectoryBundle, costates: CostateBundle, m: int, controls) -> np.ndarray:
    """H_v1 at node m for each control in ``controls`` (shape (G, m)).

    For models declared affine in the control, H is evaluated at m + 1 points
    and extended linearly, which is exact for such models.
    """
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    e = traj.ensemble(m)
    costate = costates.node(m)
    t = traj.times[m]
    if spec.control_affine and controls.shape[0] > spec.control_dim + 1:
        base = np.where(np.isfinite(spec.control_lower), spec.control_lower, 0.0)
        h0 = hamiltonian_v1(spec, t, base, e, costate)
        eye = np.eye(spec.control_dim)
        slope = np.array([hamiltonian_v1(spec, t, base + eye[j], e, costate) - h0 for j in range(spec.control_dim)])
        return h0 + (controls - base) @ slope
    return np.array([hamiltonian_v1(spec, t, v, e, costate) for v in controls])


def control_gradient(spec: ModelSpec, u: ControlSignal, traj: TrajectoryBundle, costates: CostateBundle) -> np.ndarray:
    """Per-interval derivative of the discretised cost with respect to u_m.

    g_m = -h * sum_k w_k [p_k grad_u F + q_k y_k grad_u G] at the interval
    midpoint (states and costates averaged from the bracketing nodes).
    """
    if not spec.u_differentiable:
        raise ValueError("model not u-differentiable")
    h, w = traj.h, traj.weights
    g = np.empty_like(u.values)
    for m in range(traj.M):
        tm = 0.5 * (traj.times[m] + traj.times[m + 1])
        x = 0.5 * (traj.positions[m] + traj.positions[m + 1])
        y = 0.5 * (traj.masses[m] + traj.masses[m + 1])
        p = 0.5 * (costates.p[m] + costates.p[m + 1])
        q = 0.5 * (costates.q[m] + costates.q[m + 1])
        mu = current_measure(x, y, w)
        dF = spec.eval_field_du(tm, u[m], mu, x)
        dG = spec.eval_source_du(tm, u[m], mu, x)
        g[m] = -h * (np.einsum("k,ki,kij->j", w, p, dF) + (w * q * y) @ dG)
    return g


def control_grid(spec: ModelSpec, resolution: int = 101) -> np.ndarray:
    """Tensor grid over the control box in lexicographic order (first coordinate slowest)."""
    axes = [
        np.array([lo]) if lo == hi else np.linspace(lo, hi, resolution)
        for lo, hi in zip(spec.control_lower, spec.control_upper)
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([a.reshape(-1) for a in mesh])


def pmp_residual(spec: ModelSpec, u: ControlSignal, traj: TrajectoryBundle, costates: CostateBundle, u_grid) -> float:
    """Largest gap between max over the grid of H and H at the applied control, over nodes.

    Node m uses the control of interval m; the terminal node uses the last one.
    """
    u_grid = np.atleast_2d(np.asarray(u_grid, dtype=float))
    if u_grid.size == 0:
        raise ValueError("control grid is empty")
    worst = 0.0
    for m in range(traj.M + 1):
        um = u[min(m, traj.M - 1)]
        vals = node_hamiltonians(spec, traj, costates, m, np.vstack([um, u_grid]))
        worst = max(worst, float(vals[1:].max() - vals[0]))
    return max(worst, 0.0)


def discrete_cost(spec: ModelSpec, u: ControlSignal, theta: ParticleMeasure, grid: TimeGrid, method: str = "rk4") -> float:
    traj = integrate_forward(spec, u, discretize_initial(theta), grid, method)
    M = traj.M
    return float(spec.cost.value(current_measure(traj.positions[M], traj.masses[M], traj.weights)))


def finite_difference_gradient(
    spec: ModelSpec,
    u: ControlSignal,
    theta: ParticleMeasure,
    grid: TimeGrid,
    intervals=None,
    step: float = 1e-5,
    method: str = "rk4",
) -> np.ndarray:
    """Central differences of the discretised cost in each u_m component.

    Perturbations are not clipped to the box: the discretised cost is smooth in u.
    Rows for intervals not listed in ``intervals`` are NaN.
    """
    intervals = range(u.M) if intervals is None else intervals
    g = np.full(u.values.shape, np.nan)
    # the box check would reject perturbations past the bounds
    free = _unbounded(spec)
    for m in intervals:
        for j in range(u.values.shape[1]):
            vals = []
            for s in (step, -step):
                v = u.values.copy()
                v[m, j] += s
                vals.append(discrete_cost(free, ControlSignal(v), theta, grid, method))
            g[m, j] = (vals[0] - vals[1]) / (2 * step)
    return g


def _unbounded(spec: ModelSpec) -> ModelSpec:
    return replace(spec, control_lower=np.full(spec.control_dim, -np.inf), control_upper=np.full(spec.control_dim, np.inf))


# --- CSV ---------------------------------------------------------------------

def write_costates_csv(costates: CostateBundle, path: str | Path) -> None:
    n = costates.p.shape[2]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "k"] + [f"p_{i}" for i in range(n)] + ["q"])
        for m, t in enumerate(costates.times):
            for k in range(costates.q.shape[1]):
                writer.writerow(
                    [repr(float(t)), k]
                    + [repr(float(v)) for v in costates.p[m, k]]
                    + [repr(float(costates.q[m, k]))]
                )


def write_adjoint_summary_csv(
    spec: ModelSpec,
    u: ControlSignal,
    traj: TrajectoryBundle,
    costates: CostateBundle,
    u_grid,
    path: str | Path,
) -> None:
    """Rows t, psi_1..psi_n totals, xi total, H at the applied control, per-node maximum-condition gap."""
    n = traj.positions.shape[2]
    u_grid = np.atleast_2d(u_grid)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"psi_{i + 1}_total" for i in range(n)] + ["xi_total", "hamiltonian", "residual"])
        for m, t in enumerate(traj.times):
            psi_tot, xi_tot = extract_adjoint_measures(traj, costates, m).totals()
            um = u[min(m, traj.M - 1)]
            vals = node_hamiltonians(spec, traj, costates, m, np.vstack([um, u_grid]))
            gap = max(float(vals[1:].max() - vals[0]), 0.0)
            writer.writerow([repr(float(t))] + [repr(float(v)) for v in psi_tot] + [repr(xi_tot), repr(float(vals[0])), repr(gap)])
