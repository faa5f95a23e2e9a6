"""Forward solve of the balance law along particle characteristics.

Each particle carries a position x_k, a mass factor y_k and a fixed base
weight w_k; the measure at time t is sum_k w_k y_k(t) delta_{x_k(t)}.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import NumericalError
from .measure import LiftedEnsemble, ParticleMeasure, barycentric_projection, total_mass
from .model import ModelSpec

METHODS = ("euler", "rk4")


@dataclass(frozen=True)
class TimeGrid:
    T: float
    M: int

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("time grid needs M >= 1")
        if not self.T > 0:
            raise ValueError("time horizon must be positive")

    @property
    def h(self) -> float:
        return self.T / self.M

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.M + 1)


@dataclass(frozen=True, eq=False)
class ControlSignal:
    """Piecewise-constant control; ``values[m]`` acts on [t_m, t_{m+1})."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2:
            raise ValueError("control values must have shape (M, m)")
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, value, M: int) -> ControlSignal:
        v = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(np.tile(v, (M, 1)))

    @property
    def M(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, m: int) -> np.ndarray:
        return self.values[m]

    def check_admissible(self, spec: ModelSpec, tol: float = 1e-12) -> None:
        if self.values.shape[1] != spec.control_dim:
            raise ValueError(f"control dimension {self.values.shape[1]} != model's {spec.control_dim}")
        if np.any(self.values < spec.control_lower - tol) or np.any(self.values > spec.control_upper + tol):
            raise ValueError("control leaves the admissible box")


@dataclass(frozen=True, eq=False)
class TrajectoryBundle:
    times: np.ndarray          # (M+1,)
    positions: np.ndarray      # (M+1, N, n)
    masses: np.ndarray         # (M+1, N)
    weights: np.ndarray        # (N,)
    control: ControlSignal
    method: str

    @property
    def M(self) -> int:
        return self.times.shape[0] - 1

    @property
    def h(self) -> float:
        return float(self.times[1] - self.times[0])

    def ensemble(self, m: int) -> LiftedEnsemble:
        return LiftedEnsemble(self.positions[m], self.masses[m], self.weights)

    def state_at(self, s: float) -> tuple[np.ndarray, np.ndarray]:
        """Linear-in-time interpolation of (x, y) between stored nodes."""
        m = int(np.clip(np.floor((s - self.times[0]) / self.h), 0, self.M - 1))
        theta = (s - self.times[m]) / self.h
        x = (1.0 - theta) * self.positions[m] + theta * self.positions[m + 1]
        y = (1.0 - theta) * self.masses[m] + theta * self.masses[m + 1]
        return x, y


def discretize_initial(theta: ParticleMeasure) -> LiftedEnsemble:
    """Lift theta to the product space as theta (x) delta_mass with normalised base weights."""
    mass = total_mass(theta)
    if not mass > 0:
        raise ValueError("initial measure must have positive total mass")
    return LiftedEnsemble(theta.points.copy(), np.full(len(theta), mass), theta.weights / mass)


def current_measure(x: np.ndarray, y: np.ndarray, w: np.ndarray) -> ParticleMeasure:
    return ParticleMeasure._unchecked(x, w * y)


def lifted_field(spec: ModelSpec, t: float, u: np.ndarray, x: np.ndarray, y: np.ndarray, w: np.ndarray):
    """Right-hand side (dx/dt, dy/dt) of the characteristic system with self-consistent mu."""
    mu = current_measure(x, y, w)
    return spec.field(t, u, mu, x), y * spec.source(t, u, mu, x)


def _step(rhs: Callable, t: float, h: float, x, y, method: str):
    if method == "euler":
        fx, fy = rhs(t, x, y)
        return x + h * fx, y + h * fy
    k1x, k1y = rhs(t, x, y)
    k2x, k2y = rhs(t + 0.5 * h, x + 0.5 * h * k1x, y + 0.5 * h * k1y)
    k3x, k3y = rhs(t + 0.5 * h, x + 0.5 * h * k2x, y + 0.5 * h * k2y)
    k4x, k4y = rhs(t + h, x + h * k3x, y + h * k3y)
    return (
        x + (h / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x),
        y + (h / 6.0) * (k1y + 2.0 * k2y + 2.0 * k3y + k4y),
    )


def _check_grid(u: ControlSignal, grid: TimeGrid, method: str) -> None:
    if method not in METHODS:
        raise ValueError(f"unknown integrator {method!r}; choose from {METHODS}")
    if u.M != grid.M:
        raise ValueError(f"control has {u.M} intervals but the grid has {grid.M}")


def integrate_forward(
    spec: ModelSpec,
    u: ControlSignal,
    e0: LiftedEnsemble,
    grid: TimeGrid,
    method: str = "rk4",
) -> TrajectoryBundle:
    _check_grid(u, grid, method)
    u.check_admissible(spec)
    if e0.dim != spec.dim:
        raise ValueError(f"ensemble dimension {e0.dim} != model dimension {spec.dim}")
    times = grid.nodes
    h = grid.h
    N = len(e0)
    X = np.empty((grid.M + 1, N, spec.dim))
    Y = np.empty((grid.M + 1, N))
    X[0], Y[0] = e0.positions, e0.masses
    w = e0.weights
    positive = Y[0] > 0
    x, y = X[0].copy(), Y[0].copy()
    for m in range(grid.M):
        um = u[m]

        def rhs(t, xs, ys):
            return lifted_field(spec, t, um, xs, ys, w)

        with np.errstate(over="ignore", invalid="ignore"):
            # overflow is reported below as a NumericalError with the step index
            x, y = _step(rhs, times[m], h, x, y, method)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise NumericalError(f"non-finite state at step {m}", step=m)
        if np.any(y[positive] <= 0):
            raise NumericalError(f"particle mass lost positivity at step {m}", step=m)
        X[m + 1], Y[m + 1] = x, y
    return TrajectoryBundle(times, X, Y, w.copy(), u, method)


def integrate_balance_law(
    spec: ModelSpec,
    u: ControlSignal,
    theta: ParticleMeasure,
    grid: TimeGrid,
    method: str = "rk4",
) -> tuple[np.ndarray, np.ndarray]:
    """Direct bookkeeping path: evolve positions and atom masses m_k = w_k y_k.

    Returns (positions (M+1, N, n), atom masses (M+1, N)); used to cross-check
    the lifted path through the barycentric projection.
    """
    _check_grid(u, grid, method)
    times, h = grid.nodes, grid.h
    x, a = theta.points.copy(), theta.weights.copy()
    X = np.empty((grid.M + 1,) + x.shape)
    A = np.empty((grid.M + 1,) + a.shape)
    X[0], A[0] = x, a
    for m in range(grid.M):
        um = u[m]

        def rhs(t, xs, masses):
            mu = ParticleMeasure(xs, masses)
            return spec.field(t, um, mu, xs), masses * spec.source(t, um, mu, xs)

        x, a = _step(rhs, times[m], h, x, a, method)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(a))):
            raise NumericalError(f"non-finite state at step {m}", step=m)
        X[m + 1], A[m + 1] = x, a
    return X, A


def measure_at(traj: TrajectoryBundle, m: int) -> ParticleMeasure:
    if not 0 <= m <= traj.M:
        raise IndexError(f"node {m} outside 0..{traj.M}")
    return barycentric_projection(traj.ensemble(m))


def mass_curve(traj: TrajectoryBundle) -> np.ndarray:
    """Array of (t, total mass) rows, one per node."""
    masses = traj.masses @ traj.weights
    return np.column_stack([traj.times, masses])


def weak_form_residual(
    traj: TrajectoryBundle,
    spec: ModelSpec,
    u: ControlSignal,
    phi: Callable[[np.ndarray], np.ndarray],
    grad_phi: Callable[[np.ndarray], np.ndarray],
) -> np.ndarray:
    """Per-step defect of d/dt <mu, phi> = <mu, grad phi . F + G phi>.

    The time derivative is the forward difference over a step; the right-hand
    side is evaluated at the step midpoint, with the particle state there
    interpolated linearly. Returns one absolute residual per step.
    """
    h = traj.h
    res = np.empty(traj.M)
    w = traj.weights
    pairing = [float((w * traj.masses[m]) @ phi(traj.positions[m])) for m in range(traj.M + 1)]
    for m in range(traj.M):
        tm = traj.times[m] + 0.5 * h
        x, y = traj.state_at(tm)
        mu = current_measure(x, y, w)
        F = spec.field(tm, u[m], mu, x)
        G = spec.source(tm, u[m], mu, x)
        integrand = (grad_phi(x) * F).sum(axis=1) + G * phi(x)
        rhs = float(mu.weights @ integrand)
        res[m] = abs((pairing[m + 1] - pairing[m]) / h - rhs)
    return res


def support_bound(spec: ModelSpec, e0: LiftedEnsemble, T: float) -> float:
    """A priori radius of the support of (x, y) over [0, T] from the sublinearity constant.

    With |G| <= C one has y_k(t) <= y_k(0) e^{Ct} and mass(t) <= mass(0) e^{Ct};
    then |dx/dt| <= C (1 + mass) and |dy/dt| <= C y integrate to the bound.
    """
    C = spec.sublinear_constant
    if C is None:
        raise ValueError("model declares no sublinearity constant")
    r0 = float(np.max(np.sqrt((e0.positions ** 2).sum(axis=1) + e0.masses ** 2)))
    growth = np.exp(C * T)
    sup_mass = float(e0.weights @ e0.masses) * growth
    sup_y = float(np.max(e0.masses)) * growth
    return r0 + (C * (1.0 + sup_mass) + C * sup_y) * T


# --- CSV ---------------------------------------------------------------------

def write_trajectory_csv(traj: TrajectoryBundle, path: str | Path) -> None:
    n = traj.positions.shape[2]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "k"] + [f"x_{i}" for i in range(n)] + ["y", "w"])
        for m, t in enumerate(traj.times):
            for k in range(traj.weights.shape[0]):
                writer.writerow(
                    [repr(float(t)), k]
                    + [repr(float(v)) for v in traj.positions[m, k]]
                    + [repr(float(traj.masses[m, k])), repr(float(traj.weights[k]))]
                )


def read_trajectory_initial(path: str | Path) -> ParticleMeasure:
    """Read a trajectory CSV back and return the measure at its first node."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    n = len(header) - 4
    t0 = rows[0][0]
    first = [r for r in rows if r[0] == t0]
    data = np.array([[float(v) for v in r[2:]] for r in first])
    return ParticleMeasure(data[:, :n], data[:, n + 1] * data[:, n])


def moments(traj: TrajectoryBundle) -> np.ndarray:
    """Rows (t, mass, mean_0..mean_{n-1}, second_moment), moments normalised by mass."""
    rows = []
    for m, t in enumerate(traj.times):
        a = traj.weights * traj.masses[m]
        mass = a.sum()
        x = traj.positions[m]
        mean = (a @ x) / mass if mass > 0 else np.full(x.shape[1], np.nan)
        second = (a @ (x ** 2).sum(axis=1)) / mass if mass > 0 else np.nan
        rows.append([t, mass, *mean, second])
    return np.array(rows)


def write_moments_csv(traj: TrajectoryBundle, path: str | Path) -> None:
    n = traj.positions.shape[2]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "mass"] + [f"mean_{i}" for i in range(n)] + ["second_moment"])
        for row in moments(traj):
            writer.writerow([repr(float(v)) for v in row])


def write_mass_curve_csv(traj: TrajectoryBundle, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "mass"])
        for t, mass in mass_curve(traj):
            writer.writerow([repr(float(t)), repr(float(mass))])
