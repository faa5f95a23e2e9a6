"""Particle measures, the barycentric projection and the two metrics on measures.

Measures are stored as weighted point clouds. Coincident points are kept as
separate atoms; :func:`merge_coincident` collapses them when a canonical form
is needed (metric computations, equality tests).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import linprog

MAX_EXACT_POINTS = 200
MERGE_TOL = 1e-12
MASS_TOL = 1e-9


def _as_points(points, dim: int | None = None) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 0:
        pts = pts.reshape(1, 1)
    elif pts.ndim == 1:
        # a flat list is read as scalar positions unless a dimension says otherwise
        pts = pts.reshape(-1, 1) if dim in (None, 1) else pts.reshape(1, -1)
    if pts.ndim != 2:
        raise ValueError(f"points must be a (K, n) array, got shape {pts.shape}")
    return pts


@dataclass(frozen=True, eq=False)
class SignedParticleMeasure:
    """Finite signed combination of Dirac masses on R^n."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = _as_points(self.points)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if pts.shape[0] != w.shape[0]:
            raise ValueError(f"{pts.shape[0]} points but {w.shape[0]} weights")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(w))):
            raise ValueError("points and weights must be finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        self._check_weights()

    def _check_weights(self):
        pass

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.weights.shape[0]

    def __sub__(self, other: SignedParticleMeasure) -> SignedParticleMeasure:
        return difference(self, other)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(n={self.dim}, atoms={len(self)}, mass={self.weights.sum():.6g})"


class ParticleMeasure(SignedParticleMeasure):
    """Nonnegative measure with finite support, stored as weighted atoms."""

    def _check_weights(self):
        if np.any(self.weights < 0):
            raise ValueError("ParticleMeasure weights must be nonnegative")

    @classmethod
    def _unchecked(cls, points: np.ndarray, weights: np.ndarray) -> ParticleMeasure:
        # hot path for integrators: arrays are already (K, n) / (K,) floats
        obj = object.__new__(cls)
        object.__setattr__(obj, "points", points)
        object.__setattr__(obj, "weights", weights)
        return obj

    @classmethod
    def dirac(cls, x, mass: float = 1.0) -> ParticleMeasure:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return cls(x.reshape(1, -1), [mass])


@dataclass(frozen=True, eq=False)
class LiftedEnsemble:
    """Particles (x_k, y_k) with base weights w_k: a probability measure on R^n x R+."""

    positions: np.ndarray
    masses: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        x = _as_points(self.positions)
        y = np.asarray(self.masses, dtype=float).reshape(-1)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if not (x.shape[0] == y.shape[0] == w.shape[0]):
            raise ValueError("positions, masses and weights must have equal length")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"base weights must be nonnegative and sum to 1 (sum={w.sum()!r})")
        if np.any(y < 0):
            raise ValueError("masses must be nonnegative")
        object.__setattr__(self, "positions", x)
        object.__setattr__(self, "masses", y)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def __len__(self) -> int:
        return self.weights.shape[0]

    def as_product_measure(self) -> ParticleMeasure:
        """The ensemble as a probability measure on R^{n+1} (points (x, y), weights w)."""
        return ParticleMeasure(np.column_stack([self.positions, self.masses]), self.weights)


def total_mass(m: SignedParticleMeasure) -> float:
    return float(np.sum(m.weights))


def integrate(m: SignedParticleMeasure, phi: Callable[[np.ndarray], np.ndarray]) -> float:
    """Pairing <m, phi>; ``phi`` maps a (K, n) array of points to K values."""
    if len(m) == 0:
        return 0.0
    vals = np.asarray(phi(m.points), dtype=float).reshape(-1)
    return float(m.weights @ vals)


def pushforward(m: SignedParticleMeasure, T: Callable[[np.ndarray], np.ndarray]) -> SignedParticleMeasure:
    """Image measure under T; atoms are moved, never merged."""
    pts = np.asarray(T(m.points), dtype=float).reshape(len(m), -1)
    return type(m)(pts, m.weights.copy())


def barycentric_projection(e: LiftedEnsemble) -> ParticleMeasure:
    """Send the ensemble to sum_k w_k y_k delta_{x_k}."""
    return ParticleMeasure(e.positions.copy(), e.weights * e.masses)


def difference(a: SignedParticleMeasure, b: SignedParticleMeasure) -> SignedParticleMeasure:
    if len(a) and len(b) and a.dim != b.dim:
        raise ValueError("measures live in different dimensions")
    return SignedParticleMeasure(np.vstack([a.points, b.points]), np.concatenate([a.weights, -b.weights]))


def merge_coincident(m: SignedParticleMeasure, tol: float = MERGE_TOL) -> SignedParticleMeasure:
    """Collapse atoms closer than ``tol`` (sup-norm) into one, summing weights.

    Output atoms are in lexicographic order, which makes the result canonical.
    """
    if len(m) == 0:
        return m
    order = np.lexsort(m.points.T[::-1])
    pts = m.points[order]
    w = m.weights[order]
    keep_pts, keep_w = [pts[0]], [w[0]]
    for p, wi in zip(pts[1:], w[1:]):
        hit = None
        for i, q in enumerate(keep_pts):
            if np.max(np.abs(p - q)) <= tol:
                hit = i
                break
        if hit is None:
            keep_pts.append(p)
            keep_w.append(wi)
        else:
            keep_w[hit] += wi
    return type(m)(np.array(keep_pts), np.array(keep_w))


def _check_size(*sizes: int, cap: int) -> None:
    if max(sizes) > cap:
        raise ValueError(f"measure with {max(sizes)} atoms is too large for exact solver (cap {cap})")


def _w2_squared_1d(xa, wa, xb, wb) -> float:
    # monotone coupling: walk both sorted atom lists (north-west corner rule)
    ia, ib = np.argsort(xa, kind="stable"), np.argsort(xb, kind="stable")
    xa, wa, xb, wb = xa[ia], wa[ia].copy(), xb[ib], wb[ib].copy()
    i = j = 0
    cost = 0.0
    while i < len(xa) and j < len(xb):
        flow = min(wa[i], wb[j])
        cost += flow * (xa[i] - xb[j]) ** 2
        wa[i] -= flow
        wb[j] -= flow
        if wa[i] <= wb[j]:
            i += 1
        else:
            j += 1
    return cost


def _w2_squared_lp(xa, wa, xb, wb) -> float:
    ka, kb = len(wa), len(wb)
    cost = ((xa[:, None, :] - xb[None, :, :]) ** 2).sum(axis=-1).reshape(-1)
    scale = float(cost.max())
    if scale == 0.0:
        return 0.0
    cost = cost / scale
    a_eq = np.zeros((ka + kb, ka * kb))
    for i in range(ka):
        a_eq[i, i * kb:(i + 1) * kb] = 1.0
    for j in range(kb):
        a_eq[ka + j, j::kb] = 1.0
    b_eq = np.concatenate([wa, wb])
    # the two marginal blocks are linearly dependent; drop one row
    res = linprog(cost, A_eq=a_eq[:-1], b_eq=b_eq[:-1], bounds=(0, None), method="highs-ds")
    if res.status != 0:
        raise RuntimeError(f"transportation LP failed: {res.message}")
    return float(res.fun) * scale


def w2_distance(a: ParticleMeasure, b: ParticleMeasure, max_points: int = MAX_EXACT_POINTS) -> float:
    """Quadratic Kantorovich distance between two measures of equal total mass.

    Returns sqrt(min over plans pi with marginals (a, b) of sum pi_ij |x_i - y_j|^2).
    In one dimension the monotone coupling is used; otherwise the transportation
    LP is solved exactly by the dual simplex method.
    """
    ma, mb = total_mass(a), total_mass(b)
    if abs(ma - mb) > MASS_TOL * max(1.0, abs(ma)):
        raise ValueError(f"unbalanced measures: masses {ma!r} and {mb!r}")
    if ma <= 0:
        raise ValueError("unbalanced measures: zero total mass")
    if a.dim != b.dim:
        raise ValueError("measures live in different dimensions")
    a, b = merge_coincident(a), merge_coincident(b)
    _check_size(len(a), len(b), cap=max_points)
    # normalise both to the common mass so rounding in the totals cannot break feasibility
    wa = a.weights / ma
    wb = b.weights / mb
    if a.dim == 1:
        sq = _w2_squared_1d(a.points[:, 0], wa, b.points[:, 0], wb)
    else:
        sq = _w2_squared_lp(a.points, wa, b.points, wb)
    return float(np.sqrt(max(sq, 0.0) * ma))


def flat_norm(d: SignedParticleMeasure, max_points: int = MAX_EXACT_POINTS) -> float:
    """Kantorovich-Rubinstein norm: sup of <d, phi> over phi with |phi| <= 1, Lip(phi) <= 1.

    For atomic d the supremum is a finite LP in the values of phi at the atoms.
    """
    d = merge_coincident(d)
    k = len(d)
    if k == 0 or not np.any(d.weights):
        return 0.0
    _check_size(k, cap=max_points)
    if k == 1:
        return float(abs(d.weights[0]))
    dist = np.linalg.norm(d.points[:, None, :] - d.points[None, :, :], axis=-1)
    ii, jj = np.triu_indices(k, 1)
    n_pairs = ii.size
    a_ub = np.zeros((2 * n_pairs, k))
    rows = np.arange(n_pairs)
    a_ub[rows, ii] = 1.0
    a_ub[rows, jj] = -1.0
    a_ub[n_pairs + rows, ii] = -1.0
    a_ub[n_pairs + rows, jj] = 1.0
    b_ub = np.concatenate([dist[ii, jj], dist[ii, jj]])
    # solver tolerances are absolute, so optimise against unit-scale weights
    scale = float(np.max(np.abs(d.weights)))
    res = linprog(-d.weights / scale, A_ub=a_ub, b_ub=b_ub, bounds=(-1.0, 1.0), method="highs-ds")
    if res.status != 0:
        raise RuntimeError(f"flat-norm LP failed: {res.message}")
    return float(-res.fun) * scale


def support_radius(e: LiftedEnsemble) -> float:
    if len(e) == 0:
        return 0.0
    return float(np.max(np.sqrt((e.positions ** 2).sum(axis=1) + e.masses ** 2)))


# --- CSV ---------------------------------------------------------------------

def write_measure_csv(m: SignedParticleMeasure, path: str | Path) -> None:
    header = [f"x_{i}" for i in range(m.dim)] + ["weight"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for p, w in zip(m.points, m.weights):
            writer.writerow([repr(float(v)) for v in p] + [repr(float(w))])


def read_measure_csv(path: str | Path) -> ParticleMeasure:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty measure file")
    header = [h.strip() for h in rows[0]]
    if header[-1] != "weight" or any(h != f"x_{i}" for i, h in enumerate(header[:-1])):
        raise ValueError(f"{path}: expected header x_0,...,x_{{n-1}},weight, got {','.join(header)}")
    data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    if data.size == 0:
        raise ValueError(f"{path}: no particles")
    return ParticleMeasure(data[:, :-1], data[:, -1])
