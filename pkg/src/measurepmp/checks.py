"""Finite-difference validators for flat and intrinsic derivatives and sampled assumption checks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .measure import LiftedEnsemble, ParticleMeasure, barycentric_projection, flat_norm
from .model import CostSpec, ModelSpec


@dataclass
class DerivativeReport:
    name: str
    claimed: float
    quotients: list = field(default_factory=list)
    discrepancy: float = 0.0
    tolerance: float = 0.0
    passed: bool = True


def _mix(mu: ParticleMeasure, nu: ParticleMeasure, t: float) -> ParticleMeasure:
    """The convex combination mu + t (nu - mu), atoms of both kept."""
    return ParticleMeasure(np.vstack([mu.points, nu.points]), np.concatenate([(1 - t) * mu.weights, t * nu.weights]))


def check_flat_derivative(
    Q: CostSpec,
    mu: ParticleMeasure,
    mu2: ParticleMeasure,
    t_steps=(1e-2, 5e-3, 2.5e-3, 1.25e-3),
    rtol: float = 1e-6,
) -> DerivativeReport:
    """Compare difference quotients of Q along mu -> mu2 with int dQ/dmu(mu, .) d(mu2 - mu).

    The two smallest steps are combined by linear (Richardson) extrapolation to
    t = 0, which removes the O(t) curvature term of smooth functionals.
    """
    q0 = Q.value(mu)
    claimed = float(mu2.weights @ Q.flat(mu, mu2.points) - mu.weights @ Q.flat(mu, mu.points))
    ts = sorted(t_steps, reverse=True)
    quotients = [(Q.value(_mix(mu, mu2, t)) - q0) / t for t in ts]
    if len(ts) >= 2:
        t1, t2 = ts[-2], ts[-1]
        d1, d2 = quotients[-2], quotients[-1]
        limit = (t1 * d2 - t2 * d1) / (t1 - t2)
    else:
        limit = quotients[-1]
    disc = abs(limit - claimed)
    tol = rtol * (1.0 + abs(q0))
    return DerivativeReport(Q.name, claimed, quotients, disc, tol, disc <= tol)


@dataclass
class LiftedDerivativeReport:
    flat_discrepancy: float
    intrinsic_discrepancy: float
    intrinsic_claimed: np.ndarray
    intrinsic_fd: np.ndarray
    tolerance: float
    passed: bool


def lifted_intrinsic(Q: CostSpec, e: LiftedEnsemble) -> np.ndarray:
    """Rows [y grad_mu Q(beta, x), dQ/dmu(beta, x)] per particle."""
    mu = barycentric_projection(e)
    x = e.positions
    grad = np.asarray(Q.intrinsic(mu, x), dtype=float).reshape(x.shape)
    flat = np.asarray(Q.flat(mu, x), dtype=float).reshape(-1)
    return np.column_stack([e.masses[:, None] * grad, flat])


def check_lifted_derivative(Q: CostSpec, e: LiftedEnsemble, step: float = 1e-5, rtol: float = 1e-6, probe=None) -> LiftedDerivativeReport:
    """Check the derivatives of Q o beta on the lifted space by finite differences.

    Intrinsic part: moving particle k by s changes Q(beta(rho)) at rate
    w_k * grad_rho Q(rho, x_k, y_k) . s (central differences in each
    coordinate). Flat part: the quotient along rho -> delta_{probe} is compared
    with y dQ/dmu integrated against the direction (probe defaults to a shifted
    copy of the first particle).
    """
    def Qhat(x, y):
        return Q.value(ParticleMeasure(x, e.weights * y))

    claimed = lifted_intrinsic(Q, e)
    fd = np.zeros_like(claimed)
    x0, y0 = e.positions, e.masses
    n = e.dim
    for k in range(len(e)):
        if e.weights[k] == 0:
            continue
        for i in range(n + 1):
            vals = []
            for s in (step, -step):
                x, y = x0.copy(), y0.copy()
                if i < n:
                    x[k, i] += s
                else:
                    y[k] += s
                vals.append(Qhat(x, y))
            fd[k, i] = (vals[0] - vals[1]) / (2 * step) / e.weights[k]
    scale = max(1.0, float(np.max(np.abs(claimed))))
    intrinsic_disc = float(np.max(np.abs(fd - claimed))) / scale

    # flat derivative along rho -> delta_{(xp, yp)}
    if probe is None:
        probe = (x0[0] + 0.25, y0[0] * 1.5 + 0.1)
    xp = np.atleast_1d(np.asarray(probe[0], dtype=float)).reshape(1, n)
    yp = float(probe[1])
    mu = barycentric_projection(e)
    flat_claim = yp * float(Q.flat(mu, xp)[0]) - float(e.weights @ (e.masses * Q.flat(mu, x0)))
    q0 = Q.value(mu)
    ts = (1e-3, 5e-4)
    quot = []
    for t in ts:
        pts = np.vstack([x0, xp])
        wts = np.concatenate([(1 - t) * e.weights * e.masses, [t * yp]])
        quot.append((Q.value(ParticleMeasure(pts, wts)) - q0) / t)
    limit = (ts[0] * quot[1] - ts[1] * quot[0]) / (ts[0] - ts[1])
    flat_disc = abs(limit - flat_claim) / (1.0 + abs(q0))
    return LiftedDerivativeReport(flat_disc, intrinsic_disc, claimed, fd, rtol, max(flat_disc, intrinsic_disc) <= rtol)


# --- derivative callbacks of a model vs finite differences -------------------

def _random_measure(rng, n, atoms=5, radius=1.5):
    return ParticleMeasure(rng.uniform(-radius, radius, size=(atoms, n)), rng.uniform(0.1, 1.0, size=atoms))


def _rel(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    err = float(np.max(np.abs(a - b))) if a.size else 0.0
    if err == 0.0:
        return 0.0
    return err / max(float(np.max(np.abs(b))), 1e-8)


def _mass_fd(fn, mu: ParticleMeasure, xp: np.ndarray, eps: float):
    """Richardson-extrapolated one-sided quotient [f(mu + eps delta_xp) - f(mu)] / eps."""
    base = fn(mu)

    def quot(e):
        bumped = ParticleMeasure(np.vstack([mu.points, xp[None, :]]), np.concatenate([mu.weights, [e]]))
        return (fn(bumped) - base) / e

    return 2.0 * quot(eps / 2) - quot(eps)


def check_model_derivatives(spec: ModelSpec, n_points: int = 20, seed: int = 0, step: float = 1e-6) -> dict:
    """Worst relative error of every provided derivative callback against finite differences.

    Returns ``{callback name: worst relative error}``; spatial and control
    derivatives use central differences, flat derivatives Richardson-extrapolated
    mass perturbations, intrinsic derivatives central differences of the flat one.
    """
    rng = np.random.default_rng(seed)
    n = spec.dim
    worst: dict[str, float] = {}

    def record(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    lo = np.where(np.isfinite(spec.control_lower), spec.control_lower, -1.0)
    hi = np.where(np.isfinite(spec.control_upper), spec.control_upper, 1.0)
    for _ in range(n_points):
        mu = _random_measure(rng, n)
        x = rng.uniform(-1.5, 1.5, size=(1, n))
        xp = rng.uniform(-1.5, 1.5, size=(1, n))
        t = float(rng.uniform(0, 1))
        u = rng.uniform(lo, hi)

        def F(xx, mm=mu, uu=u):
            return spec.field(t, uu, mm, xx)[0]

        def G(xx, mm=mu, uu=u):
            return float(spec.source(t, uu, mm, xx)[0])

        def central(fn, base, h=step):
            cols = []
            for i in range(base.shape[-1]):
                d = np.zeros_like(base)
                d[..., i] = h
                cols.append((np.asarray(fn(base + d)) - np.asarray(fn(base - d))) / (2 * h))
            return np.stack(cols, axis=-1)

        if spec.field_dx is not None:
            record("field_dx", _rel(spec.field_dx(t, u, mu, x)[0], central(F, x)))
        if spec.source_dx is not None:
            record("source_dx", _rel(spec.source_dx(t, u, mu, x)[0], central(G, x)))
        if spec.field_flat is not None:
            fd = _mass_fd(lambda m: F(x, m), mu, xp[0], 1e-5)
            record("field_flat", _rel(spec.field_flat(t, u, mu, x, xp)[0, 0], fd))
        if spec.source_flat is not None:
            fd = _mass_fd(lambda m: G(x, m), mu, xp[0], 1e-5)
            record("source_flat", _rel(spec.source_flat(t, u, mu, x, xp)[0, 0], fd))
        if spec.field_intrinsic is not None:
            fd = central(lambda z: spec.eval_field_flat(t, u, mu, x, z[None, :])[0, 0], xp[0])
            record("field_intrinsic", _rel(spec.field_intrinsic(t, u, mu, x, xp)[0, 0], fd))
        if spec.source_intrinsic is not None:
            fd = central(lambda z: spec.eval_source_flat(t, u, mu, x, z[None, :])[0, 0], xp[0])
            record("source_intrinsic", _rel(spec.source_intrinsic(t, u, mu, x, xp)[0, 0], fd))
        if spec.field_du is not None:
            fd = central(lambda v: spec.field(t, v, mu, x)[0], u)
            record("field_du", _rel(spec.field_du(t, u, mu, x)[0], fd))
        if spec.source_du is not None:
            fd = central(lambda v: spec.source(t, v, mu, x)[0], u)
            record("source_du", _rel(spec.source_du(t, u, mu, x)[0], fd))
        cost = spec.cost
        fd = _mass_fd(cost.value, mu, xp[0], 1e-5)
        record("cost_flat", _rel(cost.flat(mu, xp)[0], fd))
        fd = central(lambda z: cost.flat(mu, z[None, :])[0], xp[0])
        record("cost_intrinsic", _rel(cost.intrinsic(mu, xp)[0], fd))
    return worst


SPATIAL_TOL = 1e-5
MEASURE_TOL = 1e-4


def derivative_tolerance(name: str) -> float:
    return SPATIAL_TOL if name.endswith(("_dx", "_du")) else MEASURE_TOL


# --- sampled assumption checks -----------------------------------------------

@dataclass
class SamplingConfig:
    n_samples: int = 200
    radius: float = 2.0
    max_mass: float = 2.0
    atoms: int = 5
    T: float = 1.0
    delta: float = 1e-4
    seed: int = 0


@dataclass
class AssumptionReport:
    field_bound_ratio: float        # sup |F| / (1 + mu(R^n))
    source_bound: float             # sup |G|
    lipschitz_x: dict
    lipschitz_mu: dict
    declared_constant: float | None
    violations: list
    passed: bool


def check_assumptions(spec: ModelSpec, samples: SamplingConfig | None = None) -> AssumptionReport:
    """Monte-Carlo estimates of the sublinearity and local Lipschitz constants on a compact set.

    Measures have ``atoms`` atoms in the ball of radius ``radius`` and total
    mass up to ``max_mass``. Lipschitz in mu is measured in the flat norm.
    Estimates exceeding the declared sublinearity constant are reported as
    violations. Sampling cannot certify uniformity in (t, u).
    """
    cfg = samples or SamplingConfig()
    rng = np.random.default_rng(cfg.seed)
    n = spec.dim
    lo = np.where(np.isfinite(spec.control_lower), spec.control_lower, -1.0)
    hi = np.where(np.isfinite(spec.control_upper), spec.control_upper, 1.0)
    f_ratio = g_sup = 0.0
    lip_x = {"field": 0.0, "source": 0.0}
    lip_mu = {"field": 0.0, "source": 0.0}
    for _ in range(cfg.n_samples):
        pts = rng.uniform(-cfg.radius, cfg.radius, size=(cfg.atoms, n))
        w = rng.uniform(0.0, 1.0, size=cfg.atoms)
        w *= rng.uniform(0.0, cfg.max_mass) / max(w.sum(), 1e-300)
        mu = ParticleMeasure(pts, w)
        x = rng.uniform(-cfg.radius, cfg.radius, size=(1, n))
        t = float(rng.uniform(0.0, cfg.T))
        u = rng.uniform(lo, hi)
        F = spec.field(t, u, mu, x)[0]
        G = float(spec.source(t, u, mu, x)[0])
        f_ratio = max(f_ratio, float(np.linalg.norm(F)) / (1.0 + w.sum()))
        g_sup = max(g_sup, abs(G))

        v = rng.normal(size=(1, n))
        dx = cfg.delta * v / np.linalg.norm(v)
        lip_x["field"] = max(lip_x["field"], float(np.linalg.norm(spec.field(t, u, mu, x + dx)[0] - F)) / cfg.delta)
        lip_x["source"] = max(lip_x["source"], abs(float(spec.source(t, u, mu, x + dx)[0]) - G) / cfg.delta)

        moved = ParticleMeasure(pts + cfg.delta * rng.normal(size=pts.shape), w * (1.0 + cfg.delta * rng.uniform(-1, 1, size=w.shape)))
        dist = flat_norm(mu - moved)
        if dist > 0:
            lip_mu["field"] = max(lip_mu["field"], float(np.linalg.norm(spec.field(t, u, moved, x)[0] - F)) / dist)
            lip_mu["source"] = max(lip_mu["source"], abs(float(spec.source(t, u, moved, x)[0]) - G) / dist)
    violations = []
    C = spec.sublinear_constant
    if C is not None:
        if f_ratio > C * (1 + 1e-9):
            violations.append(f"|F| / (1 + mass) reached {f_ratio:.6g} > C = {C:.6g}")
        if g_sup > C * (1 + 1e-9):
            violations.append(f"|G| reached {g_sup:.6g} > C = {C:.6g}")
    return AssumptionReport(f_ratio, g_sup, lip_x, lip_mu, C, violations, not violations)


def functional_at(spec: ModelSpec, which: str, t: float, u, x) -> CostSpec:
    """View mu -> F_i(t, u, mu, x) (which="field:i") or G(t, u, mu, x) as a functional with derivatives."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if which == "source":
        return CostSpec(
            value=lambda mu: float(spec.source(t, u, mu, x)[0]),
            flat=lambda mu, z: spec.eval_source_flat(t, u, mu, x, z)[0],
            intrinsic=lambda mu, z: spec.eval_source_intrinsic(t, u, mu, x, z)[0],
            name="G",
        )
    i = int(which.split(":")[1]) if ":" in which else 0
    return CostSpec(
        value=lambda mu: float(spec.field(t, u, mu, x)[0, i]),
        flat=lambda mu, z: spec.eval_field_flat(t, u, mu, x, z)[0, :, i],
        intrinsic=lambda mu, z: spec.eval_field_intrinsic(t, u, mu, x, z)[0, :, i, :],
        name=f"F_{i}",
    )
