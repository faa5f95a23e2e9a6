"""Dynamics and cost bundles for controlled nonlocal balance laws.

All callbacks are vectorised over query points. With ``mu`` a
:class:`ParticleMeasure`, ``x`` of shape (K, n) and ``xp`` of shape (J, n):

==================  ==========================  ============
callback            signature                   shape
==================  ==========================  ============
field               (t, u, mu, x)               (K, n)
source              (t, u, mu, x)               (K,)
field_dx            (t, u, mu, x)               (K, n, n)
source_dx           (t, u, mu, x)               (K, n)
field_flat          (t, u, mu, x, xp)           (K, J, n)
source_flat         (t, u, mu, x, xp)           (K, J)
field_intrinsic     (t, u, mu, x, xp)           (K, J, n, n)
source_intrinsic    (t, u, mu, x, xp)           (K, J, n)
field_du            (t, u, mu, x)               (K, n, m)
source_du           (t, u, mu, x)               (K, m)
==================  ==========================  ============

``field_dx[k, i, l] = dF_i/dx_l``; ``field_intrinsic[k, j, i, l]`` is the
derivative of ``field_flat[k, j, i]`` with respect to ``xp[j, l]`` (the
location of the measure perturbation). A derivative callback left as ``None``
means "identically zero"; the engine skips it.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .measure import ParticleMeasure

Callback = Optional[Callable[..., np.ndarray]]


@dataclass(frozen=True)
class CostSpec:
    """Terminal cost l(mu) with its flat and intrinsic derivatives."""

    value: Callable[[ParticleMeasure], float]
    flat: Callable[[ParticleMeasure, np.ndarray], np.ndarray]
    intrinsic: Callable[[ParticleMeasure, np.ndarray], np.ndarray]
    name: str = "cost"

    def scaled(self, alpha: float) -> CostSpec:
        return CostSpec(
            value=lambda mu: alpha * self.value(mu),
            flat=lambda mu, x: alpha * self.flat(mu, x),
            intrinsic=lambda mu, x: alpha * self.intrinsic(mu, x),
            name=f"{alpha}*{self.name}",
        )


@dataclass(frozen=True)
class ModelSpec:
    dim: int
    control_dim: int
    control_lower: np.ndarray
    control_upper: np.ndarray
    field: Callable[..., np.ndarray]
    source: Callable[..., np.ndarray]
    cost: CostSpec
    field_dx: Callback = None
    source_dx: Callback = None
    field_flat: Callback = None
    source_flat: Callback = None
    field_intrinsic: Callback = None
    source_intrinsic: Callback = None
    field_du: Callback = None
    source_du: Callback = None
    # declared sublinearity constant: |G| <= C, |F| <= C (1 + mu(R^n))
    sublinear_constant: Optional[float] = None
    # F and G affine in u: lets Hamiltonian maximisation evaluate H at m + 1 points only
    control_affine: bool = False
    name: str = "model"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        lo = np.asarray(self.control_lower, dtype=float).reshape(-1)
        hi = np.asarray(self.control_upper, dtype=float).reshape(-1)
        if lo.shape != (self.control_dim,) or hi.shape != (self.control_dim,):
            raise ValueError("control bounds must have length control_dim")
        if np.any(lo > hi):
            raise ValueError("control box needs lower <= upper")
        object.__setattr__(self, "control_lower", lo)
        object.__setattr__(self, "control_upper", hi)

    @property
    def u_differentiable(self) -> bool:
        return self.field_du is not None or self.source_du is not None

    def with_cost(self, cost: CostSpec) -> ModelSpec:
        return replace(self, cost=cost)

    def clip(self, u: np.ndarray) -> np.ndarray:
        return np.clip(u, self.control_lower, self.control_upper)

    # zero-aware evaluation helpers used by the integrators

    def eval_field_dx(self, t, u, mu, x):
        if self.field_dx is None:
            return np.zeros((x.shape[0], self.dim, self.dim))
        return self.field_dx(t, u, mu, x)

    def eval_source_dx(self, t, u, mu, x):
        if self.source_dx is None:
            return np.zeros((x.shape[0], self.dim))
        return self.source_dx(t, u, mu, x)

    def eval_field_flat(self, t, u, mu, x, xp):
        if self.field_flat is None:
            return np.zeros((x.shape[0], xp.shape[0], self.dim))
        return self.field_flat(t, u, mu, x, xp)

    def eval_source_flat(self, t, u, mu, x, xp):
        if self.source_flat is None:
            return np.zeros((x.shape[0], xp.shape[0]))
        return self.source_flat(t, u, mu, x, xp)

    def eval_field_intrinsic(self, t, u, mu, x, xp):
        if self.field_intrinsic is None:
            return np.zeros((x.shape[0], xp.shape[0], self.dim, self.dim))
        return self.field_intrinsic(t, u, mu, x, xp)

    def eval_source_intrinsic(self, t, u, mu, x, xp):
        if self.source_intrinsic is None:
            return np.zeros((x.shape[0], xp.shape[0], self.dim))
        return self.source_intrinsic(t, u, mu, x, xp)

    def eval_field_du(self, t, u, mu, x):
        if not self.u_differentiable:
            raise ValueError("model not u-differentiable")
        if self.field_du is None:
            return np.zeros((x.shape[0], self.dim, self.control_dim))
        return self.field_du(t, u, mu, x)

    def eval_source_du(self, t, u, mu, x):
        if not self.u_differentiable:
            raise ValueError("model not u-differentiable")
        if self.source_du is None:
            return np.zeros((x.shape[0], self.control_dim))
        return self.source_du(t, u, mu, x)


# --- costs -------------------------------------------------------------------

def zero_cost() -> CostSpec:
    return CostSpec(
        value=lambda mu: 0.0,
        flat=lambda mu, x: np.zeros(x.shape[0]),
        intrinsic=lambda mu, x: np.zeros_like(x, dtype=float),
        name="zero",
    )


def second_moment_cost(center=0.0) -> CostSpec:
    """l(mu) = 1/2 int |x - c|^2 dmu. Linear in mu."""
    c = np.atleast_1d(np.asarray(center, dtype=float))

    def value(mu):
        return float(0.5 * mu.weights @ ((mu.points - c) ** 2).sum(axis=1))

    return CostSpec(
        value=value,
        flat=lambda mu, x: 0.5 * ((x - c) ** 2).sum(axis=1),
        intrinsic=lambda mu, x: x - c,
        name="second-moment",
    )


def interaction_cost() -> CostSpec:
    """l(mu) = 1/2 iint |x - x'|^2 dmu dmu, a quadratic functional of mu."""

    def sq_dist(x, pts):
        return ((x[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)

    def value(mu):
        return float(0.5 * mu.weights @ sq_dist(mu.points, mu.points) @ mu.weights)

    def flat(mu, x):
        return sq_dist(x, mu.points) @ mu.weights

    def intrinsic(mu, x):
        mass = mu.weights.sum()
        return 2.0 * (mass * x - mu.weights @ mu.points)

    return CostSpec(value=value, flat=flat, intrinsic=intrinsic, name="interaction")


def sum_costs(*costs: CostSpec) -> CostSpec:
    return CostSpec(
        value=lambda mu: sum(c.value(mu) for c in costs),
        flat=lambda mu, x: sum(c.flat(mu, x) for c in costs),
        intrinsic=lambda mu, x: sum(c.intrinsic(mu, x) for c in costs),
        name="+".join(c.name for c in costs),
    )


COSTS = {
    "zero": lambda **kw: zero_cost(),
    "second-moment": lambda center=0.0, **kw: second_moment_cost(center),
    "interaction": lambda **kw: interaction_cost(),
}


# --- scalar benchmark --------------------------------------------------------

def builtin_scalar_benchmark(cost: CostSpec | None = None) -> ModelSpec:
    """F = u, G = -u on the line, U = [-1, 1], l(mu) = 1/2 int x^2 dmu."""

    def field_fn(t, u, mu, x):
        return np.full((x.shape[0], 1), float(np.asarray(u).reshape(-1)[0]))

    def source_fn(t, u, mu, x):
        return np.full(x.shape[0], -float(np.asarray(u).reshape(-1)[0]))

    return ModelSpec(
        dim=1,
        control_dim=1,
        control_lower=[-1.0],
        control_upper=[1.0],
        field=field_fn,
        source=source_fn,
        cost=second_moment_cost(0.0) if cost is None else cost,
        field_du=lambda t, u, mu, x: np.ones((x.shape[0], 1, 1)),
        source_du=lambda t, u, mu, x: -np.ones((x.shape[0], 1)),
        sublinear_constant=1.0,
        control_affine=True,
        name="scalar-benchmark",
    )


# --- opinion dynamics kernels ------------------------------------------------

@dataclass(frozen=True)
class InteractionKernel:
    """Opinion-change kernel psi: R^n -> R^n with its Jacobian."""

    value: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    name: str = "psi"


@dataclass(frozen=True)
class InfluenceKernel:
    """Influence-exchange kernel S(x, x1) with partial gradients in both slots."""

    value: Callable[[np.ndarray, np.ndarray], np.ndarray]
    grad_x: Callable[[np.ndarray, np.ndarray], np.ndarray]
    grad_y: Callable[[np.ndarray, np.ndarray], np.ndarray]
    skew: bool = False
    name: str = "S"


def linear_psi(scale: float = 1.0) -> InteractionKernel:
    def jac(z):
        return scale * np.broadcast_to(np.eye(z.shape[-1]), z.shape + (z.shape[-1],)).copy()

    return InteractionKernel(value=lambda z: scale * z, jacobian=jac, name="linear")


def gaussian_psi(scale: float = 1.0, width: float = 1.0) -> InteractionKernel:
    """psi(z) = scale * z * exp(-|z|^2 / width^2): attraction that fades with distance."""

    def value(z):
        r2 = (z ** 2).sum(axis=-1, keepdims=True)
        return scale * z * np.exp(-r2 / width ** 2)

    def jac(z):
        n = z.shape[-1]
        e = np.exp(-(z ** 2).sum(axis=-1) / width ** 2)[..., None, None]
        outer = z[..., :, None] * z[..., None, :]
        return scale * e * (np.eye(n) - 2.0 * outer / width ** 2)

    return InteractionKernel(value=value, jacobian=jac, name="gaussian")


def linear_influence(scale: float = 1.0) -> InfluenceKernel:
    """S(x, x1) = scale * sum_i (x1_i - x_i); skew-symmetric."""

    def value(x, y):
        return scale * (y - x).sum(axis=-1)

    def grad_x(x, y):
        return -scale * np.ones(np.broadcast_shapes(x.shape, y.shape))

    def grad_y(x, y):
        return scale * np.ones(np.broadcast_shapes(x.shape, y.shape))

    return InfluenceKernel(value, grad_x, grad_y, skew=True, name="linear")


def tanh_influence(scale: float = 1.0) -> InfluenceKernel:
    """S(x, x1) = scale * tanh(sum_i (x1_i - x_i)); skew-symmetric and bounded."""

    def value(x, y):
        return scale * np.tanh((y - x).sum(axis=-1))

    def _d(x, y):
        s = 1.0 - np.tanh((y - x).sum(axis=-1)) ** 2
        return scale * s[..., None] * np.ones(np.broadcast_shapes(x.shape, y.shape))

    return InfluenceKernel(value, lambda x, y: -_d(x, y), _d, skew=True, name="tanh")


def gaussian_influence(scale: float = 1.0, width: float = 1.0) -> InfluenceKernel:
    """S(x, x1) = scale * exp(-|x - x1|^2 / width^2); symmetric, so mass is not conserved."""

    def value(x, y):
        return scale * np.exp(-((x - y) ** 2).sum(axis=-1) / width ** 2)

    def grad_y(x, y):
        return (2.0 / width ** 2) * (x - y) * value(x, y)[..., None]

    return InfluenceKernel(value, lambda x, y: -grad_y(x, y), grad_y, skew=False, name="gaussian")


PSI_KERNELS = {"linear": linear_psi, "gaussian": gaussian_psi}
S_KERNELS = {"linear": linear_influence, "tanh": tanh_influence, "gaussian": gaussian_influence}


def builtin_opinion_dynamics(
    psi: InteractionKernel,
    S: InfluenceKernel,
    dim: int = 1,
    cost: CostSpec | None = None,
) -> ModelSpec:
    """Mean-field opinion model with pairwise influence exchange.

    F(mu, x) = int psi(y - x) dmu(y),  G(mu, x) = int S(x, x1) dmu(x1).
    The control is a dummy scalar on [0, 0]; wrap with :func:`with_control_drift`
    to steer the opinions.
    """

    def diffs(x, pts):
        # z[k, j] = pts_j - x_k
        return pts[None, :, :] - x[:, None, :]

    def field_fn(t, u, mu, x):
        return np.einsum("kjn,j->kn", psi.value(diffs(x, mu.points)), mu.weights)

    def field_dx(t, u, mu, x):
        return -np.einsum("kjnl,j->knl", psi.jacobian(diffs(x, mu.points)), mu.weights)

    def field_flat(t, u, mu, x, xp):
        return psi.value(diffs(x, xp))

    def field_intrinsic(t, u, mu, x, xp):
        return psi.jacobian(diffs(x, xp))

    def pair(x, pts):
        return np.broadcast_arrays(x[:, None, :], pts[None, :, :])

    def source_fn(t, u, mu, x):
        a, b = pair(x, mu.points)
        return S.value(a, b) @ mu.weights

    def source_dx(t, u, mu, x):
        a, b = pair(x, mu.points)
        return np.einsum("kjn,j->kn", S.grad_x(a, b), mu.weights)

    def source_flat(t, u, mu, x, xp):
        a, b = pair(x, xp)
        return S.value(a, b)

    def source_intrinsic(t, u, mu, x, xp):
        a, b = pair(x, xp)
        return S.grad_y(a, b)

    return ModelSpec(
        dim=dim,
        control_dim=1,
        control_lower=[0.0],
        control_upper=[0.0],
        field=field_fn,
        source=source_fn,
        cost=interaction_cost() if cost is None else cost,
        field_dx=field_dx,
        source_dx=source_dx,
        field_flat=field_flat,
        source_flat=source_flat,
        field_intrinsic=field_intrinsic,
        source_intrinsic=source_intrinsic,
        control_affine=True,
        name="opinion",
        params={"psi": psi.name, "S": S.name, "skew": S.skew},
    )


def with_control_drift(spec: ModelSpec, bound: float = 1.0) -> ModelSpec:
    """Add an additive control u in [-bound, bound]^n to the drift: F + u."""
    n = spec.dim
    base_field = spec.field

    def field_fn(t, u, mu, x):
        return base_field(t, u, mu, x) + np.asarray(u, dtype=float).reshape(1, n)

    return replace(
        spec,
        control_dim=n,
        control_lower=np.full(n, -bound),
        control_upper=np.full(n, bound),
        field=field_fn,
        field_du=lambda t, u, mu, x: np.broadcast_to(np.eye(n), (x.shape[0], n, n)).copy(),
        source_du=lambda t, u, mu, x: np.zeros((x.shape[0], n)),
        name=spec.name + "+drift",
    )


# --- small analytic models ---------------------------------------------------

def builtin_constant_source(rate: float = 0.0, dim: int = 1, cost: CostSpec | None = None) -> ModelSpec:
    """F = 0, G = rate: pure exponential growth (or frozen dynamics for rate 0)."""
    return ModelSpec(
        dim=dim,
        control_dim=1,
        control_lower=[0.0],
        control_upper=[0.0],
        field=lambda t, u, mu, x: np.zeros((x.shape[0], dim)),
        source=lambda t, u, mu, x: np.full(x.shape[0], float(rate)),
        cost=second_moment_cost(np.zeros(dim)) if cost is None else cost,
        sublinear_constant=abs(float(rate)),
        control_affine=True,
        name="constant-source",
        params={"rate": rate},
    )


def builtin_linear_field(A, cost: CostSpec | None = None) -> ModelSpec:
    """Local linear drift F = A x with no source."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    return ModelSpec(
        dim=n,
        control_dim=1,
        control_lower=[0.0],
        control_upper=[0.0],
        field=lambda t, u, mu, x: x @ A.T,
        source=lambda t, u, mu, x: np.zeros(x.shape[0]),
        cost=second_moment_cost(np.zeros(n)) if cost is None else cost,
        field_dx=lambda t, u, mu, x: np.broadcast_to(A, (x.shape[0], n, n)).copy(),
        control_affine=True,
        name="linear",
        params={"A": A.tolist()},
    )
