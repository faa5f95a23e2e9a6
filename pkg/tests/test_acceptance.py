"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are printed even
when output capture is on.
"""
import time

import numpy as np
import pytest

from measurepmp.adjoint import (
    control_gradient,
    control_grid,
    finite_difference_gradient,
    integrate_adjoint_backward,
    pmp_residual,
)
from measurepmp.checks import check_flat_derivative, check_lifted_derivative, functional_at
from measurepmp.forward import ControlSignal, TimeGrid, discretize_initial, integrate_forward, mass_curve, weak_form_residual
from measurepmp.measure import LiftedEnsemble, ParticleMeasure
from measurepmp.model import (
    builtin_constant_source,
    builtin_opinion_dynamics,
    builtin_scalar_benchmark,
    gaussian_influence,
    gaussian_psi,
    interaction_cost,
    linear_influence,
    linear_psi,
    second_moment_cost,
    sum_costs,
    tanh_influence,
    with_control_drift,
)
from measurepmp.optimize import OptimizerConfig, optimize
from measurepmp.suites import beta_lipschitz_ratio, hamiltonian_gap, random_ensemble

pytestmark = pytest.mark.acceptance

E = np.e


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        return ok

    return emit


def sweep(spec, u, theta, M, method="rk4", T=1.0):
    traj = integrate_forward(spec, u, discretize_initial(theta), TimeGrid(T, M), method)
    return traj, integrate_adjoint_backward(spec, u, traj)


def steered_opinion(S=tanh_influence(), psi=linear_psi()):
    spec = with_control_drift(builtin_opinion_dynamics(psi, S, dim=2))
    return spec.with_cost(sum_costs(second_moment_cost([1.0, -0.5]), interaction_cost()))


def bang_cost(theta, v):
    # I[+1] = (1 / 2e) int (x + 1)^2 dtheta, I[-1] = (e / 2) int (x - 1)^2 dtheta
    x, w = theta.points[:, 0], theta.weights
    return float(w @ (x + v) ** 2) * np.exp(-v) / 2


def test_criterion_01_benchmark_optimum(report):
    cases = [
        ("delta_2", ParticleMeasure.dirac(2.0), -1.0, E / 2),
        ("(delta_0 + delta_4)/2", ParticleMeasure([[0.0], [4.0]], [0.5, 0.5]), 1.0, 13 / (2 * E)),
    ]
    spec = builtin_scalar_benchmark()
    ok, parts = True, []
    for label, theta, v, target in cases:
        start = time.perf_counter()
        rep = optimize(spec, theta, TimeGrid(1.0, 1000), OptimizerConfig(integrator="rk4"))
        elapsed = time.perf_counter() - start
        good = bool(np.all(rep.control.values == v)) and abs(rep.cost - target) <= 1e-3 and elapsed <= 10.0
        ok &= good
        parts.append(f"{label}: u={np.unique(rep.control.values).tolist()} cost={rep.cost:.7f} (target {target:.7f}) {elapsed:.2f}s")
    assert report(1, ok, "; ".join(parts) + " [tol 1e-3, 10 s]")


def expected_bang(theta):
    """Bang predicted by the selection rule, or None when no bang is a strict extremal."""
    x, w = theta.points[:, 0], theta.weights
    mass = w.sum()
    plus = w @ x ** 2 > mass
    minus = w @ (x - 2) ** 2 < mass
    if plus and minus:
        return 1.0 if w @ (E ** 2 * (x - 1) ** 2 - (x + 1) ** 2) > 0 else -1.0
    if plus:
        return 1.0
    if minus:
        return -1.0
    return None


def test_criterion_02_extremal_selection(report):
    spec = builtin_scalar_benchmark()
    ok, parts = True, []
    for x0 in (0.5, 1.0, 1.5, 2.0, 3.0):
        theta = ParticleMeasure.dirac(x0)
        rep = optimize(spec, theta, TimeGrid(1.0, 1000))
        want = expected_bang(theta)
        vals = np.unique(rep.control.values)
        if want is not None:
            good = vals.tolist() == [want] and rep.classification == "bang"
            got = f"{vals.tolist()}"
        else:
            # no strict bang extremal: the result must not be one, and must do at least as well as both bangs
            good = rep.classification != "bang" and rep.cost <= min(bang_cost(theta, 1.0), bang_cost(theta, -1.0)) + 1e-12
            got = f"{rep.classification} (mean u {rep.control.values.mean():.4f}, cost {rep.cost:.2e})"
        ok &= good
        parts.append(f"x0={x0}: rule {want}, got {got}")
    assert report(2, ok, "; ".join(parts))


def test_criterion_03_dirac_reduction(report):
    spec = builtin_scalar_benchmark()
    rng = np.random.default_rng(0)
    M = 1000
    worst = 0.0
    for x0 in (-1.0, 0.5, 2.0):
        for u in (ControlSignal.constant(-1.0, M), ControlSignal.constant(0.3, M), ControlSignal(rng.uniform(-1, 1, (M, 1)))):
            traj = integrate_forward(spec, u, discretize_initial(ParticleMeasure.dirac(x0)), TimeGrid(1.0, M), "rk4")
            # X' = u, Y' = -u Y with piecewise constant u
            a = np.concatenate([[0.0], np.cumsum(u.values[:, 0]) / M])
            worst = max(worst, np.max(np.abs(traj.positions[:, 0, 0] - (x0 + a))), np.max(np.abs(traj.masses[:, 0] - np.exp(-a))))
    assert report(3, worst <= 1e-8, f"max |(x, y) - closed form| = {worst:.3e} [tol 1e-8]")


def test_criterion_04_exponential_mass(report):
    worst = 0.0
    theta = ParticleMeasure([[-1.0, 0.0], [0.5, 2.0], [3.0, -1.0]], [0.2, 0.3, 0.5])
    for c in (-2.0, -0.5, 0.7, 1.5):
        for T in (0.5, 1.0, 2.0):
            spec = builtin_constant_source(c, dim=2)
            traj = integrate_forward(spec, ControlSignal.constant(0.0, 1000), discretize_initial(theta), TimeGrid(T, 1000))
            worst = max(worst, np.max(np.abs(traj.masses[-1] - np.exp(c * T))))
    assert report(4, worst <= 1e-8, f"max |y_k(T) - exp(cT)| = {worst:.3e} [tol 1e-8]")


def test_criterion_05_skew_mass_conservation(report):
    rng = np.random.default_rng(1)
    worst = 0.0
    for psi in (linear_psi(), gaussian_psi(1.0, 1.5)):
        for dim in (1, 2):
            spec = builtin_opinion_dynamics(psi, linear_influence(), dim=dim)
            theta = ParticleMeasure(rng.normal(size=(64, dim)), rng.uniform(0.5, 1.5, 64) / 64)
            traj = integrate_forward(spec, ControlSignal.constant(0.0, 1000), discretize_initial(theta), TimeGrid(1.0, 1000))
            mass = mass_curve(traj)[:, 1]
            worst = max(worst, np.max(np.abs(mass - mass[0])))
    assert report(5, worst <= 1e-6, f"max |M(t) - M(0)| = {worst:.3e} [tol 1e-6]")


def test_criterion_06_hamiltonian_versions(report):
    rng = np.random.default_rng(2)
    bench = builtin_scalar_benchmark()
    theta_b = ParticleMeasure([[0.0], [4.0], [1.3]], [0.5, 0.3, 0.2])
    u_b = ControlSignal(rng.uniform(-1, 1, (100, 1)))
    traj, cs = sweep(bench, u_b, theta_b, 100)
    gap_b = hamiltonian_gap(bench, traj, cs, range(0, 101, 10), control_grid(bench, 21))
    spec = steered_opinion(tanh_influence(), gaussian_psi(1.0, 1.5))
    theta_o = ParticleMeasure(rng.normal(size=(16, 2)), rng.uniform(0.5, 1.5, 16) / 16)
    u_o = ControlSignal(rng.uniform(-1, 1, (50, 2)))
    traj, cs = sweep(spec, u_o, theta_o, 50)
    gap_o = hamiltonian_gap(spec, traj, cs, range(0, 51, 5), control_grid(spec, 7))
    ok = gap_b <= 1e-12 and gap_o <= 1e-12
    assert report(6, ok, f"relative |H_v1 - H_v2|: benchmark {gap_b:.2e}, opinion {gap_o:.2e} [tol 1e-12]")


def test_criterion_07_adjoint_gradient(report):
    rng = np.random.default_rng(3)
    M = 200
    idx = np.linspace(0, M - 1, 9).round().astype(int)
    bench = builtin_scalar_benchmark()
    theta_b = ParticleMeasure([[0.0], [4.0]], [0.5, 0.5])
    u_b = ControlSignal(rng.uniform(-0.9, 0.9, (M, 1)))
    traj, cs = sweep(bench, u_b, theta_b, M)
    g = control_gradient(bench, u_b, traj, cs)
    fd = finite_difference_gradient(bench, u_b, theta_b, TimeGrid(1.0, M), idx, step=1e-5)
    err_b = float(np.max(np.abs(g[idx] - fd[idx])) / np.max(np.abs(fd[idx])))
    spec = steered_opinion(tanh_influence(), gaussian_psi(1.0, 1.5))
    theta_o = ParticleMeasure(rng.normal(size=(32, 2)), rng.uniform(0.5, 1.5, 32) / 32)
    u_o = ControlSignal(rng.uniform(-0.5, 0.5, (M, 2)))
    traj, cs = sweep(spec, u_o, theta_o, M)
    g = control_gradient(spec, u_o, traj, cs)
    fd = finite_difference_gradient(spec, u_o, theta_o, TimeGrid(1.0, M), idx, step=1e-5)
    err_o = float(np.max(np.abs(g[idx] - fd[idx])) / np.max(np.abs(fd[idx])))
    ok = err_b <= 1e-4 and err_o <= 1e-4
    assert report(7, ok, f"relative gradient error: benchmark {err_b:.2e}, opinion+drift (N=32, M=200) {err_o:.2e} [tol 1e-4]")


def test_criterion_08_derivative_calculus(report):
    rng = np.random.default_rng(4)
    mu = ParticleMeasure(rng.uniform(-1, 1, (5, 2)), rng.uniform(0.2, 1, 5))
    mu2 = ParticleMeasure(rng.uniform(-1, 1, (4, 2)), rng.uniform(0.2, 1, 4))
    ens = LiftedEnsemble(rng.uniform(-1, 1, (5, 2)), rng.uniform(0.5, 2, 5), np.full(5, 0.2))
    functionals = []
    for psi in (linear_psi(), gaussian_psi(1.0, 1.5)):
        for S in (linear_influence(), tanh_influence(), gaussian_influence()):
            spec = builtin_opinion_dynamics(psi, S, dim=2)
            functionals.append((f"G[{psi.name},{S.name}]", functional_at(spec, "source", 0.0, [0.0], [[0.2, -0.4]])))
    functionals += [("l=second moment", second_moment_cost([0.5, -1.0])), ("l=interaction", interaction_cost())]
    failures = []
    for label, Q in functionals:
        flat = check_flat_derivative(Q, mu, mu2, rtol=1e-6)
        lifted = check_lifted_derivative(Q, ens, rtol=1e-6)
        if not (flat.passed and lifted.passed):
            failures.append(label)
    ok = not failures
    assert report(8, ok, f"{len(functionals)} functionals, flat and lifted checks at 1e-6; failures: {failures or 'none'}")


def test_criterion_09_beta_lipschitz(report):
    rng = np.random.default_rng(5)
    worst_excess, worst_ratio = -np.inf, 0.0
    for b in (1.0, 2.0, 4.0):
        for _ in range(200):
            n = int(rng.integers(1, 3))
            e, e2 = random_ensemble(rng, 5, n, b), random_ensemble(rng, 5, n, b)
            lhs, rhs = beta_lipschitz_ratio(e, e2, b)
            worst_excess = max(worst_excess, lhs - rhs)
            if rhs > 0:
                worst_ratio = max(worst_ratio, lhs / rhs)
    ok = worst_excess <= 1e-9
    assert report(9, ok, f"600 pairs, max flat - 2b W2 = {worst_excess:.3e}, max ratio {worst_ratio:.4f} [slack 1e-9]")


def state_error(method, M, u_fn, x0=2.0):
    spec = builtin_scalar_benchmark()
    h = 1.0 / M
    u = ControlSignal(u_fn(np.arange(M) * h)[:, None])
    traj = integrate_forward(spec, u, discretize_initial(ParticleMeasure.dirac(x0)), TimeGrid(1.0, M), method)
    a = np.concatenate([[0.0], np.cumsum(u.values[:, 0]) * h])
    return max(np.max(np.abs(traj.positions[:, 0, 0] - (x0 + a))), np.max(np.abs(traj.masses[:, 0] - np.exp(-a))))


def test_criterion_10_convergence_orders(report):
    def u_fn(t):
        return np.cos(3.0 * t)

    steps = (100, 200, 400)  # h = 1e-2, 5e-3, 2.5e-3
    parts, ok = [], True
    for method, order in (("euler", 1), ("rk4", 4)):
        errs = [state_error(method, M, u_fn) for M in steps]
        ratios = [errs[i] / errs[i + 1] for i in range(2)]
        good = all(abs(r / 2 ** order - 1) <= 0.2 for r in ratios)
        ok &= good
        parts.append(f"{method} ratios {', '.join(f'{r:.3f}' for r in ratios)} (expect {2 ** order})")
    spec = builtin_scalar_benchmark()
    theta = ParticleMeasure([[0.0], [4.0], [1.0]], [0.5, 0.3, 0.2])
    res = []
    for M in steps:
        u = ControlSignal.constant(-0.6, M)
        traj = integrate_forward(spec, u, discretize_initial(theta), TimeGrid(1.0, M))
        res.append(float(np.max(weak_form_residual(traj, spec, u, lambda x: np.sin(x[:, 0]), lambda x: np.cos(x)))))
    wf = [res[i] / res[i + 1] for i in range(2)]
    good = all(abs(r / 4 - 1) <= 0.2 for r in wf)
    ok &= good
    parts.append(f"weak-form ratios {', '.join(f'{r:.3f}' for r in wf)} (expect 4)")
    assert report(10, ok, "; ".join(parts) + " [within 20%]")


def residual_of(theta, v, M=1000):
    spec = builtin_scalar_benchmark()
    u = ControlSignal.constant(v, M)
    traj, cs = sweep(spec, u, theta, M)
    return pmp_residual(spec, u, traj, cs, control_grid(spec))


def test_criterion_11_residual_on_bang_extremals(report):
    r1 = residual_of(ParticleMeasure.dirac(2.0), -1.0)
    r2 = residual_of(ParticleMeasure([[0.0], [4.0]], [0.5, 0.5]), 1.0)
    ok = r1 <= 1e-8 and r2 <= 1e-8
    assert report(11, ok, f"bang extremals: delta_2/u=-1 residual {r1:.2e}, two atoms/u=+1 residual {r2:.2e} [tol 1e-8]")


def test_criterion_11_residual_flags_zero_control_from_delta2(report):
    # stated as: residual >= 1e-3 on u = 0 from theta = delta_2
    r = residual_of(ParticleMeasure.dirac(2.0), 0.0)
    assert report(11, r >= 1e-3, f"u=0 from delta_2 residual {r:.3e} [required >= 1e-3]")


def test_criterion_11_residual_flags_zero_control_from_two_atoms(report):
    # a starting measure where u = 0 is not extremal (switching function 2 e^0 > 0)
    r = residual_of(ParticleMeasure([[0.0], [4.0]], [0.5, 0.5]), 0.0)
    assert report(11, r >= 1e-3, f"u=0 from (delta_0 + delta_4)/2 residual {r:.3e} [required >= 1e-3]")
