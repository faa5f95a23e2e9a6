import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from measurepmp.measure import (
    LiftedEnsemble,
    ParticleMeasure,
    SignedParticleMeasure,
    barycentric_projection,
    difference,
    flat_norm,
    integrate,
    merge_coincident,
    pushforward,
    read_measure_csv,
    support_radius,
    total_mass,
    w2_distance,
    write_measure_csv,
)


# --- independent oracles --------------------------------------------------------

def w2_by_permutations(xa, xb, mass=1.0):
    """Equal-weight atoms: by Birkhoff an optimal plan is a permutation."""
    k = len(xa)
    best = min(
        sum(((xa[i] - xb[s[i]]) ** 2).sum() for i in range(k))
        for s in itertools.permutations(range(k))
    )
    return np.sqrt(mass * best / k)


def flat_by_partial_transport(d: SignedParticleMeasure):
    """Primal form: move positive onto negative mass at cost |x - y|, create/destroy at cost 1 per unit."""
    pos = d.weights > 0
    xa, a = d.points[pos], d.weights[pos]
    xb, b = d.points[~pos], -d.weights[~pos]
    if len(a) == 0 or len(b) == 0:
        return float(a.sum() + b.sum())
    ka, kb = len(a), len(b)
    dist = np.linalg.norm(xa[:, None] - xb[None], axis=-1).reshape(-1)
    # objective: sum pi c + (sum a - sum pi) + (sum b - sum pi)
    c = dist - 2.0
    A = np.zeros((ka + kb, ka * kb))
    for i in range(ka):
        A[i, i * kb:(i + 1) * kb] = 1
    for j in range(kb):
        A[ka + j, j::kb] = 1
    res = linprog(c, A_ub=A, b_ub=np.concatenate([a, b]), bounds=(0, None), method="highs-ipm")
    return float(res.fun + a.sum() + b.sum())


# --- construction and basic operations -----------------------------------------

def test_particle_measure_rejects_negative_weights():
    with pytest.raises(ValueError):
        ParticleMeasure([[0.0]], [-1.0])


def test_signed_measure_accepts_negative_weights():
    m = SignedParticleMeasure([[0.0], [1.0]], [1.0, -2.0])
    assert total_mass(m) == -1.0


def test_shape_mismatch_and_nonfinite():
    with pytest.raises(ValueError):
        ParticleMeasure([[0.0], [1.0]], [1.0])
    with pytest.raises(ValueError):
        ParticleMeasure([[np.nan]], [1.0])


def test_flat_list_is_scalar_positions():
    m = ParticleMeasure([0.0, 1.0, 2.0], [1, 1, 1])
    assert m.points.shape == (3, 1)


def test_integrate_and_pushforward():
    m = ParticleMeasure([[1.0], [3.0]], [0.5, 2.0])
    assert integrate(m, lambda x: x[:, 0] ** 2) == pytest.approx(0.5 + 18.0)
    shifted = pushforward(m, lambda x: x + 1.0)
    np.testing.assert_array_equal(shifted.points[:, 0], [2.0, 4.0])
    np.testing.assert_array_equal(shifted.weights, m.weights)


def test_lifted_ensemble_weight_sum():
    with pytest.raises(ValueError):
        LiftedEnsemble([[0.0], [1.0]], [1.0, 1.0], [0.5, 0.6])
    with pytest.raises(ValueError):
        LiftedEnsemble([[0.0]], [-1.0], [1.0])


def test_barycentric_projection_weights():
    e = LiftedEnsemble([[0.0], [1.0]], [2.0, 3.0], [0.25, 0.75])
    mu = barycentric_projection(e)
    np.testing.assert_allclose(mu.weights, [0.5, 2.25])
    assert total_mass(mu) == pytest.approx(2.75)


def test_barycentric_projection_of_dirac_lift_returns_theta():
    theta = ParticleMeasure([[0.0], [4.0]], [0.5, 0.5])
    e = LiftedEnsemble(theta.points, [1.0, 1.0], theta.weights)
    np.testing.assert_array_equal(barycentric_projection(e).weights, theta.weights)


def test_merge_coincident_is_canonical():
    m = SignedParticleMeasure([[1.0], [0.0], [1.0]], [1.0, 2.0, -0.5])
    merged = merge_coincident(m)
    np.testing.assert_array_equal(merged.points[:, 0], [0.0, 1.0])
    np.testing.assert_array_equal(merged.weights, [2.0, 0.5])
    assert isinstance(merged, SignedParticleMeasure)


def test_support_radius():
    e = LiftedEnsemble([[3.0]], [4.0], [1.0])
    assert support_radius(e) == 5.0


def test_csv_roundtrip(tmp_path):
    m = ParticleMeasure(np.random.default_rng(1).normal(size=(7, 2)), np.random.default_rng(2).uniform(size=7))
    path = tmp_path / "m.csv"
    write_measure_csv(m, path)
    back = read_measure_csv(path)
    np.testing.assert_array_equal(back.points, m.points)
    np.testing.assert_array_equal(back.weights, m.weights)


def test_csv_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_measure_csv(path)


# --- W2 ----------------------------------------------------------------------------

def test_w2_between_diracs():
    assert w2_distance(ParticleMeasure.dirac(0.0), ParticleMeasure.dirac(3.0)) == pytest.approx(3.0)
    # mass scales the squared distance
    assert w2_distance(ParticleMeasure.dirac(0.0, 4.0), ParticleMeasure.dirac(3.0, 4.0)) == pytest.approx(6.0)


def test_w2_self_is_zero():
    m = ParticleMeasure(np.random.default_rng(0).normal(size=(6, 2)), np.full(6, 1 / 6))
    assert w2_distance(m, m) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("dim", [1, 2, 3])
@pytest.mark.parametrize("seed", range(4))
def test_w2_matches_permutation_oracle(dim, seed):
    rng = np.random.default_rng(seed)
    k = 5
    xa, xb = rng.normal(size=(k, dim)), rng.normal(size=(k, dim))
    mass = 2.5
    a = ParticleMeasure(xa, np.full(k, mass / k))
    b = ParticleMeasure(xb, np.full(k, mass / k))
    assert w2_distance(a, b) == pytest.approx(w2_by_permutations(xa, xb, mass), rel=1e-9, abs=1e-12)


def test_w2_1d_path_matches_lp_path():
    # a 1-D problem embedded in 2-D forces the LP; the values must agree
    rng = np.random.default_rng(5)
    xa, xb = rng.normal(size=(6, 1)), rng.normal(size=(4, 1))
    wa, wb = rng.uniform(0.1, 1, 6), rng.uniform(0.1, 1, 4)
    wb *= wa.sum() / wb.sum()
    d1 = w2_distance(ParticleMeasure(xa, wa), ParticleMeasure(xb, wb))
    pad = lambda x: np.column_stack([x, np.zeros_like(x)])
    d2 = w2_distance(ParticleMeasure(pad(xa), wa), ParticleMeasure(pad(xb), wb))
    assert d1 == pytest.approx(d2, rel=1e-9)


def test_w2_unbalanced_raises():
    with pytest.raises(ValueError, match="unbalanced"):
        w2_distance(ParticleMeasure.dirac(0.0, 1.0), ParticleMeasure.dirac(0.0, 2.0))


def test_w2_too_large_raises():
    m = ParticleMeasure(np.arange(12.0).reshape(-1, 2), np.ones(6))
    with pytest.raises(ValueError, match="too large"):
        w2_distance(m, m, max_points=5)


# --- flat norm -------------------------------------------------------------------------

def test_flat_norm_single_atom_and_pairs():
    assert flat_norm(SignedParticleMeasure([[1.0]], [-2.5])) == 2.5
    d = ParticleMeasure.dirac(0.0) - ParticleMeasure.dirac(0.5)
    assert flat_norm(d) == pytest.approx(0.5)
    d = ParticleMeasure.dirac(0.0) - ParticleMeasure.dirac(5.0)
    assert flat_norm(d) == pytest.approx(2.0)


def test_flat_norm_zero():
    m = ParticleMeasure([[1.0]], [1.0])
    assert flat_norm(m - m) == 0.0


@pytest.mark.parametrize("seed", range(6))
def test_flat_norm_matches_primal_oracle(seed):
    rng = np.random.default_rng(seed)
    dim = 1 + seed % 3
    d = SignedParticleMeasure(rng.normal(scale=1.5, size=(7, dim)), rng.normal(size=7))
    assert flat_norm(d) == pytest.approx(flat_by_partial_transport(d), rel=1e-7, abs=1e-9)


def test_flat_norm_too_large_raises():
    d = SignedParticleMeasure(np.arange(6.0)[:, None], np.ones(6))
    with pytest.raises(ValueError, match="too large"):
        flat_norm(d, max_points=3)


# --- metric properties -------------------------------------------------------------------

coords = st.floats(-5, 5, allow_nan=False)
masses = st.floats(0.05, 3.0)


def measures(k=3, dim=2):
    return st.builds(
        lambda pts, w: ParticleMeasure(np.array(pts).reshape(k, dim), np.array(w)),
        st.lists(coords, min_size=k * dim, max_size=k * dim),
        st.lists(masses, min_size=k, max_size=k),
    )


def normalised(m):
    return ParticleMeasure(m.points, m.weights / m.weights.sum())


@settings(max_examples=40, deadline=None)
@given(measures(), measures(), measures())
def test_w2_is_a_metric(a, b, c):
    a, b, c = normalised(a), normalised(b), normalised(c)
    ab, bc, ac = w2_distance(a, b), w2_distance(b, c), w2_distance(a, c)
    assert ab == pytest.approx(w2_distance(b, a), rel=1e-9, abs=1e-9)
    assert ac <= ab + bc + 1e-9
    assert ab >= 0


@settings(max_examples=40, deadline=None)
@given(measures(), measures(), measures(), st.floats(-3, 3))
def test_flat_norm_is_a_norm(a, b, c, s):
    ab, bc, ac = flat_norm(a - b), flat_norm(b - c), flat_norm(a - c)
    assert ab == pytest.approx(flat_norm(b - a), rel=1e-9, abs=1e-9)
    assert ac <= ab + bc + 1e-9
    # bounded by total variation
    assert ab <= total_mass(a) + total_mass(b) + 1e-9
    d = difference(a, b)
    scaled = SignedParticleMeasure(d.points, s * d.weights)
    assert flat_norm(scaled) == pytest.approx(abs(s) * ab, rel=1e-7, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(measures(k=4, dim=1), measures(k=4, dim=1))
def test_flat_norm_below_w1_for_probabilities(a, b):
    # |phi|_Lip <= 1 makes the flat norm a lower bound of W1 <= W2 for probability measures
    a, b = normalised(a), normalised(b)
    assert flat_norm(a - b) <= w2_distance(a, b) + 1e-9
