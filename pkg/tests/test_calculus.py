import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poisson_ot.calculus import (
    difference,
    edge_table_from_csv,
    edge_table_to_csv,
    entropy,
    fisher,
    fisher_terms,
    flux_atoms,
    flux_density,
    flux_divergence,
    flux_mass_bound_check,
    generator_apply,
    lagrangian,
    log_mean,
    log_mean_grad,
    quad_over_lin,
    rho_hat,
    skorokhod_div,
)
from poisson_ot.config_space import Density, poisson_space

from conftest import positive

positive_floats = st.floats(1e-8, 1e8, allow_nan=False, allow_infinity=False)


def test_difference_one_site():
    ref = poisson_space([1.0], [3])
    np.testing.assert_array_equal(difference(ref, [0.0, 1.0, 4.0, 9.0]), [1.0, 3.0, 5.0])


def test_adjointness(ref2, rng):
    """``<D F, u>_{pi (x) m} = <F, div u>_pi``."""
    for _ in range(20):
        F = rng.normal(size=ref2.lattice.n_states)
        u = rng.normal(size=ref2.lattice.n_edges)
        lhs = (difference(ref2, F) * u) @ ref2.edge_weights
        rhs = (F * skorokhod_div(ref2, u)) @ ref2.weights
        assert abs(lhs - rhs) < 1e-12


def test_generator_is_pi_invariant_and_symmetric(ref2, rng):
    F, G = rng.normal(size=(2, ref2.lattice.n_states))
    LF = generator_apply(ref2, F)
    assert abs(LF @ ref2.weights) < 1e-12
    assert (LF * G) @ ref2.weights == pytest.approx((F * generator_apply(ref2, G)) @ ref2.weights, abs=1e-12)


def test_generator_on_identity_function():
    """``L eta = m - eta`` away from the cap."""
    ref = poisson_space([1.5], [10])
    n = np.arange(11.0)
    Ln = generator_apply(ref, n)
    np.testing.assert_allclose(Ln[:-1], 1.5 - n[:-1], atol=1e-13)
    assert Ln[-1] == pytest.approx(-10.0)


def test_generator_kills_constants(ref2):
    np.testing.assert_allclose(generator_apply(ref2, np.ones(ref2.lattice.n_states)), 0.0, atol=1e-15)


def test_flux_divergence_conserves_mass(ref2, rng):
    assert abs(flux_divergence(ref2, rng.normal(size=ref2.lattice.n_edges)).sum()) < 1e-12


def test_flux_divergence_matches_skorokhod(ref2, rng):
    """Atoms ``V = w pi m`` have net inflow ``pi div w`` (detailed balance)."""
    w = rng.normal(size=ref2.lattice.n_edges)
    np.testing.assert_allclose(flux_divergence(ref2, flux_atoms(ref2, w)), ref2.weights * skorokhod_div(ref2, w), atol=1e-14)
    np.testing.assert_allclose(flux_density(ref2, flux_atoms(ref2, w)), w, rtol=1e-14)


@pytest.mark.parametrize("s,t,expected", [(1.0, 1.0, 1.0), (2.0, 2.0, 2.0), (0.0, 3.0, 0.0), (np.e, 1.0, np.e - 1.0), (0.0, 0.0, 0.0)])
def test_log_mean_values(s, t, expected):
    assert log_mean(s, t) == pytest.approx(expected, rel=1e-15, abs=1e-300)


def test_log_mean_near_diagonal_keeps_precision():
    s = 1.0 + np.array([1e-13, 1e-9, 5e-5, 2e-4])
    exact = (s - 1) / np.log1p(s - 1)
    np.testing.assert_allclose(log_mean(s, 1.0), exact, rtol=1e-14)


def test_log_mean_rejects_negative():
    with pytest.raises(ValueError):
        log_mean(-1.0, 1.0)


@settings(max_examples=200, deadline=None)
@given(s=positive_floats, t=positive_floats)
def test_log_mean_between_geometric_and_arithmetic(s, t):
    th = log_mean(s, t)
    assert np.sqrt(s * t) * (1 - 1e-12) <= th <= 0.5 * (s + t) * (1 + 1e-12)
    assert log_mean(t, s) == th
    assert log_mean(3 * s, 3 * t) == pytest.approx(3 * th, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(s=st.floats(1e-3, 1e3), t=st.floats(1e-3, 1e3))
def test_log_mean_gradient_matches_finite_differences(s, t):
    th, ds, dt = log_mean_grad(np.array(s), np.array(t))
    h = 1e-6
    fd_s = (log_mean(s * (1 + h), t) - log_mean(s * (1 - h), t)) / (2 * h * s)
    fd_t = (log_mean(s, t * (1 + h)) - log_mean(s, t * (1 - h))) / (2 * h * t)
    assert float(th) == pytest.approx(log_mean(s, t), rel=1e-13)
    assert float(ds) == pytest.approx(fd_s, rel=1e-6, abs=1e-9)
    assert float(dt) == pytest.approx(fd_t, rel=1e-6, abs=1e-9)
    # Euler's relation for a 1-homogeneous function
    assert float(s * ds + t * dt) == pytest.approx(float(th), rel=1e-10)


def test_entropy_and_fisher_at_reference(ref2):
    pi = Density.reference(ref2)
    assert entropy(pi) == 0.0
    assert fisher(pi) == 0.0


def test_entropy_of_dirac():
    ref = poisson_space([1.0], [10])
    mu = Density.dirac(ref, (0,))
    assert entropy(mu) == pytest.approx(-np.log(ref.weights[0]), rel=1e-14)
    assert fisher(mu) == np.inf


def test_fisher_terms_edge_cases():
    np.testing.assert_array_equal(fisher_terms([0.0, 1.0, 0.0, 2.0], [0.0, 0.0, 1.0, 2.0]), [0.0, np.inf, np.inf, 0.0])


def test_fisher_is_dirichlet_form_of_log(ref2):
    """``I = <D rho, D log rho>``."""
    mu = positive(ref2, 4, a=1.0)
    expected = (difference(ref2, mu.rho) * difference(ref2, np.log(mu.rho))) @ ref2.edge_weights
    assert fisher(mu) == pytest.approx(expected, rel=1e-13)


def test_rho_hat_at_reference(ref2):
    np.testing.assert_allclose(rho_hat(Density.reference(ref2)), 1.0, rtol=1e-15)


def test_quad_over_lin():
    np.testing.assert_array_equal(quad_over_lin([0.0, 2.0, 1.0], [0.0, 4.0, 0.0]), [0.0, 1.0, np.inf])


def test_lagrangian_is_quadratic_in_flux(ref2, rng):
    mu = positive(ref2, 2)
    V = rng.normal(size=ref2.lattice.n_edges) * ref2.edge_weights
    assert lagrangian(mu, 3 * V) == pytest.approx(9 * lagrangian(mu, V), rel=1e-13)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), lam=st.floats(0.0, 1.0))
def test_lagrangian_is_jointly_convex(seed, lam):
    ref = poisson_space([1.0, 0.5], [4, 3])
    rng = np.random.default_rng(seed)
    mu0, mu1 = positive(ref, seed, a=1.5), positive(ref, seed + 1, a=1.5)
    V0, V1 = rng.normal(size=(2, ref.lattice.n_edges)) * ref.edge_weights
    mid = Density(ref, (1 - lam) * mu0.rho + lam * mu1.rho)
    lhs = lagrangian(mid, (1 - lam) * V0 + lam * V1)
    rhs = (1 - lam) * lagrangian(mu0, V0) + lam * lagrangian(mu1, V1)
    assert lhs <= rhs * (1 + 1e-12) + 1e-15


def test_lagrangian_infinite_on_zero_mobility():
    ref = poisson_space([1.0], [3])
    mu = Density.dirac(ref, (0,))
    assert lagrangian(mu, np.array([0.0, 0.0, 0.1])) == np.inf
    assert lagrangian(mu, np.zeros(3)) == 0.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_flux_mass_bound(seed):
    ref = poisson_space([1.0, 2.0], [5, 5])
    rng = np.random.default_rng(seed)
    mu = positive(ref, seed, a=1.0)
    V = rng.normal(size=ref.lattice.n_edges) * ref.edge_weights
    assert flux_mass_bound_check(mu, V).holds


def test_edge_table_roundtrip(ref2, rng):
    vals = rng.normal(size=ref2.lattice.n_edges)
    text = edge_table_to_csv(ref2, vals, "w")
    assert text.splitlines()[1] == "edge,w"
    np.testing.assert_array_equal(edge_table_from_csv(ref2, text), vals)
    with pytest.raises(ValueError):
        edge_table_from_csv(poisson_space([1.0], [3]), text)
