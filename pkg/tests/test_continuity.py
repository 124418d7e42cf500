import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poisson_ot.calculus import fisher, flux_divergence
from poisson_ot.config_space import Density, LatticeError, poisson_space
from poisson_ot.continuity import (
    CEPath,
    ce_accumulated_defect,
    ce_residual,
    concatenate,
    constant_path,
    density_at,
    entropy_production_check,
    fisher_along,
    intensity_evolution_check,
    mass_balance_defect,
    ou_path,
    path_from_csv,
    path_length,
    path_speed,
    path_to_csv,
    push_semigroup,
    reparametrize,
)
from poisson_ot.semigroup import evolve

from conftest import positive


@pytest.fixture(scope="module")
def ref():
    return poisson_space([1.0], [10])


@pytest.fixture(scope="module")
def mu0(ref):
    return positive(ref, 1, a=1.0)


def test_constant_path_zero_flux(ref, mu0):
    path = constant_path(mu0, 1.0, 4)
    assert ce_residual(path) == 0.0
    np.testing.assert_array_equal(path_speed(path), 0.0)


def test_constant_path_with_flux_has_divergence_residual(ref, mu0, rng):
    V = rng.normal(size=(1, ref.lattice.n_edges))
    path = constant_path(mu0, 0.5, 1, flux=V)
    assert ce_residual(path) == pytest.approx(0.5 * np.abs(flux_divergence(ref, V[0])).max(), rel=1e-14)


def test_path_validation(ref, mu0):
    with pytest.raises(ValueError):
        CEPath(ref, [0.0, 0.0], np.tile(mu0.rho, (2, 1)), np.zeros((1, ref.lattice.n_edges)))
    with pytest.raises(LatticeError):
        CEPath(ref, [0.0, 1.0], np.tile(mu0.rho, (2, 1)), np.zeros((2, ref.lattice.n_edges)))


def test_path_arrays_are_read_only(mu0):
    path = constant_path(mu0)
    with pytest.raises(ValueError):
        path.rho[0, 0] = 2.0


def test_ou_path_of_reference_is_constant(ref):
    path = ou_path(Density.reference(ref), 1.0, 8)
    np.testing.assert_allclose(path.rho, 1.0, atol=1e-12)
    np.testing.assert_allclose(path.flux, 0.0, atol=1e-14)
    assert ce_residual(path) < 1e-14


@pytest.mark.parametrize("mu", ["positive", "dirac"])
def test_ou_path_conserves_mass(ref, mu0, mu):
    mu = mu0 if mu == "positive" else Density.dirac(ref, (0,))
    path = ou_path(mu, 2.0, 16)
    assert path.mass_error() < 1e-12


def test_ou_path_residual_within_tolerance(mu0):
    path = ou_path(mu0, 1.0, 32)
    assert ce_residual(path) <= path.ce_tol


def test_ou_path_interval_defect_is_third_order(mu0):
    r = [ce_residual(ou_path(mu0, 1.0, K)) for K in (50, 100, 200)]
    ratios = [r[0] / r[1], r[1] / r[2]]
    assert all(6.5 < q < 8.5 for q in ratios), ratios


def test_ou_path_accumulated_defect_is_second_order(mu0):
    r = [ce_accumulated_defect(ou_path(mu0, 1.0, K)) for K in (50, 100, 200)]
    ratios = [r[0] / r[1], r[1] / r[2]]
    assert all(3.5 <= q <= 4.5 for q in ratios), ratios


def test_push_zero_is_identity(mu0):
    path = ou_path(mu0, 1.0, 8)
    assert push_semigroup(path, 0.0) is path


def test_push_rejects_negative(mu0):
    with pytest.raises(ValueError):
        push_semigroup(ou_path(mu0, 1.0, 4), -1.0)


def test_push_of_ou_path_is_ou_path_of_pushed_start(mu0):
    path = ou_path(mu0, 1.0, 16)
    pushed = push_semigroup(path, 0.3)
    direct = ou_path(evolve(mu0, 0.3), 1.0, 16)
    np.testing.assert_allclose(pushed.rho, direct.rho, atol=1e-8)
    np.testing.assert_allclose(pushed.flux, direct.flux, atol=1e-8)


def test_push_keeps_residual(mu0):
    path = ou_path(mu0, 1.0, 16)
    assert ce_residual(push_semigroup(path, 0.5)) <= 10 * ce_residual(path) + 1e-15


def test_push_is_a_semigroup(mu0):
    path = ou_path(mu0, 1.0, 8)
    a = push_semigroup(push_semigroup(path, 0.2), 0.5)
    b = push_semigroup(path, 0.7)
    np.testing.assert_allclose(a.rho, b.rho, atol=1e-10)
    np.testing.assert_allclose(a.flux, b.flux, atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), eps=st.floats(0.01, 2.0))
def test_push_preserves_exact_balance_on_two_sites(seed, eps):
    ref = poisson_space([1.0, 0.5], [5, 4])
    rng = np.random.default_rng(seed)
    mu = positive(ref, seed, a=1.0)
    V = 0.01 * rng.normal(size=ref.lattice.n_edges) * ref.edge_weights
    rho1 = mu.rho + flux_divergence(ref, V) / ref.weights
    path = CEPath(ref, [0.0, 1.0], np.vstack([mu.rho, rho1]), V[None, :])
    assert ce_residual(path) < 1e-15
    assert ce_residual(push_semigroup(path, eps)) < 1e-14


def test_reparametrize_identity(mu0):
    path = ou_path(mu0, 1.0, 8)
    same = reparametrize(path, lambda s: s, 1.0)
    np.testing.assert_allclose(same.rho, path.rho, atol=1e-15)
    np.testing.assert_allclose(same.flux, path.flux, atol=1e-15)


def test_reparametrize_double_speed(mu0):
    path = ou_path(mu0, 1.0, 16)
    fast = reparametrize(path, lambda s: 2 * s, 0.5)
    np.testing.assert_allclose(fast.rho, path.rho, atol=1e-15)
    np.testing.assert_allclose(fast.flux, 2 * path.flux, rtol=1e-12)
    assert path_length(fast) == pytest.approx(path_length(path), abs=1e-6)


@pytest.mark.parametrize("K_new", [16, 40])
def test_reparametrize_quadratic_keeps_balance(mu0, K_new):
    path = ou_path(mu0, 1.0, 32)
    assert ce_residual(path) <= path.ce_tol
    slow = reparametrize(path, lambda s: s * s, 1.0, K_new)
    assert ce_residual(slow) <= slow.ce_tol
    widest = (1.0 - ((K_new - 1) / K_new) ** 2) * 32
    assert slow.ce_tol == pytest.approx(max(widest, 1.0) * path.ce_tol)


def test_reparametrize_keeps_exact_paths_exact():
    ref = poisson_space([1.0, 0.5], [4, 4])
    rng = np.random.default_rng(5)
    rho = [positive(ref, 0, a=0.2).rho]
    fluxes = []
    for _ in range(6):
        V = 0.002 * rng.normal(size=ref.lattice.n_edges) * ref.edge_weights
        rho.append(rho[-1] + flux_divergence(ref, V) / ref.weights / 6)
        fluxes.append(V)
    path = CEPath(ref, np.linspace(0, 1, 7), np.array(rho), np.array(fluxes))
    warped = reparametrize(path, lambda s: s**3, 1.0, 11)
    assert ce_residual(warped) < 1e-15


def test_reparametrize_from_table(mu0):
    path = ou_path(mu0, 1.0, 32)
    assert ce_residual(path) <= path.ce_tol
    table = (np.array([0.0, 1.0, 2.0]), np.array([0.0, 0.2, 1.0]))
    out = reparametrize(path, table, 2.0, 10)
    assert out.T == pytest.approx(2.0)
    assert ce_residual(out) <= out.ce_tol
    # the widest new interval covers 0.16 / (1 / 32) = 5.12 old intervals
    assert out.ce_tol == pytest.approx(5.12 * path.ce_tol)


def test_reparametrize_rejects_non_monotone(mu0):
    path = ou_path(mu0, 1.0, 8)
    with pytest.raises(ValueError):
        reparametrize(path, lambda s: 1 - s, 1.0)


def test_concatenate(ref, mu0):
    a = ou_path(mu0, 1.0, 8)
    b = ou_path(a.density(-1), 0.5, 4)
    c = concatenate(a, b)
    assert c.K == 12 and c.T == pytest.approx(1.5)
    assert ce_residual(c) == pytest.approx(max(ce_residual(a), ce_residual(b)))
    with pytest.raises(ValueError):
        concatenate(b, a)


def test_reversed_path(mu0):
    path = ou_path(mu0, 1.0, 8)
    back = path.reversed()
    assert ce_residual(back) == pytest.approx(ce_residual(path), rel=1e-12)
    np.testing.assert_allclose(back.rho[0], path.rho[-1])


def test_density_at_knots(mu0):
    path = ou_path(mu0, 1.0, 4)
    np.testing.assert_allclose(density_at(path, path.times), path.rho)


def test_intensity_evolution_exact_for_constant_path(mu0):
    rep = intensity_evolution_check(constant_path(mu0, 1.0, 3))
    assert rep.holds and rep.residual == 0.0


def test_intensity_evolution_along_ou_from_empty():
    ref = poisson_space([1.0], [16])
    path = ou_path(Density.dirac(ref, (0,)), 1.0, 200)
    rep = intensity_evolution_check(path)
    assert rep.holds
    np.testing.assert_allclose(rep.detail["intensity"][:, 0], 1 - np.exp(-path.times), atol=1e-4)
    np.testing.assert_allclose(rep.detail["integrated_flux"][:, 0], 1 - np.exp(-path.times), atol=1e-4)


def test_entropy_production_constant_path(mu0):
    rep = entropy_production_check(constant_path(mu0, 1.0, 2))
    assert rep.holds and rep.residual == 0.0


def test_entropy_production_along_ou_matches_fisher(mu0):
    path = ou_path(mu0, 1.0, 64)
    rep = entropy_production_check(path)
    assert rep.holds
    assert rep.detail["rhs"] == pytest.approx(-(path.dt @ fisher_along(path)), rel=1e-3)


def test_entropy_production_skips_vanishing_density(ref):
    rep = entropy_production_check(constant_path(Density.dirac(ref, (0,)), 1.0, 1))
    assert not rep.holds and rep.skipped


def test_ou_speed_is_root_fisher(mu0):
    path = ou_path(mu0, 1.0, 64)
    mid_t = 0.5 * (path.times[:-1] + path.times[1:])
    expected = np.sqrt([fisher(evolve(mu0, t)) for t in mid_t])
    np.testing.assert_allclose(path_speed(path), expected, rtol=2e-3)


def test_csv_roundtrip(mu0):
    path = ou_path(mu0, 1.0, 4)
    dens, flux = path_to_csv(path)
    back = path_from_csv(mu0.ref, dens, flux)
    np.testing.assert_array_equal(back.rho, path.rho)
    np.testing.assert_array_equal(back.flux, path.flux)
    np.testing.assert_array_equal(back.times, path.times)
    assert back.ce_tol == path.ce_tol
    with pytest.raises(LatticeError):
        path_from_csv(poisson_space([1.0], [3]), dens, flux)


def test_mass_balance_defect_shape(mu0):
    path = ou_path(mu0, 1.0, 5)
    assert mass_balance_defect(path).shape == (5, mu0.lattice.n_states)
