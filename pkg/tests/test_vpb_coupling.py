import numpy as np
import pytest

from collision import sqrt_maxwellian
from errors import CompatibilityViolation
from external_field import get_field
from kinematic_weight import KineticWeight
from transport_solver import BoxGrid, GridField, HermiteBasis, SolverConfig, perturbed_equilibrium
from vpb_coupling import (BallPoissonGrid, BoxPoissonGrid, ExternalPotentialField, PolynomialPotential,
                          PotentialField, RadialPotential, VPBConfig, ZeroPotential, alpha_invariance,
                          density_problem, diagnostic_points, grid_density, grid_neumann_defect, holder_quotient,
                          mass_weights, neumann_defect, neumann_tolerance, poisson_grid, potential_diagnostics,
                          run_vpb, solve_neumann_poisson, weighted_alpha_gradient)


def manufactured_density(x):
    return 3.0 - 5.0 * np.sum(x * x, axis=-1)


def wall_flat_potential(ball):
    """psi = r^4/4 - r^2/2 has zero gradient on the unit sphere."""
    pts = diagnostic_points(ball)
    r2 = np.sum(pts * pts, axis=-1)
    return PolynomialPotential.fit(pts, 0.25 * r2**2 - 0.5 * r2, np.ones(len(pts)), 4, ball.center, ball.scale)


def test_ball_grid_volumes_and_stiffness(ball):
    grid = BallPoissonGrid(ball, 6, 4, 8)
    assert grid.total_volume == pytest.approx(4.0 * np.pi / 3.0, rel=1e-12)
    np.testing.assert_allclose(grid.stiffness @ np.ones(grid.size), 0.0, atol=1e-12)
    assert abs(grid.stiffness - grid.stiffness.T).max() < 1e-14


def test_box_grid_on_ellipsoid(ellipsoid):
    grid = poisson_grid(ellipsoid, VPBConfig(box_cells=10))
    assert isinstance(grid, BoxPoissonGrid)
    assert grid.total_volume == pytest.approx(8.0 * np.pi / 3.0, rel=0.2)
    np.testing.assert_allclose(grid.stiffness @ np.ones(grid.size), 0.0, atol=1e-12)


def test_ball_dispatch(ball):
    assert isinstance(poisson_grid(ball), BallPoissonGrid)


def test_manufactured_solution(ball):
    grid = BallPoissonGrid(ball, 16, 4, 4)
    sol = solve_neumann_poisson(density_problem(grid, manufactured_density))
    r2 = np.sum(grid.centers**2, axis=-1)
    exact = 0.25 * r2**2 - 0.5 * r2
    exact -= np.sum(exact * grid.volumes) / grid.total_volume
    assert np.max(np.abs(sol.values - exact)) < 2e-2
    assert sol.mean() == pytest.approx(0.0, abs=1e-12)
    assert sol.iterations > 0


def test_solvability_guard(ball):
    grid = BallPoissonGrid(ball, 6, 4, 4)
    with pytest.raises(CompatibilityViolation):
        solve_neumann_poisson(density_problem(grid, manufactured_density, rho0=0.9))
    with pytest.raises(CompatibilityViolation):
        solve_neumann_poisson(density_problem(grid, manufactured_density, rho0=1e-3))
    sol = solve_neumann_poisson(density_problem(grid, manufactured_density, rho0=1e-3), project=True)
    assert sol.projected == pytest.approx(-1e-3, rel=1e-6)


def test_uniform_density_has_flat_potential(ball):
    grid = BallPoissonGrid(ball, 4, 2, 4)
    sol = solve_neumann_poisson(density_problem(grid, lambda x: np.ones(x.shape[:-1])))
    assert sol.iterations == 0
    assert not np.any(sol.values)


def test_polynomial_fit_reproduces_quadratic(ball):
    radial = RadialPotential(2.0, center=(0.1, 0.0, 0.0))
    pts = diagnostic_points(ball)
    poly = PolynomialPotential.fit(pts, radial.value(pts), np.ones(len(pts)), 2, ball.center, ball.scale)
    x = np.array([[0.3, -0.2, 0.4], [0.0, 0.5, 0.1]])
    np.testing.assert_allclose(poly.value(x), radial.value(x), atol=1e-10)
    np.testing.assert_allclose(poly.gradient(x), radial.gradient(x), atol=1e-10)
    np.testing.assert_allclose(poly.hessian(x), radial.hessian(x), atol=1e-9)


def test_potential_field_time_interpolation():
    field = PotentialField([0.0, 1.0], [RadialPotential(1.0), RadialPotential(3.0)], ZeroPotential())
    x = np.array([[0.2, -0.1, 0.3]])
    E, G, dt = field.evaluate(0.5, x)
    np.testing.assert_allclose(E, 2.0 * x)
    np.testing.assert_allclose(G[0], 2.0 * np.eye(3))
    np.testing.assert_allclose(dt, 2.0 * x)
    E, _, dt = field.evaluate(2.0, x)
    np.testing.assert_allclose(E, 3.0 * x)
    np.testing.assert_allclose(dt, 0.0)
    np.testing.assert_allclose(field.value(0.25, x), 1.5 * x)


def test_external_potential_field_matches_radial_field(ball):
    field = ExternalPotentialField(RadialPotential())
    x = np.array([[0.5, 0.2, -0.1]])
    np.testing.assert_allclose(field.value(0.0, x), get_field('radial').value(0.0, x))
    assert neumann_defect(field, ball) == pytest.approx(0.0, abs=1e-14)


def test_neumann_defect(ball):
    field = PotentialField([0.0], [RadialPotential(1.0)], ZeroPotential())
    assert neumann_defect(field, ball) == pytest.approx(1.0)
    assert neumann_defect(PotentialField([0.0], [wall_flat_potential(ball)], ZeroPotential()), ball) < 1e-9


def test_grid_neumann_defect_shrinks_with_radial_refinement(ball):
    defects, tols = [], []
    for n_r in (6, 12, 24):
        sol = solve_neumann_poisson(density_problem(BallPoissonGrid(ball, n_r, 4, 4), manufactured_density))
        defects.append(grid_neumann_defect(sol))
        tols.append(neumann_tolerance(sol))
    assert defects[2] < defects[1] < defects[0]
    assert tols[2] < tols[1] < tols[0]
    assert all(d <= t for d, t in zip(defects, tols))


def test_grid_neumann_defect_of_flat_and_box_solutions(ball, ellipsoid):
    flat = solve_neumann_poisson(density_problem(BallPoissonGrid(ball, 4, 2, 4), lambda x: np.ones(x.shape[:-1])))
    assert grid_neumann_defect(flat) == pytest.approx(0.0, abs=1e-8)

    grid = poisson_grid(ellipsoid, VPBConfig(box_cells=10))
    sol = solve_neumann_poisson(density_problem(grid, lambda x: np.exp(-np.sum(x * x, axis=-1))))
    assert grid.spacing == grid.h
    assert sol.contrast > 0.0
    assert np.isfinite(grid_neumann_defect(sol))


def test_mass_weights_and_density(ball):
    basis = HermiteBasis(3)
    assert mass_weights(basis).sum() == pytest.approx(1.0)
    grid = BoxGrid.for_domain(ball, 5)
    f = GridField.from_function(lambda t, x, v: sqrt_maxwellian(v) * np.ones(np.shape(t)),
                                np.array([0.0, 0.1]), grid, basis)
    np.testing.assert_allclose(grid_density(f, 0.05)(np.array([[0.1, 0.2, 0.3], [0.0, 0.0, 0.0]])), 1.0)


def test_holder_quotient_of_linear_gradient(ball):
    pts = diagnostic_points(ball)
    assert holder_quotient(RadialPotential().gradient, pts, 1.0) == pytest.approx(1.0)


def test_potential_diagnostics_of_radial_potential(ball):
    diag = potential_diagnostics(RadialPotential(), ball)
    assert diag.sup_phi == pytest.approx(0.5)
    assert diag.grad_sup == pytest.approx(1.0)
    assert diag.hessian_sup == pytest.approx(1.0)
    assert diag.c1_gamma_norm > diag.grad_sup


def test_alpha_depends_only_on_wall_field(ball):
    field = PotentialField([0.0], [wall_flat_potential(ball)], RadialPotential())
    assert alpha_invariance(ball, [field], get_field('radial')) < 1e-9


def test_weighted_alpha_gradient_of_uniform_field(ball, radial_field):
    config = SolverConfig()
    grid = BoxGrid.for_domain(ball, 5)
    basis = HermiteBasis(2)
    f = GridField.from_function(lambda t, x, v: sqrt_maxwellian(v) * np.ones(np.shape(t)),
                                config.times, grid, basis)
    assert weighted_alpha_gradient(config, f, KineticWeight(ball, radial_field), 0.05) == pytest.approx(0.0, abs=1e-9)


@pytest.mark.slow
def test_run_vpb_single_step(ball):
    config = SolverConfig(n_velocity=3)
    vpb = VPBConfig(n_r=4, n_c=2, n_phi=4, degree=2)
    result = run_vpb(config, ball, RadialPotential(), perturbed_equilibrium(ball, 0.1), 1, vpb)
    assert len(result.steps) == 1
    assert {'grad_sup', 'hessian_sup', 'projected', 'neumann_defect', 'neumann_tol'} <= set(result.diagnostics.columns)
    assert abs(result.steps[0].max_projected) < 1e-10
    assert result.rho0 > 1.0
