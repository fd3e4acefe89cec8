import numpy as np
import pandas as pd
import pytest

from characteristics import PhaseState
from collision import CollisionKernel, sqrt_maxwellian
from diffuse_boundary import fit_geometric_tail
from errors import AdmissibilityViolation, CompatibilityViolation, CycleBudgetExceeded, GrazingSingularity
from transport_solver import (ZERO_RATE, AnalyticField, BoxGrid, CycleBudget, GreensResolution, GridField,
                              HermiteBasis, SolverConfig, StochasticField, boundary_normal_derivative,
                              boundary_normal_derivative_level, check_compatibility, collision_tables,
                              constant_rate, cycle_values, diffuse_boundary_datum, duhamel_evaluate,
                              fd_normal_derivative, fit_trace_constant, greens_identity_residual,
                              greens_identity_terms, greens_refinement_study, measure_cycle_budget,
                              perturbed_equilibrium, picard_iterate, stochastic_duhamel,
                              trace_balance_check, transport_fd)

A = np.array([0.3, -0.2, 0.1])
COARSE = GreensResolution(n_rho=6, n_polar=6, n_azimuth=8, n_velocity=6, n_time=3, n_normal=6, n_tangential=4)


def pulse(t, x, v):
    return (2.0 + np.sum(x * A, axis=-1) - t * np.sum(v * A, axis=-1)) * sqrt_maxwellian(v)


def sqrt_mu_f0(x, v):
    return sqrt_maxwellian(v) * np.ones(np.shape(x)[:-1])


def sqrt_mu_g(t, x, v):
    return sqrt_maxwellian(v) * np.ones(np.shape(x)[:-1])


@pytest.fixture
def config():
    return SolverConfig()


@pytest.mark.parametrize('kwargs, error', [
    ({'theta': 0.3}, AdmissibilityViolation),
    ({'horizon': 1.0}, AdmissibilityViolation),
    ({'horizon': 0.2}, AdmissibilityViolation),
    ({'p': 0.5}, AdmissibilityViolation),
    ({'time_steps': 0}, ValueError),
])
def test_solver_config_validation(kwargs, error):
    with pytest.raises(error):
        SolverConfig(**kwargs)


def test_solver_config_times(config):
    assert config.theta_prime == pytest.approx(0.1)
    np.testing.assert_allclose(config.times, [0.0, 0.05, 0.1])


def test_constant_rate_shape():
    assert constant_rate(0.5)(0.0, np.zeros((4, 3)), np.zeros((4, 3))).tolist() == [0.5] * 4


def test_negative_time_extension():
    f = AnalyticField(pulse)
    x, v = np.array([[0.1, 0.0, 0.0]]), np.array([[0.2, 0.1, 0.0]])
    np.testing.assert_allclose(f(-1.0, x, v), np.exp(-1.0) * pulse(0.0, x, v))


def test_hermite_cardinals():
    basis = HermiteBasis(3)
    np.testing.assert_allclose(basis.cardinal(basis.nodes), np.eye(basis.size), atol=1e-12)
    v = np.array([[0.3, -0.7, 1.1]])
    assert float(basis.cardinal(v).sum()) == pytest.approx(1.0)


def test_box_grid_fills_exterior(ball):
    grid = BoxGrid.for_domain(ball, 5)
    assert grid.shape == (5, 5, 5)
    assert grid.inside.sum() == 27
    values = np.where(grid.inside, 1.0, 0.0)
    assert (grid.extend(values) == 1.0).all()


def test_grid_field_reproduces_low_degree_velocity_profiles(ball):
    grid = BoxGrid.for_domain(ball, 5)
    basis = HermiteBasis(3)

    def func(t, x, v):
        return sqrt_maxwellian(v) * (1.0 + 0.1 * v[..., 0]) * np.ones(np.shape(t))
    f = GridField.from_function(func, np.array([0.0, 0.1]), grid, basis)
    x, v = np.array([[0.1, 0.2, 0.0]]), np.array([[0.3, -0.2, 0.5]])
    np.testing.assert_allclose(f(0.05, x, v), func(0.0, x, v), rtol=1e-10)


@pytest.mark.parametrize('v', [[2.0, 1.0, 0.0], [0.1, 0.0, 0.0]])
def test_duhamel_free_transport(ball, zero_field, config, v):
    f = AnalyticField(pulse)
    state = PhaseState(0.8, np.array([0.1, 0.2, 0.0]), np.array(v))
    res = duhamel_evaluate(config, ball, zero_field, ZERO_RATE, ZERO_RATE, f.f0, pulse, state)
    assert res.value == pytest.approx(float(pulse(0.8, state.x[None], state.v[None])[0]), abs=1e-8)
    assert res.hit_wall == (res.exit_time < 0.8)


def test_duhamel_damping(ball, zero_field, config):
    state = PhaseState(0.6, np.array([0.5, 0.0, 0.0]), np.array([-1.0, 0.0, 0.0]))
    res = duhamel_evaluate(config, ball, zero_field, constant_rate(0.7), ZERO_RATE, sqrt_mu_f0, sqrt_mu_g, state)
    assert res.exit_time == pytest.approx(0.5)
    expected = np.exp(-0.7 * 0.5) * float(sqrt_maxwellian(state.v))
    assert res.value == pytest.approx(expected, abs=1e-8)


def test_duhamel_balanced_source(ball, zero_field, config):
    def source(s, x, v):
        return 0.7 * sqrt_maxwellian(v) * np.ones(np.shape(x)[:-1])
    state = PhaseState(0.9, np.array([0.0, 0.3, 0.0]), np.array([0.2, 0.8, 0.1]))
    res = duhamel_evaluate(config, ball, zero_field, constant_rate(0.7), source, sqrt_mu_f0, sqrt_mu_g, state)
    assert res.value == pytest.approx(float(sqrt_maxwellian(state.v)), abs=1e-8)


def test_stochastic_evaluator_without_wall_hit(ball, zero_field, config, rng):
    state = PhaseState(0.5, np.zeros(3), np.array([0.5, 0.0, 0.0]))
    res = stochastic_duhamel(config, ball, zero_field, ZERO_RATE, ZERO_RATE, sqrt_mu_f0, state, rng, n_samples=16)
    assert res.value == pytest.approx(float(sqrt_maxwellian(state.v)))
    assert res.std_error == pytest.approx(0.0, abs=1e-15)
    assert not res.hit_wall


def test_stochastic_evaluator_keeps_equilibrium(ball, zero_field, config, rng):
    state = PhaseState(0.2, np.array([0.9, 0.0, 0.0]), np.array([-1.0, 0.0, 0.0]))
    res = stochastic_duhamel(config, ball, zero_field, ZERO_RATE, ZERO_RATE, sqrt_mu_f0, state, rng,
                             n_samples=1000)
    assert res.hit_wall
    expected = float(sqrt_maxwellian(state.v))
    assert abs(res.value - expected) <= 5.0 * res.std_error + 1e-3


def geometric_budget(l_max):
    curve = pd.DataFrame({'level': [1, 2, 3], 'estimate': [1.0, 0.5, 0.25], 'std_error': [0.0, 0.01, 0.01],
                          'n_alive': [100, 50, 25]})
    return CycleBudget(curve=curve, fit=fit_geometric_tail(curve), l_max=l_max)


def test_cycle_budget_extrapolates_the_fitted_decay():
    budget = geometric_budget(2)
    assert budget.fit.ratio == pytest.approx(0.5)
    assert budget.tail == pytest.approx(0.25)
    assert budget.check(0.01, 1e-2) == pytest.approx(2.5e-3)
    with pytest.raises(CycleBudgetExceeded):
        budget.check(1.0, 1e-2)


def test_cycle_budget_without_decay_uses_smallest_resolved_level():
    curve = pd.DataFrame({'level': [1, 2], 'estimate': [1.0, 0.0], 'std_error': [0.0, 0.0], 'n_alive': [10, 0]})
    budget = CycleBudget(curve=curve, fit=fit_geometric_tail(curve), l_max=1)
    assert not budget.fit.decaying
    assert budget.tail == pytest.approx(1.0)


def test_stochastic_evaluator_rejects_a_heavy_cycle_tail(ball, zero_field, rng):
    config = SolverConfig(l_max=2, cycle_tol=1e-3)
    state = PhaseState(0.5, np.zeros(3), np.array([0.5, 0.0, 0.0]))
    with pytest.raises(CycleBudgetExceeded):
        stochastic_duhamel(config, ball, zero_field, ZERO_RATE, ZERO_RATE, sqrt_mu_f0, state, rng,
                           n_samples=8, budget=geometric_budget(2), f_sup=1.0)


def test_stochastic_evaluator_reports_cut_paths(ball, zero_field, rng):
    # one resolved cycle and a path that keeps hitting the wall
    config = SolverConfig(l_max=1, cycle_tol=1e-300)
    state = PhaseState(0.9, np.array([0.9, 0.0, 0.0]), np.array([-4.0, 0.0, 0.0]))
    with pytest.raises(CycleBudgetExceeded):
        stochastic_duhamel(config, ball, zero_field, ZERO_RATE, ZERO_RATE, sqrt_mu_f0, state, rng,
                           n_samples=200)


def test_measured_cycle_budget_covers_the_next_level(ball, zero_field, rng):
    config = SolverConfig(l_max=2, budget_trials=50)
    budget = measure_cycle_budget(config, ball, zero_field, rng)
    assert budget.curve['level'].tolist() == [1, 2, 3]
    assert budget.curve['estimate'].iloc[0] == pytest.approx(1.0)
    assert np.isfinite(budget.tail) and budget.tail >= 0.0


def test_cycle_values_are_reproducible_per_seed(ball, zero_field, config):
    X = np.array([[0.9, 0.0, 0.0], [0.0, 0.8, 0.0]])
    V = np.array([[-1.0, 0.0, 0.0], [0.0, -2.0, 0.0]])
    rates = [(ZERO_RATE, ZERO_RATE)]
    first = cycle_values(config, ball, zero_field, rates, sqrt_mu_f0, 0.3, X, V, seed=5, n_samples=64, depth=2)
    again = cycle_values(config, ball, zero_field, rates, sqrt_mu_f0, 0.3, X, V, seed=5, n_samples=64, depth=2)
    np.testing.assert_array_equal(first.value, again.value)
    assert first.hit_wall.all()
    np.testing.assert_array_less(np.abs(first.value - sqrt_maxwellian(V)), 5.0 * first.std_error + 1e-3)
    assert first.truncation == 0.0


def test_diffuse_datum_reproduces_sqrt_maxwellian(ball):
    g = diffuse_boundary_datum(ball, sqrt_mu_g)
    x = np.array([[1.0, 0.0, 0.0], [0.0, 0.6, 0.8]])
    v = np.array([[-1.0, 0.2, 0.0], [0.1, -0.5, -0.5]])
    np.testing.assert_allclose(g(np.zeros(2), x, v), sqrt_maxwellian(v), rtol=1e-12)


def test_compatibility_of_perturbed_equilibrium(ball):
    f0 = perturbed_equilibrium(ball, eps=0.2)
    report = check_compatibility(ball, f0, diffuse_boundary_datum(ball, lambda t, x, v: f0(x, v)), n_points=8)
    assert report.passed
    assert report.n_checked > 0


def test_collision_tables_on_sqrt_maxwellian():
    basis = HermiteBasis(2)
    kernel = CollisionKernel(n_polar=4, n_azimuth=8, n_velocity=4)
    tables = collision_tables(kernel, basis)
    ones = np.ones(basis.size)
    gain = np.einsum('lab,a,b->l', tables.gain, ones, ones)
    np.testing.assert_allclose(gain, sqrt_maxwellian(basis.nodes) * (tables.frequency @ ones), rtol=1e-10)


def test_incompatible_initial_data_is_rejected(ball, zero_field, config):
    def f0(x, v):
        return sqrt_maxwellian(v) * (1.0 + 0.5 * v[..., 0])
    with pytest.raises(CompatibilityViolation):
        picard_iterate(config, ball, zero_field, f0, 1)


@pytest.mark.slow
def test_picard_keeps_equilibrium(ball, zero_field, config):
    result = picard_iterate(config, ball, zero_field, sqrt_mu_f0, 1, mode='grid')
    assert len(result.history) == 2
    assert result.mode == 'grid'
    final = result.iterates[-1]
    expected = sqrt_maxwellian(final.basis.nodes)
    np.testing.assert_allclose(final.node_values(), np.broadcast_to(expected, final.node_values().shape),
                               rtol=1e-6)
    assert result.c1 < 10.0


@pytest.mark.slow
def test_stochastic_picard_keeps_equilibrium_within_noise(ball, zero_field):
    config = SolverConfig(n_velocity=2, picard_samples=32, budget_trials=50)
    result = picard_iterate(config, ball, zero_field, sqrt_mu_f0, 1, seed=2)
    assert result.mode == 'stochastic'
    assert result.budget is not None
    last = result.history.iloc[-1]
    assert last['std_error'] > 0.0
    assert last['sup_difference'] <= 5.0 * last['std_error'] + 1e-6


def test_picard_mode_must_be_known(ball, zero_field, config):
    with pytest.raises(ValueError, match="Unknown picard mode"):
        picard_iterate(config, ball, zero_field, sqrt_mu_f0, 1, mode='spectral')
    with pytest.raises(ValueError, match="Unknown picard mode"):
        SolverConfig(picard_mode='spectral')


def test_stochastic_picard_enforces_the_cycle_budget(ball, zero_field):
    config = SolverConfig(l_max=1, cycle_tol=1e-300, n_spatial=3, n_velocity=2, picard_samples=4,
                          budget_trials=50)
    with pytest.raises(CycleBudgetExceeded):
        picard_iterate(config, ball, zero_field, perturbed_equilibrium(ball, 0.1), 2)


@pytest.mark.slow
def test_stochastic_picard_contracts_on_perturbed_data(ball, zero_field):
    config = SolverConfig(n_velocity=2, picard_samples=16, budget_trials=50)
    result = picard_iterate(config, ball, zero_field, perturbed_equilibrium(ball, 0.1), 3, seed=4)
    diffs = result.history['sup_difference'].dropna()
    assert len(diffs) == 3
    assert diffs.iloc[-1] < diffs.iloc[0]
    assert (result.history['truncation'] == 0.0).all()
    assert np.isfinite(result.c1)


def test_transport_fd_vanishes_on_free_transport(zero_field):
    f = AnalyticField(pulse)
    x, v = np.array([[0.1, 0.2, 0.0]]), np.array([[0.5, -0.3, 0.2]])
    assert abs(float(transport_fd(f, zero_field, 0.05, x, v, 1e-3)[0])) < 1e-9


@pytest.mark.slow
def test_greens_identity_for_free_transport(ball, zero_field, config):
    terms = greens_identity_terms(config, AnalyticField(pulse), ball, zero_field, 2.0, 0.1, COARSE)
    assert abs(terms.transport) < 1e-8
    assert abs(terms.residual) <= 2e-2 * terms.final


def test_trace_scaling_without_field(ball, zero_field, config):
    res = GreensResolution(n_rho=3, n_polar=4, n_azimuth=6, n_velocity=4, n_time=2, n_normal=4, n_tangential=3)
    f = AnalyticField(pulse)
    checks = [trace_balance_check(config, f, ball, zero_field, eps, resolution=res) for eps in (0.4, 0.2)]
    assert checks[1].rhs_shape / checks[0].rhs_shape == pytest.approx(8.0)
    assert all(c.lhs > 0.0 for c in checks)
    C = fit_trace_constant(checks)
    fitted = [trace_balance_check(config, f, ball, zero_field, eps, constant=C, resolution=res)
              for eps in (0.4, 0.2)]
    assert all(c.passed for c in fitted)


TINY = GreensResolution(n_rho=3, n_polar=4, n_azimuth=6, n_velocity=4, n_time=2, n_normal=4, n_tangential=3)


def test_greens_residual_vanishes_for_zero_data(ball, radial_field, config):
    zero = AnalyticField(lambda t, x, v: np.zeros(np.shape(x)[:-1]))
    assert greens_identity_residual(config, zero, ball, radial_field, resolution=TINY) == 0.0


def test_greens_residual_of_stationary_maxwellian_flux_balance(ball, zero_field, config):
    f = AnalyticField(sqrt_mu_g)
    terms = greens_identity_terms(config, f, ball, zero_field, 2.0, 0.1, TINY)
    assert terms.transport == 0.0
    assert terms.outgoing == pytest.approx(terms.incoming, rel=1e-10)
    assert abs(greens_identity_residual(config, f, ball, zero_field, resolution=TINY)) <= 1e-10 * terms.final


def test_greens_resolution_refines_every_count():
    r = TINY.refined(2.0)
    assert (r.n_rho, r.n_polar, r.n_azimuth, r.n_velocity) == (6, 8, 12, 8)
    assert (r.n_time, r.n_normal, r.n_tangential) == (4, 8, 6)
    assert r.fd_step == pytest.approx(TINY.fd_step / 2.0)
    assert TINY.refined(1.0) == TINY


def test_greens_refinement_refines_quadrature_with_the_step(ball, zero_field, config, monkeypatch):
    seen = []

    def residual(config, f, domain, field, resolution=None):
        seen.append(resolution)
        return 3.0 * resolution.fd_step + 1e-3 / resolution.n_velocity

    monkeypatch.setattr('transport_solver.greens_identity_residual', residual)
    study = greens_refinement_study(config, AnalyticField(pulse), ball, zero_field, steps=(0.04, 0.02),
                                    resolution=TINY)
    assert [r.fd_step for r in seen] == pytest.approx([0.04, 0.02])
    assert [r.n_velocity for r in seen] == [4, 8]
    assert study['n_rho'].tolist() == [3, 6]
    # both error sources halve with the spacing
    assert study.attrs['order'] == pytest.approx(1.0)


def test_boundary_normal_derivative_of_free_transport(ball, zero_field, config):
    state = PhaseState(0.05, np.array([1.0, 0.0, 0.0]), np.array([-1.0, 0.3, 0.0]))
    d = boundary_normal_derivative(config, pulse, ball, zero_field, state)
    expected = A * float(sqrt_maxwellian(state.v))
    np.testing.assert_allclose(d.gradient, expected, atol=1e-6)
    assert d.n_dot_v == pytest.approx(-1.0)
    one_sided = fd_normal_derivative(AnalyticField(pulse), ball, state)
    assert one_sided == pytest.approx(d.normal_derivative, abs=1e-6)


@pytest.mark.parametrize('velocity', [[-0.5, 0.4, 0.2], [-1.0, -0.3, 0.5], [-0.8, 0.0, -0.6]])
def test_boundary_normal_derivative_of_tangential_variation(ball, zero_field, config, velocity):
    c = np.array([0.3, 0.2, -0.1])

    def bump(t, x, v):
        y = x - np.asarray(t, dtype=float)[..., None] * v - c
        return np.exp(-np.sum(y * y, axis=-1)) * sqrt_maxwellian(v)

    state = PhaseState(0.05, np.array([1.0, 0.0, 0.0]), np.array(velocity))
    d = boundary_normal_derivative(config, bump, ball, zero_field, state)
    y = state.x - state.t * state.v - c
    exact = -2.0 * y * float(bump(np.array([state.t]), state.x[None], state.v[None])[0])
    assert abs(d.n_dot_v) >= 0.5
    assert np.linalg.norm(d.gradient - exact) <= 0.05 * np.linalg.norm(exact)


def test_boundary_normal_derivative_grows_near_grazing(ball, zero_field, config):
    def sheared(t, x, v):
        return (1.0 + x[..., 1]) * sqrt_maxwellian(v)

    scaled = []
    for s in (0.4, 0.2, 0.1):
        state = PhaseState(0.05, np.array([1.0, 0.0, 0.0]), np.array([-s, 0.5, 0.0]))
        d = boundary_normal_derivative(config, sheared, ball, zero_field, state)
        scaled.append(abs(d.normal_derivative) * abs(d.n_dot_v) / float(sqrt_maxwellian(state.v)))
    np.testing.assert_allclose(scaled, 0.5, rtol=1e-5)


def test_boundary_normal_derivative_rejects_grazing(ball, zero_field, config):
    state = PhaseState(0.05, np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    with pytest.raises(GrazingSingularity):
        boundary_normal_derivative(config, pulse, ball, zero_field, state)


def test_level_form_adds_field_term(ball, radial_field, config):
    state = PhaseState(0.05, np.array([1.0, 0.0, 0.0]), np.array([-1.0, 0.3, 0.0]))
    plain = boundary_normal_derivative(config, pulse, ball, radial_field, state)
    level = boundary_normal_derivative_level(config, pulse, ball, radial_field, state)
    base = float(pulse(0.05, state.x[None], state.v[None])[0])
    assert level.normal_derivative - plain.normal_derivative == pytest.approx(0.5 * base, rel=1e-9)


def test_stochastic_field_is_reproducible(ball, zero_field, config):
    f = StochasticField(config, ball, zero_field, ZERO_RATE, ZERO_RATE, sqrt_mu_f0, seed=3)
    x, v = np.zeros((1, 3)), np.array([[0.5, 0.0, 0.0]])
    first = f(0.5, x, v)
    np.testing.assert_allclose(first, sqrt_maxwellian(v))
    np.testing.assert_array_equal(f(0.5, x, v), first)
