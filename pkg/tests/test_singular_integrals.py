import numpy as np
import pytest

from characteristics import PhaseState
from domain_geometry import nearest_boundary_point
from errors import AdmissibilityViolation, QuadratureUnderresolved
from kinematic_weight import KineticWeight
from singular_integrals import (QuadratureOrders, SingularKernelSpec, collar_samples, fit_uv_growth,
                                inv_alpha_Lp_norm, inv_alpha_velocity_integral, kernel_bound_rhs,
                                nonlocal_to_local_time_integral, ray_integral, time_integral_rhs,
                                uv_kernel_ratio_integral)


@pytest.fixture
def weight(ball, radial_field):
    return KineticWeight(ball, radial_field)


@pytest.mark.parametrize('kwargs', [
    {'beta': 1.0},
    {'beta': 3.0},
    {'theta': 0.0},
    {'kappa': 0.0},
    {'role': 'weight', 'p': 2.0, 'beta': 0.5},
    {'role': 'weight', 'p': None, 'beta': 0.2},
])
def test_inadmissible_kernels(kwargs):
    with pytest.raises(AdmissibilityViolation):
        SingularKernelSpec(**kwargs)


def test_unknown_role():
    with pytest.raises(ValueError, match='Unknown kernel role'):
        SingularKernelSpec(role='mass')


def test_ratio_exponent():
    assert SingularKernelSpec(role='weight', p=2.0, beta=0.3).ratio_exponent == pytest.approx(0.6)


def test_deep_interior_closed_form(weight):
    spec = SingularKernelSpec()
    value = inv_alpha_velocity_integral(spec, weight, 0.0, np.zeros(3), np.array([0.5, 0.0, 0.0]))
    assert value == pytest.approx(weight.plateau ** -1.5 * 2.0 * np.pi)


def test_collar_ray_rule_reproduces_plain_gaussian(weight):
    y = np.array([0.0, 0.93, 0.0])
    value = ray_integral(weight, 0.0, y, np.array([0.2, 0.4, -0.1]), 1.0, 1.0, 0.0, QuadratureOrders())
    assert value == pytest.approx(2.0 * np.pi, rel=2e-3)


def test_collar_integral_dominates_plateau_value(weight):
    spec = SingularKernelSpec()
    y = np.array([0.95, 0.0, 0.0])
    value = inv_alpha_velocity_integral(spec, weight, 0.0, y, np.array([0.3, 0.2, 0.1]), check=False)
    assert np.isfinite(value)
    assert value >= 0.99 * weight.plateau ** -1.5 * 2.0 * np.pi


def test_wall_point_is_not_integrable(weight):
    spec = SingularKernelSpec()
    with pytest.raises(QuadratureUnderresolved):
        inv_alpha_velocity_integral(spec, weight, 0.0, np.array([1.0, 0.0, 0.0]), np.array([0.3, 0.2, 0.1]),
                                    check=False)


def test_kernel_bound_rhs(weight):
    y = np.array([0.9, 0.0, 0.0])
    expected = (0.19 * 4.0 + 0.0361 + 0.19) ** -0.25 + 1.0
    assert kernel_bound_rhs(weight, y, np.array([2.0, 0.0, 0.0]), 1.0, 1.5) == pytest.approx(expected)
    assert kernel_bound_rhs(weight, np.array([1.0, 0.0, 0.0]), np.zeros(3), 1.0, 1.5) == float('inf')


def test_collar_samples_lie_in_collar(weight, rng):
    pts, vel = collar_samples(weight, 10, rng)
    assert pts.shape == vel.shape == (10, 3)
    for p in pts:
        assert 0.0 < nearest_boundary_point(weight.domain, p, strict=False).distance < weight.delta


def test_uv_rejects_exponent_at_the_edge(weight):
    spec = SingularKernelSpec(role='weight', p=4.0, beta=0.5)
    with pytest.raises(AdmissibilityViolation):
        uv_kernel_ratio_integral(spec, weight, 0.0, np.zeros(3), np.zeros(3), p=2.0)


def test_uv_at_zero_time_in_the_interior(weight):
    spec = SingularKernelSpec(role='weight', p=2.0, beta=0.3)
    res = uv_kernel_ratio_integral(spec, weight, 0.0, np.zeros(3), np.array([0.4, 0.0, 0.0]))
    assert res.exponent == pytest.approx(0.6)
    assert res.value == pytest.approx(2.0 * np.pi, rel=1e-6)


def test_fit_uv_growth():
    assert fit_uv_growth([0.0], [2.0]) == pytest.approx(2.0, rel=1e-9)
    C = fit_uv_growth([0.0, 1.0], [1.0, 10.0])
    assert C * np.exp(C) >= 10.0
    assert C * np.exp(C) == pytest.approx(10.0, rel=1e-6)


def test_time_integral_rhs_terms(weight):
    state = PhaseState(1.0, np.array([0.95, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    local, nonlocal_ = time_integral_rhs(weight, state, 1.5, 10.0, 1.0, 1.0, 1.0)
    assert local > 0.0 and nonlocal_ > 0.0
    _, halved = time_integral_rhs(weight, state, 1.5, 20.0, 1.0, 1.0, 1.0)
    assert halved == pytest.approx(0.5 * nonlocal_)


@pytest.mark.slow
def test_time_integral_is_finite(ball, radial_field, weight):
    spec = SingularKernelSpec()
    state = PhaseState(0.5, np.array([0.9, 0.0, 0.0]), np.array([0.5, 0.5, 0.0]))
    res = nonlocal_to_local_time_integral(spec, weight, ball, radial_field, state, n_pieces=4, n_gl=2)
    assert res.lhs > 0.0
    assert np.isfinite(res.ratio)
    assert res.dominant in ('local', 'nonlocal')


def test_time_integral_covers_the_whole_interval(ball, zero_field, weight, monkeypatch):
    monkeypatch.setattr('singular_integrals.inv_alpha_velocity_integral', lambda *args, **kwargs: 1.0)
    monkeypatch.setattr('singular_integrals.time_integral_rhs', lambda *args: (1.0, 1.0))
    spec = SingularKernelSpec()
    state = PhaseState(0.5, np.zeros(3), np.array([1.0, 0.0, 0.0]))
    res = nonlocal_to_local_time_integral(spec, weight, ball, zero_field, state, n_pieces=4, n_gl=4)
    # int_0^t exp(-(varpi/2) <v> (t - s)) ds with <v> = sqrt(2)
    rate = 0.5 * spec.varpi * np.sqrt(2.0)
    assert res.lhs == pytest.approx((1.0 - np.exp(-rate * state.t)) / rate, rel=1e-5)


def test_lp_norm_needs_p_above_three(weight):
    with pytest.raises(ValueError):
        inv_alpha_Lp_norm(weight, 3.0)
