import numpy as np
import pytest

from domain_geometry import sample_boundary
from external_field import (CallbackField, CompositeField, check_field_consistency, check_sign_condition,
                            field_eval, field_norms, get_field)


def test_get_field_unknown_name():
    with pytest.raises(ValueError, match="Unknown field: swirl"):
        get_field('swirl')


def test_radial_field_passes_sign_condition_on_ball(ball, radial_field):
    report = check_sign_condition(ball, radial_field)
    assert report.passed
    assert report.c_e_lower == pytest.approx(1.0)


def test_zero_field_fails_sign_condition(ball, zero_field):
    report = check_sign_condition(ball, zero_field)
    assert not report.passed
    assert report.c_e_lower == 0.0


def test_constant_field_fails_on_lower_hemisphere(ball, constant_field):
    report = check_sign_condition(ball, constant_field)
    assert not report.passed
    assert report.c_e_lower == pytest.approx(-1.0)
    assert report.worst_point[2] == pytest.approx(1.0)


def test_radial_field_on_ellipsoid_uses_smallest_axis(ellipsoid, radial_field):
    report = check_sign_condition(ellipsoid, radial_field, n_samples=400)
    assert report.passed
    assert report.c_e_lower <= 1.0 + 1e-12


def test_field_norms_radial(ball, radial_field):
    norms = field_norms(ball, radial_field)
    assert norms.e_sup == pytest.approx(1.0)
    assert norms.grad_sup == pytest.approx(1.0)
    assert norms.dt_sup == 0.0


def test_time_modulated_field_derivatives(ball):
    fld = get_field('time_modulated', strength=0.5, rate=2.0)
    pts = sample_boundary(ball, 20) * 0.7
    assert check_field_consistency(fld, pts, t=0.3) < 1e-8
    E, _, dt = fld.evaluate(1.0, pts)
    np.testing.assert_allclose(E, 1.5 * pts)
    np.testing.assert_allclose(dt, 1.0 * pts)


def test_callback_field_fills_missing_derivatives(ball):
    fld = CallbackField(lambda t, x: np.sin(t) * x**2)
    pts = sample_boundary(ball, 12) * 0.5
    _, G, D = fld.evaluate(0.4, pts)
    np.testing.assert_allclose(np.einsum('...ii->...i', G), 2.0 * np.sin(0.4) * pts, atol=1e-8)
    np.testing.assert_allclose(D, np.cos(0.4) * pts**2, atol=1e-8)


def test_composite_field_sums_parts(ball, radial_field, constant_field):
    comp = CompositeField(radial_field, constant_field)
    x = np.array([[0.2, 0.1, -0.3]])
    np.testing.assert_allclose(comp.value(0.0, x), x + np.array([0.0, 0.0, -1.0]))
    assert not comp.is_zero


def test_field_eval_shapes(radial_field):
    E, G, D = field_eval(radial_field, 0.0, np.zeros((4, 3)))
    assert E.shape == (4, 3) and G.shape == (4, 3, 3) and D.shape == (4, 3)
