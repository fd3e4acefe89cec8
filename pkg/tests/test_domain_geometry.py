import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st

from domain_geometry import (Ball, Ellipsoid, boundary_chart, convexity_certificate, diameter_check, get_domain,
                             nearest_boundary_point, nearest_point_jacobian, outward_normal, sample_boundary,
                             surface_rule, tangent_frame, volume_rule)
from errors import DegenerateGradient, OutsideCollar
from quadrature import frame_from_normal, gauss_hermite_velocity, half_space_rule, sphere_rule


unit = st.tuples(*[st.floats(-1.0, 1.0, allow_nan=False)] * 3).filter(
    lambda t: np.linalg.norm(t) > 1e-3)


def test_get_domain_unknown_name():
    with pytest.raises(ValueError, match="Unknown domain: cube"):
        get_domain('cube')


def test_ball_level_set_values(ball):
    assert ball.xi(np.zeros(3)) == pytest.approx(-1.0)
    assert ball.xi(np.array([1.0, 0.0, 0.0])) == pytest.approx(0.0)
    np.testing.assert_allclose(ball.grad(np.array([1.0, 0.0, 0.0])), [2.0, 0.0, 0.0])
    np.testing.assert_allclose(ball.hess(np.zeros(3)), 2.0 * np.eye(3))


def test_outward_normal_on_ellipsoid(ellipsoid):
    n = outward_normal(ellipsoid, np.array([2.0, 0.0, 0.0]))
    np.testing.assert_allclose(n, [1.0, 0.0, 0.0])


def test_outward_normal_degenerate_at_center(ball):
    with pytest.raises(DegenerateGradient):
        outward_normal(ball, np.zeros(3))


@given(unit)
@hsettings(max_examples=50, deadline=None)
def test_frame_is_orthonormal_and_right_handed(direction):
    n = np.asarray(direction) / np.linalg.norm(direction)
    t1, t2 = frame_from_normal(n)
    M = np.stack([t1, t2, n])
    np.testing.assert_allclose(M @ M.T, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(np.cross(t1, t2), n, atol=1e-12)


def test_tangent_frame_on_boundary(ellipsoid):
    p = sample_boundary(ellipsoid, 10)[7]
    frame = tangent_frame(ellipsoid, p)
    assert abs(frame.tau1 @ frame.normal) < 1e-12
    assert abs(frame.tau2 @ frame.normal) < 1e-12


def test_nearest_point_on_ball(ball):
    proj = nearest_boundary_point(ball, np.array([0.0, 0.9, 0.0]))
    np.testing.assert_allclose(proj.xbar, [0.0, 1.0, 0.0], atol=1e-12)
    assert proj.distance == pytest.approx(0.1)
    assert proj.in_collar


def test_nearest_point_outside_collar_raises(ball):
    with pytest.raises(OutsideCollar):
        nearest_boundary_point(ball, np.array([0.0, 0.5, 0.0]))
    proj = nearest_boundary_point(ball, np.array([0.0, 0.5, 0.0]), strict=False)
    assert not proj.in_collar


def test_nearest_point_on_ellipsoid_satisfies_optimality(ellipsoid):
    x = np.array([1.7, 0.3, -0.2])
    proj = nearest_boundary_point(ellipsoid, x, strict=False)
    assert abs(ellipsoid.xi(proj.xbar)) < 1e-12
    n = outward_normal(ellipsoid, proj.xbar)
    d = x - proj.xbar
    np.testing.assert_allclose(d - (d @ n) * n, 0.0, atol=1e-10)


def test_nearest_point_jacobian_matches_differences(ellipsoid):
    x = np.array([1.8, 0.1, 0.05])
    J = nearest_point_jacobian(ellipsoid, x)
    h = 1e-6
    fd = np.stack([(nearest_boundary_point(ellipsoid, x + h * e, strict=False).xbar
                    - nearest_boundary_point(ellipsoid, x - h * e, strict=False).xbar) / (2 * h)
                   for e in np.eye(3)], axis=-1)
    np.testing.assert_allclose(J, fd, atol=1e-6)


def test_boundary_chart_round_trip(ellipsoid):
    p = np.array([0.0, 1.0, 0.0])
    chart = boundary_chart(ellipsoid, p)
    assert chart.radius > 0.0
    y = chart.point(np.array(0.1), np.array(-0.05))
    assert abs(ellipsoid.xi(y)) < 1e-12
    a, b = chart.coords(y)
    assert float(a) == pytest.approx(0.1)
    assert float(b) == pytest.approx(-0.05)


def test_surface_and_volume_rules_match_ball_measures(ball):
    _, _, w = surface_rule(ball)
    assert np.sum(w) == pytest.approx(4.0 * np.pi, rel=1e-10)
    _, wv = volume_rule(ball)
    assert np.sum(wv) == pytest.approx(ball.volume(), rel=1e-10)


def test_volume_rule_on_ellipsoid(ellipsoid):
    _, w = volume_rule(ellipsoid, n_polar=24, n_azimuth=48)
    assert np.sum(w) == pytest.approx(ellipsoid.volume(), rel=1e-6)


def test_line_exit_closed_form(ball):
    t = ball.line_exit(np.zeros(3), np.array([2.0, 0.0, 0.0]))
    assert t == pytest.approx(0.5)


def test_certificates(ellipsoid):
    assert convexity_certificate(ellipsoid)['passed']
    assert diameter_check(ellipsoid)['passed']


def test_quadrature_rules_integrate_gaussians():
    _, w = sphere_rule(8, 16)
    assert np.sum(w) == pytest.approx(4.0 * np.pi)
    nodes, w = gauss_hermite_velocity(8, v_max=None)
    assert np.sum(w * np.exp(-0.5 * np.sum(nodes**2, axis=-1))) == pytest.approx((2 * np.pi) ** 1.5)
    n = np.array([0.0, 0.0, 1.0])
    nodes, w = half_space_rule(n)
    flux = np.sum(w * np.exp(-0.5 * np.sum(nodes**2, axis=-1)) * (nodes @ n))
    assert flux == pytest.approx(2.0 * np.pi, rel=1e-10)
