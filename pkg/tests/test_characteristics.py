import numpy as np
import pytest

from characteristics import (PhaseState, arc_length_bound_check, backward_exit, exit_derivatives,
                             fd_exit_derivatives, fd_flow_jacobian, flow, flow_jacobian, forward_exit,
                             march_batch, sample_trajectory, verify_boundary_map_det, verify_gamma_to_gamma_det)
from errors import ExitedDomain, GrazingAmbiguous, NoExitWithinHorizon
from external_field import get_field


def test_backward_exit_straight_line(ball, zero_field):
    rec = backward_exit(ball, zero_field, PhaseState(2.0, np.zeros(3), np.array([1.0, 0.0, 0.0])))
    assert rec.exit_time == pytest.approx(1.0)
    np.testing.assert_allclose(rec.exit_point, [-1.0, 0.0, 0.0], atol=1e-12)
    assert rec.clock == pytest.approx(1.0)
    assert rec.normal_component == pytest.approx(-1.0)
    assert not rec.grazing


def test_forward_exit_straight_line(ball, zero_field):
    rec = forward_exit(ball, zero_field, PhaseState(0.0, np.array([0.5, 0.0, 0.0]), np.array([2.0, 0.0, 0.0])))
    assert rec.exit_time == pytest.approx(0.25)
    assert rec.direction == 'forward'


def test_backward_exit_constant_field_parabola(ball, constant_field):
    rec = backward_exit(ball, constant_field, PhaseState(5.0, np.zeros(3), np.zeros(3)))
    assert rec.exit_time == pytest.approx(np.sqrt(2.0), rel=1e-6)
    np.testing.assert_allclose(rec.exit_point, [0.0, 0.0, -1.0], atol=1e-6)
    np.testing.assert_allclose(rec.exit_velocity, [0.0, 0.0, np.sqrt(2.0)], atol=1e-6)


def test_backward_exit_radial_field_cosh(ball, radial_field):
    x0 = np.array([0.5, 0.0, 0.0])
    rec = backward_exit(ball, radial_field, PhaseState(5.0, x0, np.zeros(3)))
    assert rec.exit_time == pytest.approx(np.arccosh(2.0), rel=1e-6)
    np.testing.assert_allclose(rec.exit_velocity, [-0.5 * np.sqrt(3.0), 0.0, 0.0], atol=1e-6)


def test_closed_form_exit_matches_marching(ball, zero_field):
    state = PhaseState(3.0, np.array([0.1, -0.2, 0.3]), np.array([0.4, 0.7, -0.2]))
    closed = backward_exit(ball, zero_field, state)
    marched = march_batch(ball, zero_field, 3.0, state.x[None], state.v[None], np.array([10.0]))
    assert marched.exited[0]
    np.testing.assert_allclose(marched.x[0], closed.exit_point, atol=1e-9)
    assert 3.0 - marched.clock[0] == pytest.approx(closed.exit_time, abs=1e-9)


def test_grazing_start_is_ambiguous(ball, zero_field):
    with pytest.raises(GrazingAmbiguous):
        backward_exit(ball, zero_field, PhaseState(1.0, np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])))


def test_leaving_start_returns_zero_exit_time(ball, zero_field):
    rec = forward_exit(ball, zero_field, PhaseState(1.0, np.array([1.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0])))
    assert rec.exit_time == 0.0


def test_resting_particle_never_exits(ball, zero_field, radial_field):
    with pytest.raises(NoExitWithinHorizon):
        backward_exit(ball, zero_field, PhaseState(1.0, np.zeros(3), np.zeros(3)))
    with pytest.raises(NoExitWithinHorizon):
        backward_exit(ball, radial_field, PhaseState(1.0, np.zeros(3), np.zeros(3)))


def test_flow_raises_when_leaving(ball, zero_field):
    with pytest.raises(ExitedDomain) as info:
        flow(ball, zero_field, PhaseState(0.0, np.zeros(3), np.array([1.0, 0.0, 0.0])), 2.0)
    assert info.value.record.exit_time == pytest.approx(1.0)


@pytest.mark.parametrize('name', ['zero', 'radial', 'constant'])
def test_liouville_and_round_trip(ball, name):
    fld = get_field(name)
    state = PhaseState(1.0, np.array([0.1, 0.2, -0.1]), np.array([0.3, -0.4, 0.2]))
    s = 0.8
    assert flow_jacobian(ball, fld, state, s).det == pytest.approx(1.0, abs=1e-8)
    there = flow(ball, fld, state, s)
    back = flow(ball, fld, there, state.t)
    np.testing.assert_allclose(back.x, state.x, atol=1e-8)
    np.testing.assert_allclose(back.v, state.v, atol=1e-8)


def test_variational_jacobian_matches_differences(ball, radial_field):
    state = PhaseState(1.0, np.array([0.2, 0.0, 0.1]), np.array([0.5, 0.3, -0.2]))
    J = flow_jacobian(ball, radial_field, state, 0.6).matrix
    J_fd = fd_flow_jacobian(ball, radial_field, state, 0.6).matrix
    np.testing.assert_allclose(J, J_fd, atol=1e-6)


def test_exit_derivatives_match_differences(ellipsoid, radial_field):
    state = PhaseState(5.0, np.array([0.3, 0.2, -0.1]), np.array([0.8, -0.3, 0.4]))
    d = exit_derivatives(ellipsoid, radial_field, state)
    fd = fd_exit_derivatives(ellipsoid, radial_field, state)
    np.testing.assert_allclose(d.stacked(), fd, atol=1e-4)


def test_boundary_map_determinant(ball, radial_field):
    chk = verify_boundary_map_det(ball, radial_field, 1.0, np.array([1.0, 0.0, 0.0]),
                                  np.array([1.0, 0.3, 0.0]), 0.7)
    assert chk.reference == pytest.approx(1.0)
    assert chk.relative_error < 1e-3


def test_boundary_map_determinant_rejects_incoming(ball, zero_field):
    with pytest.raises(ValueError):
        verify_boundary_map_det(ball, zero_field, 1.0, np.array([1.0, 0.0, 0.0]), np.array([-1.0, 0.0, 0.0]), 0.5)


def test_gamma_to_gamma_determinants(ball, zero_field):
    x, v = np.array([1.0, 0.0, 0.0]), np.array([1.0, 0.4, 0.0])
    rec = backward_exit(ball, zero_field, PhaseState(0.0, x, v))
    out = verify_gamma_to_gamma_det(ball, zero_field, rec.exit_time + 0.5, x, v)
    assert out.boundary_to_boundary.relative_error < 1e-3
    assert out.interior_to_boundary.relative_error < 1e-3


def test_sample_trajectory_records_exit(ball, zero_field):
    df = sample_trajectory(ball, zero_field, PhaseState(2.0, np.zeros(3), np.array([1.0, 0.0, 0.0])), 0.0)
    assert list(df.columns) == ['s', 'x1', 'x2', 'x3', 'v1', 'v2', 'v3', 'xi']
    assert df['s'].iloc[-1] == pytest.approx(1.0)
    assert df.attrs['exit']['exit_time'] == pytest.approx(1.0)
    assert (df['xi'] <= ball.boundary_tol).all()


def test_arc_length_bound(ball, radial_field):
    check = arc_length_bound_check(ball, radial_field, PhaseState(1.0, np.array([0.2, 0.1, 0.0]),
                                                                  np.array([0.5, -0.5, 0.2])))
    assert check.passed
