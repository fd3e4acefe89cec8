import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st

from errors import NegativeRadicand, OutsideCollar
from external_field import get_field
from kinematic_weight import (Cutoff, KineticWeight, fit_velocity_lemma_rate, near_boundary_trajectories,
                              shell_level, velocity_lemma_check, velocity_lemma_sweep)


@pytest.fixture
def weight(ball, radial_field):
    return KineticWeight(ball, radial_field)


@given(st.floats(0.0, 2.0, allow_nan=False), st.floats(0.0, 2.0, allow_nan=False))
@hsettings(max_examples=100, deadline=None)
def test_cutoff_is_monotone_with_unit_slope_cap(s1, s2):
    chi = Cutoff(0.4)
    lo, hi = min(s1, s2), max(s1, s2)
    assert chi(lo) <= chi(hi) + 1e-15
    assert chi(hi) - chi(lo) <= hi - lo + 1e-12
    assert 0.0 <= float(chi.derivative(s1)) <= 1.0 + 1e-12


def test_cutoff_pieces():
    chi = Cutoff(0.4)
    assert float(chi(0.05)) == pytest.approx(0.05)
    assert float(chi(0.2)) == pytest.approx(0.15)
    assert float(chi(1.0)) == pytest.approx(chi.plateau)
    assert float(chi.derivative(0.2)) == pytest.approx(0.0, abs=1e-12)


def test_cutoff_blend_is_the_sextic():
    chi = Cutoff(0.4)
    # u = 1/2: P = 1/2 - 5/32 + 3/32 - 1/64
    assert float(chi(0.15)) == pytest.approx(0.1 + 0.1 * 27.0 / 64.0)
    assert float(chi.derivative(0.15)) == pytest.approx(0.5)
    h = 1e-6
    for s in (0.11, 0.15, 0.19):
        fd = (float(chi(s + h)) - float(chi(s - h))) / (2.0 * h)
        assert float(chi.derivative(s)) == pytest.approx(fd, abs=1e-7)


def test_cutoff_rejects_nonpositive_level():
    with pytest.raises(ValueError):
        Cutoff(0.0)


def test_shell_level_on_ball(ball):
    assert shell_level(ball, 0.2) == pytest.approx(0.36)


def test_beta_on_the_ball_boundary(weight):
    assert float(weight.beta(0.0, np.array([1.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]))) == pytest.approx(2.0)


def test_beta_squared_inside_collar(weight):
    b2 = float(weight.beta_squared(0.0, np.array([0.9, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])))
    assert b2 == pytest.approx(0.0361 + 0.76 + 0.76)


def test_alpha_is_identity_below_the_blend(weight):
    v = np.array([0.01, 0.0, 0.0])
    assert weight.alpha(0.0, np.array([1.0, 0.0, 0.0]), v) == pytest.approx(0.02)


def test_alpha_saturates_at_plateau_off_collar(weight):
    assert weight.alpha(0.0, np.zeros(3), np.array([1.0, 0.0, 0.0])) == pytest.approx(weight.plateau)


def test_beta_outside_collar_raises(weight):
    with pytest.raises(OutsideCollar):
        weight.beta_squared(0.0, np.array([0.5, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]))


def test_negative_radicand_without_sign_condition(ball):
    w = KineticWeight(ball, get_field('radial', strength=-5.0))
    with pytest.raises(NegativeRadicand):
        w.beta_squared(0.0, np.array([0.9, 0.0, 0.0]), np.array([0.0, 0.0, 0.0]))


@pytest.mark.parametrize('field_name', ['radial', 'time_modulated'])
def test_transport_derivative_closed_form(ellipsoid, field_name):
    w = KineticWeight(ellipsoid, get_field(field_name))
    x, v = np.array([1.85, 0.1, 0.05]), np.array([0.3, -0.2, 0.5])
    assert w.transport_derivative_beta2(0.3, x, v) == pytest.approx(w.transport_derivative_fd(0.3, x, v),
                                                                    rel=1e-5, abs=1e-7)


def test_cutoff_slope_and_seam(weight):
    assert weight.cutoff_slope_max() <= 1.0 + 1e-12
    assert np.isfinite(weight.seam_lipschitz(n_points=16))


def test_velocity_lemma_with_fitted_rate(weight, rng):
    trajs = near_boundary_trajectories(weight, rng, 12, duration=0.3)
    assert trajs
    fit = fit_velocity_lemma_rate(weight, trajs, margin=0.5)
    assert fit.alpha2_rate == pytest.approx(2.0 * fit.rate)
    sweep = velocity_lemma_sweep(weight, trajs, fit.rate)
    assert sweep['passed'].all()
    frozen = velocity_lemma_sweep(weight, trajs, 0.0)
    assert not frozen['passed'].all()


def test_velocity_lemma_table_columns(weight, rng):
    traj = near_boundary_trajectories(weight, rng, 6, duration=0.2)[0]
    res = velocity_lemma_check(weight, traj, 5.0)
    assert list(res.table.columns) == ['tau', 'alpha', 'bound_low', 'bound_high']
    assert (res.table['bound_low'] <= res.table['bound_high']).all()
