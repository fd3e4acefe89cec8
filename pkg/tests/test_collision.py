import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st

from collision import (CollisionKernel, anisotropic_gaussian, check_collision_invariance,
                       collision_frequency_profile, gamma_gain, maxwellian, maxwellian_profile,
                       moment_refinement_table, nu_loss, post_collision, q_operator, shifted_maxwellian,
                       sqrt_maxwellian, sqrt_maxwellian_profile, zero_profile)

vec = st.tuples(*[st.floats(-5.0, 5.0, allow_nan=False)] * 3)


@pytest.fixture(scope='module')
def kernel():
    return CollisionKernel(n_polar=8, n_azimuth=16, n_velocity=8)


def test_maxwellian_normalization():
    assert float(maxwellian(np.zeros(3))) == pytest.approx((2.0 * np.pi) ** -1.5)
    v = np.array([0.3, -1.0, 0.2])
    assert float(sqrt_maxwellian(v)) ** 2 == pytest.approx(float(maxwellian(v)))


@given(vec, vec, vec)
@hsettings(max_examples=200, deadline=None)
def test_post_collision_conserves_momentum_and_energy(u, v, w):
    u, v, w = np.array(u), np.array(v), np.array(w)
    if np.linalg.norm(w) < 1e-6:
        return
    omega = w / np.linalg.norm(w)
    up, vp = post_collision(u, v, omega)
    scale = 1.0 + u @ u + v @ v
    np.testing.assert_allclose(up + vp, u + v, atol=1e-12 * scale)
    assert abs(up @ up + vp @ vp - u @ u - v @ v) <= 1e-12 * scale


def test_kernel_rejects_bad_parameters():
    with pytest.raises(ValueError):
        CollisionKernel(kappa=1.5)
    with pytest.raises(ValueError):
        CollisionKernel(q0=lambda c: np.ones_like(c))


@pytest.mark.parametrize('profile', [maxwellian_profile(), shifted_maxwellian()])
def test_maxwellians_are_pointwise_equilibria(kernel, profile):
    for v in ([0.0, 0.0, 0.0], [1.0, -0.5, 0.3], [2.5, 0.0, 1.0]):
        value = q_operator(kernel, profile, profile, np.array(v))
        assert value.gain > 0.0
        assert abs(value.value) <= 1e-12 * value.loss


def test_zero_profile_gives_zero(kernel):
    assert q_operator(kernel, zero_profile(), maxwellian_profile(), np.zeros(3)).value == 0.0


def test_equilibrium_moments_vanish(kernel):
    assert check_collision_invariance(kernel, maxwellian_profile(), n_outer=4).max_abs < 1e-14


def test_anisotropic_profile_is_not_an_equilibrium(kernel):
    G = anisotropic_gaussian()
    assert abs(q_operator(kernel, G, G, np.array([1.0, 0.0, 0.0])).value) > 1e-8


def test_gain_of_sqrt_maxwellian_matches_frequency():
    kernel = CollisionKernel()
    f = sqrt_maxwellian_profile()
    v = np.array([0.5, 0.0, 0.0])
    gain = gamma_gain(kernel, f, f, v)
    assert gain == pytest.approx(float(sqrt_maxwellian(v)) * nu_loss(kernel, f, v), rel=2e-2)


def test_frequency_for_maxwell_molecules():
    k0 = CollisionKernel(kappa=0.0, n_polar=8, n_azimuth=16, n_velocity=8)
    assert nu_loss(k0, sqrt_maxwellian_profile(), np.array([0.7, 0.1, 0.0])) == pytest.approx(2.0 * np.pi, rel=5e-3)


def test_frequency_profile_is_bounded(kernel):
    df = collision_frequency_profile(kernel, speeds=np.linspace(0.0, 6.0, 7))
    assert list(df.columns) == ['speed', 'nu', 'nu_over_bracket']
    assert (df['nu'] > 0).all()
    assert np.isfinite(df['nu_over_bracket']).all()


@pytest.mark.slow
def test_moment_refinement_table_shape():
    df = moment_refinement_table(maxwellian_profile(), orders=(4, 6), n_outer=3)
    assert list(df['order']) == [4, 6]
    assert (df['max_abs'] < 1e-14).all()
