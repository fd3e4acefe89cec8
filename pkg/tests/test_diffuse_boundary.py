import numpy as np
import pandas as pd
import pytest

from characteristics import PhaseState
from collision import anisotropic_gaussian, maxwellian
from diffuse_boundary import (DiffuseCycle, DiffuseCycleNode, WallSampler, cmu_by_quadrature, cmu_constant,
                              cycle_gap_bound_check, cycles_to_frame, diffuse_trace, fit_chord_constant,
                              fit_geometric_tail, outgoing_flux, run_cycle_sweep, run_diffuse_cycles,
                              sample_outgoing, tail_probability_curve)
from domain_geometry import Ball
from quadrature import half_space_rule

NORMAL = np.array([0.0, 0.6, 0.8])


def test_cmu_matches_quadrature():
    assert cmu_constant() == pytest.approx(np.sqrt(2.0 * np.pi))
    assert cmu_by_quadrature(NORMAL) == pytest.approx(cmu_constant(), rel=1e-8)


def test_trace_of_maxwellian_is_maxwellian():
    incoming = diffuse_trace(NORMAL, maxwellian)
    v = np.array([[0.1, -0.5, -0.3], [1.0, 0.0, -2.0]])
    np.testing.assert_allclose(incoming(v), maxwellian(v), rtol=1e-8)


def test_trace_balances_flux():
    F = anisotropic_gaussian()
    incoming = diffuse_trace(NORMAL, F)
    assert outgoing_flux(-NORMAL, incoming) == pytest.approx(outgoing_flux(NORMAL, F, 32, 16), rel=1e-8)


def test_wall_sampler_law(ball, rng):
    point = np.array([1.0, 0.0, 0.0])
    sampler = WallSampler(ball, point, rng)
    v = sampler.sample(4000)
    vn = v @ sampler.normal
    assert (vn > 0).all()
    assert vn.mean() == pytest.approx(np.sqrt(np.pi / 2.0), abs=0.05)
    assert v[:, 1].std() == pytest.approx(1.0, abs=0.05)
    nodes, w = half_space_rule(sampler.normal)
    assert float(np.sum(w * sampler.density(nodes))) == pytest.approx(1.0, rel=1e-8)


def test_cycles_follow_ball_chords(ball, zero_field, rng):
    start = PhaseState(3.0, np.zeros(3), np.array([1.0, 0.0, 0.0]))
    cycle = run_diffuse_cycles(ball, zero_field, start, 8, rng)
    assert len(cycle) >= 1
    assert cycle.nodes[0].gap == pytest.approx(1.0)
    for prev, node in zip(cycle.nodes[:-1], cycle.nodes[1:]):
        chord = 2.0 * (prev.normal @ prev.v) / (prev.v @ prev.v)
        assert node.gap == pytest.approx(chord, rel=1e-8)
        assert node.t == pytest.approx(prev.t - node.gap)
    assert all(node.t >= 0.0 for node in cycle.nodes)
    assert cycle.terminated or cycle.truncated or len(cycle) == 8


def test_cycle_sweep_frame(ball, radial_field, rng):
    start = PhaseState(1.0, np.array([0.2, 0.0, 0.0]), np.array([0.5, 0.5, 0.0]))
    cycles = run_cycle_sweep(ball, radial_field, start, 5, 4, rng)
    df = cycles_to_frame(cycles)
    assert list(df.columns) == ['cycle', 'index', 't', 'gap', 'x1', 'x2', 'x3', 'v1', 'v2', 'v3',
                                'speed', 'normal_speed']
    assert (df['normal_speed'] > 0).all()
    np.testing.assert_allclose(np.linalg.norm(df[['x1', 'x2', 'x3']].to_numpy(), axis=1), 1.0, atol=1e-8)


def test_chord_constant_on_the_sphere(ball):
    fit = fit_chord_constant(ball, n_pairs=400)
    assert fit.min_ratio == pytest.approx(2.0, rel=1e-6)
    assert fit.max_ratio == pytest.approx(2.0, rel=1e-6)
    assert fit.c_omega == pytest.approx(2.0, rel=1e-6)


def test_chord_constant_is_the_largest_ratio(ellipsoid):
    fit = fit_chord_constant(ellipsoid, n_pairs=400)
    assert fit.c_omega == fit.max_ratio
    assert fit.min_ratio < fit.max_ratio
    assert fit_chord_constant(Ball(0.2), n_pairs=400).c_omega == pytest.approx(0.4, rel=1e-6)


def test_gap_bound_on_the_ball(ball, zero_field, rng):
    start = PhaseState(4.0, np.zeros(3), np.array([1.0, 0.0, 0.0]))
    cycles = run_cycle_sweep(ball, zero_field, start, 20, 6, rng)
    check = cycle_gap_bound_check(cycles, delta=0.1, c_omega=2.0, e_sup=0.0)
    assert check.passed
    assert check.checked + check.exempt > 0


def test_gap_bound_flags_short_gaps():
    normal = np.array([1.0, 0.0, 0.0])
    nodes = [DiffuseCycleNode(index=k, t=1.0 - 0.01 * k, x=normal, v=np.array([1.0, 0.0, 0.0]),
                              v_b_prev=np.zeros(3), gap=0.01, normal=normal) for k in (1, 2)]
    cycle = DiffuseCycle(start=PhaseState(1.0, np.zeros(3), normal), nodes=nodes)
    check = cycle_gap_bound_check([cycle], delta=0.5, c_omega=2.0, e_sup=0.0)
    assert check.checked == 1
    assert not check.passed


def test_tail_curve(ball, zero_field, rng):
    start = PhaseState(1.5, np.zeros(3), np.array([1.0, 0.0, 0.0]))
    df = tail_probability_curve(ball, zero_field, start, 4, 200, rng)
    assert list(df.columns) == ['level', 'estimate', 'std_error', 'n_alive']
    assert df['estimate'].iloc[0] == 1.0
    assert (np.diff(df['n_alive']) <= 0).all()
    assert (df['estimate'] >= 0).all()


def test_tail_curve_without_wall_hit(ball, zero_field, rng):
    df = tail_probability_curve(ball, zero_field, PhaseState(0.5, np.zeros(3), np.array([1.0, 0.0, 0.0])),
                                3, 10, rng)
    assert (df['estimate'] == 0.0).all()


def test_geometric_fit_recovers_ratio():
    levels = np.arange(1, 7)
    est = 0.5 ** levels
    fit = fit_geometric_tail(pd.DataFrame({'level': levels, 'estimate': est, 'std_error': 0.01 * est}))
    assert fit.ratio == pytest.approx(0.5)
    assert fit.l0 == 2
    assert fit.decaying


def test_geometric_fit_flags_growth():
    levels = np.arange(1, 6)
    est = 2.0 ** levels
    fit = fit_geometric_tail(pd.DataFrame({'level': levels, 'estimate': est, 'std_error': 0.01 * est}))
    assert not fit.decaying


def test_sample_outgoing_points_out_of_the_wall(ball, rng):
    sampler = WallSampler(ball, np.array([0.0, 0.6, 0.8]), rng)
    v = sample_outgoing(sampler)
    assert v.shape == (3,)
    assert v @ sampler.normal > 0.0
