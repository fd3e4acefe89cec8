"""
Check Suite Module

Registry of the numerical checks, deterministic per-check seeding, the
suite runner and report emission.

Each check is a function (RunConfig, Generator) -> CheckOutcome. The runner
wraps outcomes into CheckReport records; an exception inside a check becomes
a report with status 'error' and never stops the other checks.

Outputs (in the run's output directory):
- report.json: config dump and reports, identical for identical (config, seed)
- timings.json: wall-clock seconds per check
- <check>__<table>.csv: one file per emitted table
"""

import json
import logging
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from characteristics import (PhaseState, backward_exit, flow, flow_jacobian, verify_boundary_map_det,
                             verify_gamma_to_gamma_det)
from collision import (anisotropic_gaussian, check_collision_invariance, maxwellian, maxwellian_profile,
                       moment_refinement_table, post_collision, q_operator, shifted_maxwellian,
                       sqrt_maxwellian)
from diffuse_boundary import (WallSampler, cmu_by_quadrature, cmu_constant, cycle_gap_bound_check,
                              cycles_to_frame, diffuse_trace, fit_chord_constant, fit_geometric_tail,
                              outgoing_flux, run_cycle_sweep, tail_probability_curve)
from domain_geometry import Ball, LevelSetDomain, sample_boundary
from errors import (AdmissibilityViolation, CompatibilityViolation, ExitedDomain, GrazingAmbiguous,
                    NoExitWithinHorizon, ToolkitError)
from external_field import ZeroField, check_sign_condition, field_norms, get_field
from kinematic_weight import (fit_velocity_lemma_rate, near_boundary_trajectories, velocity_lemma_check,
                              velocity_lemma_sweep)
from run_config import (RunConfig, build_domain, build_external_potential, build_field, build_kernel,
                        build_kernel_spec, build_settings, build_solver_config, build_vpb_config,
                        build_weight)
from singular_integrals import (SingularKernelSpec, collar_samples, kernel_bound_sweep,
                                nonlocal_to_local_time_integral,
                                uv_kernel_ratio_integral)
from transport_solver import (AnalyticField, BoxGrid, GreensResolution, GridField, HermiteBasis,
                              constant_rate, duhamel_evaluate, fit_trace_constant, greens_refinement_study,
                              perturbed_equilibrium, picard_iterate, trace_balance_check)
from vpb_coupling import (BallPoissonGrid, ExternalPotentialField, PotentialField, alpha_invariance,
                          density_problem, grid_density, grid_neumann_defect, neumann_defect, neumann_tolerance,
                          poisson_grid, potential_diagnostics, run_vpb, solve_neumann_poisson,
                          solve_self_potential)

logger = logging.getLogger(__name__)


@dataclass
class CheckOutcome:
    """What a check function returns."""
    passed: bool
    measured: Dict[str, float] = dc_field(default_factory=dict)
    fitted: Dict[str, float] = dc_field(default_factory=dict)
    tolerances: Dict[str, float] = dc_field(default_factory=dict)
    tables: Dict[str, pd.DataFrame] = dc_field(default_factory=dict)
    message: str = ''
    skipped: bool = False


def _jsonable(value):
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value)
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


@dataclass
class CheckReport:
    """
    One check's record.

    Attributes:
        name: registry name
        status: 'pass', 'fail', 'skipped' or 'error'
        seed: run seed; stream is the crc32 of the name mixed into it
        measured, fitted: values with provenance 'measured'
        tolerances: values with provenance 'config'
        wall_time: seconds (written to timings.json, not report.json)
    """
    name: str
    status: str
    seed: int
    stream: int
    measured: Dict[str, float] = dc_field(default_factory=dict)
    fitted: Dict[str, float] = dc_field(default_factory=dict)
    tolerances: Dict[str, float] = dc_field(default_factory=dict)
    message: str = ''
    wall_time: float = 0.0

    @property
    def failed(self) -> bool:
        return self.status in ('fail', 'error')

    def to_dict(self) -> Dict:
        def tagged(values, provenance):
            return {k: {'value': _jsonable(v), 'provenance': provenance} for k, v in sorted(values.items())}
        return {
            'name': self.name,
            'status': self.status,
            'seed': self.seed,
            'stream': self.stream,
            'measured': tagged(self.measured, 'measured'),
            'fitted': tagged(self.fitted, 'measured'),
            'tolerances': tagged(self.tolerances, 'config'),
            'message': self.message,
        }


def check_stream(name: str) -> int:
    return zlib.crc32(name.encode('utf-8'))


def check_rng(seed: int, name: str) -> np.random.Generator:
    """Independent stream per (seed, check name)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), check_stream(name)]))


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _test_fields() -> Dict[str, object]:
    return {'zero': get_field('zero'), 'radial': get_field('radial'), 'constant': get_field('constant')}


def _outgoing_velocity(domain: LevelSetDomain, point, rng, min_normal: float = 0.2,
                       v_cap: float = 4.0, tries: int = 50) -> Optional[np.ndarray]:
    sampler = WallSampler(domain, point, rng)
    for _ in range(tries):
        v = sampler.sample()
        if v @ sampler.normal >= min_normal and np.linalg.norm(v) <= v_cap:
            return v
    return None


def _interior_points(domain: LevelSetDomain, rng, n: int, fraction: float = 0.5) -> np.ndarray:
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    r = fraction * domain.inradius * rng.uniform(0.0, 1.0, size=n) ** (1.0 / 3.0)
    return domain.center + r[:, None] * d


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------

def check_sign(cfg: RunConfig, rng: np.random.Generator) -> CheckOutcome:
    """Sign condition E.n > 0 on the wall for the configured field."""
    domain, field = build_domain(cfg.domain), build_field(cfg.field)
    rep = check_sign_condition(domain, field, t_grid=(0.0, cfg.solver.horizon))
    return CheckOutcome(passed=rep.passed, measured={'c_e_lower': rep.c_e_lower},
                        tolerances={'c_e_minimum': 0.0},
                        message='' if rep.passed else f"E.n = {rep.c_e_lower:.4g} at {rep.worst_point.tolist()}")


def check_liouville(cfg: RunConfig, rng: np.random.Generator) -> CheckOutcome:
    """|det DFlow - 1| and the forward-backward round trip on interior paths."""
    domain, settings = build_domain(cfg.domain), build_settings(cfg.integrator)
    tol = 1e-8 * cfg.tolerance_scale
    rows = []
    for name, fld in _test_fields().items():
        for x in _interior_points(domain, rng, cfg.sampling.liouville):
            v = rng.standard_normal(3)
            state = PhaseState(1.0, x, v)
            s = 1.0 - 0.25 * domain.inradius / (1.0 + np.linalg.norm(v))
            try:
                det = flow_jacobian(domain, fld, state, s, settings).det
                there = flow(domain, fld, state, s, settings)
                back = flow(domain, fld, there, state.t, settings)
            except ExitedDomain:
                continue
            err = float(np.linalg.norm(back.x - x) + np.linalg.norm(back.v - v))
            rows.append({'field': name, 'det_error': abs(det - 1.0), 'round_trip': err})
    df = pd.DataFrame(rows)
    det_err, rt_err = float(df['det_error'].max()), float(df['round_trip'].max())
    return CheckOutcome(passed=det_err <= tol and rt_err <= tol,
                        measured={'max_det_error': det_err, 'max_round_trip': rt_err, 'n_paths': len(df)},
                        tolerances={'det': tol, 'round_trip': tol}, tables={'liouville': df})


def check_boundary_determinant(cfg: RunConfig, rng: np.random.Generator) -> CheckOutcome:
    """FD determinant of the gamma_+ flow map against |n.v|."""
    domain, settings = build_domain(cfg.domain), build_settings(cfg.integrator)
    tol = 1e-3 * cfg.tolerance_scale
    rows = []
    for name, fld in _test_fields().items():
        for p in sample_boundary(domain, cfg.sampling.determinants):
            v = _outgoing_velocity(domain, p, rng)
            if v is None:
                continue
            try:
                rec = backward_exit(domain, fld, PhaseState(1.0, p, v), settings)
                s = 1.0 - 0.5 * min(rec.exit_time, 0.5)
                chk = verify_boundary_map_det(domain, fld, 1.0, p, v, s, settings)
            except (GrazingAmbiguous, NoExitWithinHorizon, ExitedDomain):
                continue
            rows.append({'field': name, 'numeric': chk.numeric, 'reference': chk.reference,
                         'relative_error': chk.relative_error})
    df = pd.DataFrame(rows)
    worst = float(df['relative_error'].max())
    return CheckOutcome(passed=worst <= tol, measured={'max_relative_error': worst, 'n_samples': len(df)},
                        tolerances={'relative': tol}, tables={'boundary_determinant': df})


def check_gamma_determinants(cfg: RunConfig, rng: np.random.Generator) -> CheckOutcome:
    """gamma_+ -> gamma_- and interior -> gamma_- determinants."""
    domain, settings = build_domain(cfg.domain), build_settings(cfg.integrator)
    tol = 1e-3 * cfg.tolerance_scale
    rows = []
    for name, fld in _test_fields().items():
        for p in sample_boundary(domain, cfg.sampling.gamma):
            v = _outgoing_velocity(domain, p, rng)
            if v is None:
                continue
            try:
                rec = backward_exit(domain, fld, PhaseState(0.0, p, v), settings)
                if abs(rec.normal_component) < 0.2:
                    continue
                chk = verify_gamma_to_gamma_det(domain, fld, rec.exit_time + 0.5, p, v, settings)
            except (GrazingAmbiguous, NoExitWithinHorizon, ExitedDomain):
                continue
            rows.append({'field': name,
                         'boundary_error': chk.boundary_to_boundary.relative_error,
                         'interior_error': chk.interior_to_boundary.relative_error})
    df = pd.DataFrame(rows)
    worst = float(max(df['boundary_error'].max(), df['interior_error'].max()))
    return CheckOutcome(passed=worst <= tol, measured={'max_relative_error': worst, 'n_samples': len(df)},
                        tolerances={'relative': tol}, tables={'gamma_determinants': df})


def check_collision(cfg: RunConfig, rng: np.random.Generator) -> CheckOutcome:
    """Conservation of the collision map, moment identities and Q(mu, mu) = 0."""
    kernel = build_kernel(cfg.collision)
    u = rng.standard_normal((cfg.sampling.collision_points, 3))
    v = rng.standard_normal((cfg.sampling.collision_points, 3))
    om = rng.standard_normal((cfg.sampling.collision_points, 3))
    om /= np.linalg.norm(om, axis=-1, keepdims=True)
    scale = 1.0 + np.sum(u * u, axis=-1) + np.sum(v * v, axis=-1)
    conservation = 0.0
    for ui, vi, oi, sc in zip(u, v, om, scale):
        up, vp = post_collision(ui, vi, oi)
        conservation = max(conservation, float(np.max(np.abs(up + vp - ui - vi))) / sc,
                           abs(float(up @ up + vp @ vp - ui @ ui - vi @ vi)) / sc)
    mu = maxwellian_profile()
    q_eq = max(abs(q_operator(kernel, mu, mu, vi).value) for vi in v)
    moments = {G.name: check_collision_invariance(kernel, G).max_abs
               for G in (mu, shifted_maxwellian(), anisotropic_gaussian())}
    table = pd.concat([moment_refinement_table(G, orders=cfg.collision.orders, kappa=cfg.collision.kappa)
                       for G in (mu, shifted_maxwellian(), anisotropic_gaussian())], ignore_index=True)
    tol_cons, tol_mom = 1e-14 * cfg.tolerance_scale, 1e-6 * cfg.tolerance_scale
    measured = {'conservation': conservation, 'q_mu_mu': q_eq}
    measured.update({f'moments_{k}': val for k, val in moments.items()})
    passed = conservation <= tol_cons and q_eq <= tol_mom and max(moments.values()) <= tol_mom
    return CheckOutcome(passed=passed, measured=measured,
                        tolerances={'conservation': tol_cons, 'moments': tol_mom},
                        tables={'moment_refinement': table})


def check_wall_law(cfg: RunConfig, rng: np.random.Generator) -> CheckOutcome:
    """c_mu, the diffuse trace of mu, flux balance and the wall sampler."""
    domain = build_domain(cfg.domain)
    n = rng.standard_normal(3)
    n /= np.linalg.norm(n)
    cmu_err = abs(cmu_by_quadrature(n) - np.sqrt(2.0 * np.pi))
    trace = diffuse_trace(n, maxwellian)
    incoming = rng.standard_normal((32, 3))
    incoming -= np.maximum(incoming @ n, 0.0)[:, None] * 2.0 * n
    trace_err = float(np.max(np.abs(trace(incoming) - maxwellian(incoming))))
    aniso = anisotropic_gaussian()
    balance = abs(outgoing_flux(-n, diffuse_trace(n, aniso)) - outgoing_flux(n, aniso, 32, 16))

    point = sample_boundary(domain, 1)[0]
    sampler = WallSampler(domain, point, rng)
    draws = sampler.sample(cfg.sampling.ks)
    vn = draws @ sampler.normal
    p_normal = float(stats.kstest(vn, 'rayleigh').pvalue)
    p_tangent = float(stats.kstest(draws @ sampler.tau1, 'norm').pvalue)
    tol = cfg.tolerance_scale
    passed = (cmu_err <= 1e-8 * tol and trace_err <= 1e-10 * tol and balance <= 1e-8 * tol
              and min(p_normal, p_tangent) > 0.01)
    return CheckOutcome(passed=passed,
                        measured={'cmu_error': cmu_err, 'trace_error': trace_err, 'flux_balance': balance,
                                  'ks_normal_p': p_normal, 'ks_tangent_p': p_tangent,
                                  'cmu': cmu_constant()},
                        tolerances={'cmu': 1e-8 * tol, 'trace': 1e-10 * tol, 'flux': 1e-8 * tol,
                                    'ks_level': 0.01})


def check_velocity_lemma(cfg: RunConfig, rng: np.random.Generator) -> CheckOutcome:
    """Sandwich bound at the fitted rate, and failure at a reduced rate."""
    weight = build_weight(cfg)
    settings = build_settings(cfg.integrator)
    trajs = near_boundary_trajectories(weight, rng, cfg.weight.trajectories, duration=cfg.weight.duration,
                                       settings=settings)
    fit = fit_velocity_lemma_rate(weight, trajs)
    sweep = velocity_lemma_sweep(weight, trajs, fit.rate)
    control = velocity_lemma_sweep(weight, trajs, fit.rate / cfg.weight.control_factor)
    all_pass = bool(sweep['passed'].all()) if len(sweep) else False
    control_fails = bool(len(control) and not control['passed'].all())
    tables = {'velocity_lemma': sweep}
    if trajs:
        tables['velocity_lemma_trajectory'] = velocity_lemma_check(weight, trajs[0], fit.rate).table
    return CheckOutcome(passed=all_pass and control_fails,
                        measured={'n_trajectories': len(trajs), 'pass_fraction': float(sweep['passed'].mean()),
                                  'control_pass_fraction': float(control['passed'].mean())},
                        fitted={'rate': fit.rate, 'alpha2_rate': fit.alpha2_rate},
                        tolerances={'control_factor': cfg.weight.control_factor}, tables=tables,
                        message='' if control_fails else 'reduced rate did not fail (vacuous bound)')


def check_cycles(cfg: RunConfig, rng: np.random.Generator) -> CheckOutcome:
    """Cycle-gap lower bound and geometric decay of the weighted tail."""
    domain, field = build_domain(cfg.domain), build_field(cfg.field)
    settings = build_settings(cfg.integrator)
    start = PhaseState(cfg.cycles.horizon, domain.center, np.array([0.6, 0.3, -0.2]))
    chord = fit_chord_constant(domain, cfg.cycles.chord_pairs)
    cycles = run_cycle_sweep(domain, field, start, cfg.cycles.trials, cfg.cycles.l_max, rng, settings)
    e_sup = field_norms(domain, field).e_sup
    gap = cycle_gap_bound_check(cycles, cfg.cycles.delta, chord.c_omega, e_sup)
    curve = tail_probability_curve(domain, field, start, cfg.cycles.l_max, cfg.cycles.tail_samples, rng,
                                   varpi=cfg.cycles.varpi, settings=settings)
    tail = fit_geometric_tail(curve)
    return CheckOutcome(passed=gap.passed and tail.decaying,
                        measured={'gap_checked': gap.checked, 'gap_violations': gap.violations,
                                  'gap_bound': gap.bound},
                        fitted={'c_omega': chord.c_omega, 'tail_ratio': tail.ratio, 'tail_l0': tail.l0},
                        tolerances={'delta': cfg.cycles.delta, 'ratio_below': 1.0},
                        tables={'cycles': cycles_to_frame(cycles), 'tail_curve': curve})


def check_kernel_bounds(cfg: RunConfig, rng: np.random.Generator) -> CheckOutcome:
    """Inverse-alpha kernel bound, the weighted-ratio integral guard and the time integral."""
    domain, field = build_domain(cfg.domain), build_field(cfg.field)
    weight = build_weight(cfg, domain, field)
    spec = build_kernel_spec(cfg.kernel)
    settings = build_settings(cfg.integrator)
    c_e = check_sign_condition(domain, field).c_e_lower
    if c_e <= 0.0:
        return CheckOutcome(passed=False, measured={'c_e_lower': c_e}, message='sign condition fails')
    pts, vel = collar_samples(weight, cfg.kernel.sweep_points, rng)
    sweep = kernel_bound_sweep(spec, weight, pts, vel, c_e=c_e)
    half = len(sweep) // 2
    c_first, c_second = float(sweep['ratio'][:half].max()), float(sweep['ratio'][half:].max())
    stability = max(c_first, c_second) / min(c_first, c_second)

    p = cfg.kernel.p
    edge = (p - 1.0) / p
    wspec = SingularKernelSpec(theta=cfg.kernel.theta, kappa=cfg.kernel.kappa, beta=0.5 * edge,
                               varpi=cfg.kernel.varpi, role='weight', p=p)
    uv = uv_kernel_ratio_integral(wspec, weight, 0.5, pts[0], vel[0], check=False).value
    try:
        SingularKernelSpec(theta=cfg.kernel.theta, kappa=cfg.kernel.kappa, beta=edge,
                           varpi=cfg.kernel.varpi, role='weight', p=p)
        guarded = False
    except AdmissibilityViolation:
        guarded = True

    doubled_spec = replace(spec, varpi=2.0 * spec.varpi)
    rows = []
    for k in range(cfg.kernel.states):
        state = PhaseState(0.5, pts[k % len(pts)], vel[k % len(vel)])
        res = nonlocal_to_local_time_integral(spec, weight, domain, field, state, settings=settings)
        res2 = nonlocal_to_local_time_integral(doubled_spec, weight, domain, field, state, settings=settings)
        rows.append({**res.to_dict(), 'lhs_doubled_varpi': res2.lhs, 'local_doubled_varpi': res2.local_term,
                     'nonlocal_doubled_varpi': res2.nonlocal_term, 'ratio_doubled_varpi': res2.ratio})
    times = pd.DataFrame(rows)
    c_time = float(times['ratio'].max())
    c_doubled = float(times['ratio_doubled_varpi'].max())
    # fitted second-term contributions C * nonlocal at 2 varpi over those at varpi
    times['halving'] = c_doubled * times['nonlocal_doubled_varpi'] / (c_time * times['nonlocal_term'])
    halving = float(times['halving'].max())
    holds = bool(np.all(times['ratio_doubled_varpi'] <= c_time * (1.0 + 1e-9)))
    passed = stability <= 2.0 and np.isfinite(uv) and guarded and halving <= 0.6
    return CheckOutcome(passed=passed,
                        measured={'uv_integral': uv, 'edge_guarded': guarded, 'halving': halving,
                                  'lhs_ratio': float(np.max(times['lhs_doubled_varpi'] / times['lhs'])),
                                  'bound_holds_doubled_varpi': holds},
                        fitted={'kernel_constant': float(sweep['ratio'].max()), 'constant_stability': stability,
                                'time_constant': c_time, 'time_constant_doubled_varpi': c_doubled},
                        tolerances={'stability_factor': 2.0, 'halving_at_most': 0.6},
                        tables={'kernel_bounds': sweep, 'time_integral': times})


def check_duhamel(cfg: RunConfig, rng: np.random.Generator) -> CheckOutcome:
    """Duhamel evaluator on three closed-form in-flow problems (E = 0)."""
    domain = build_domain(cfg.domain)
    config = build_solver_config(cfg.solver, cfg.collision)
    settings = build_settings(cfg.integrator)
    field = ZeroField()
    a = np.array([0.3, -0.2, 0.1])
    c = 0.7

    def pulse(t, x, v):
        x, v = np.atleast_2d(x), np.atleast_2d(v)
        return (2.0 + x @ a - np.asarray(t, dtype=float) * (v @ a)) * sqrt_maxwellian(v)

    def equilibrium_f0(x, v):
        return sqrt_maxwellian(v)

    def equilibrium_g(t, x, v):
        return sqrt_maxwellian(v)

    def source(s, x, v):
        return c * sqrt_maxwellian(v)

    cases = {
        'free_transport': (constant_rate(0.0), constant_rate(0.0), lambda x, v: pulse(0.0, x, v), pulse,
                           lambda st, rec: float(pulse(st.t, st.x, st.v)[0])),
        'damping': (constant_rate(c), constant_rate(0.0), equilibrium_f0, equilibrium_g,
                    lambda st, r: float(np.exp(-c * min(st.t, r.exit_time)) * sqrt_maxwellian(st.v))),
        'balanced_source': (constant_rate(c), source, equilibrium_f0, equilibrium_g,
                            lambda st, r: float(sqrt_maxwellian(st.v))),
    }
    rows = []
    for name, (nu, H, f0, g, exact) in cases.items():
        for x in _interior_points(domain, rng, 10, fraction=0.9):
            state = PhaseState(rng.uniform(0.1, 1.0), x, rng.standard_normal(3))
            res = duhamel_evaluate(config, domain, field, nu, H, f0, g, state, settings)
            rows.append({'case': name, 't': state.t, 'value': res.value, 'exact': exact(state, res),
                         'hit_wall': res.hit_wall})
    df = pd.DataFrame(rows)
    df['error'] = (df['value'] - df['exact']).abs()
    tol = 1e-8 * cfg.tolerance_scale
    worst = float(df['error'].max())
    return CheckOutcome(passed=worst <= tol, measured={'max_error': worst, 'wall_hits': int(df['hit_wall'].sum())},
                        tolerances={'absolute': tol}, tables={'duhamel': df})


def check_balances(cfg: RunConfig, rng: np.random.Generator) -> CheckOutcome:
    """Green's identity under difference refinement and the trace inequality family (E = 0)."""
    domain = build_domain(cfg.domain)
    config = build_solver_config(cfg.solver, cfg.collision)
    field = ZeroField()
    x0 = domain.center + 0.2 * domain.inradius * np.array([1.0, 0.0, 0.0])

    def pulse(t, x, v):
        y = x - np.asarray(t, dtype=float)[..., None] * v - x0
        return np.exp(-np.sum(y * y, axis=-1) / 0.25) * sqrt_maxwellian(v)

    f = AnalyticField(pulse, name='pulse')
    res = GreensResolution(n_rho=6, n_polar=6, n_azimuth=8, n_velocity=6, n_time=3, n_normal=6,
                           n_tangential=4)
    study = greens_refinement_study(config, f, domain, field,
                                    resolution=GreensResolution(n_rho=4, n_polar=4, n_azimuth=6, n_velocity=4,
                                                                n_time=2, n_normal=4, n_tangential=3))
    checks = [trace_balance_check(config, f, domain, field, eps, resolution=res) for eps in (0.4, 0.2, 0.1)]
    constant = fit_trace_constant(checks)
    fitted = [trace_balance_check(config, f, domain, field, ch.eps, constant=constant, resolution=res)
              for ch in checks]
    ratios = [b.rhs_shape / a.rhs_shape for a, b in zip(checks[:-1], checks[1:])]
    scaling_err = float(max(abs(r / 8.0 - 1.0) for r in ratios))
    order = float(study.attrs['order'])
    passed = order >= 0.7 and all(ch.passed for ch in fitted) and scaling_err <= 0.25
    return CheckOutcome(passed=passed, measured={'trace_scaling_error': scaling_err},
                        fitted={'greens_order': order, 'trace_constant': constant},
                        tolerances={'min_order': 0.7, 'scaling': 0.25},
                        tables={'greens_refinement': study,
                                'trace': pd.DataFrame([ch.to_dict() for ch in fitted])})


def check_picard(cfg: RunConfig, rng: np.random.Generator) -> CheckOutcome:
    """Equilibrium fixed point in both modes (E = 0) and the perturbed-data monitors."""
    domain, field = build_domain(cfg.domain), build_field(cfg.field)
    config = build_solver_config(cfg.solver, cfg.collision)
    settings = build_settings(cfg.integrator)
    kernel = config.collision_kernel()
    seed = int(rng.integers(2**31))

    def equilibrium(x, v):
        return sqrt_maxwellian(v)

    eq = picard_iterate(config, domain, ZeroField(), equilibrium, 2, kernel, settings, mode='grid')
    fixed = float(eq.history['sup_difference'].max())
    eq_mc = picard_iterate(config, domain, ZeroField(), equilibrium, 1, kernel, settings, mode='stochastic',
                           seed=seed)
    fixed_mc = float(eq_mc.history['sup_difference'].iloc[-1])
    noise = float(eq_mc.history['std_error'].iloc[-1])
    run = picard_iterate(config, domain, field, perturbed_equilibrium(domain, cfg.solver.eps),
                         cfg.solver.m_max, kernel, settings, seed=seed)
    rate = run.contraction_rate()
    tol = 1e-6 * cfg.tolerance_scale
    mc_tol = 5.0 * noise + tol
    passed = (fixed <= tol and fixed_mc <= mc_tol and np.isfinite(run.c1) and np.isfinite(rate)
              and rate < 1.0)
    return CheckOutcome(passed=passed,
                        measured={'equilibrium_difference': fixed, 'stochastic_equilibrium_difference': fixed_mc,
                                  'truncation': float(run.history['truncation'].max())},
                        fitted={'c1': run.c1, 'contraction_rate': rate,
                                'cycle_tail': run.budget.tail if run.budget is not None else float('nan')},
                        tolerances={'equilibrium': tol, 'stochastic_equilibrium': mc_tol, 'rate_below': 1.0,
                                    'cycle_tol': config.cycle_tol},
                        message=f"perturbed run in {run.mode} mode",
                        tables={'picard_history': run.history})


def manufactured_poisson(domain: Ball, n_r: int, n_c: int = 4, n_phi: int = 4) -> Tuple[float, BallPoissonGrid]:
    """Max error of the ball solve for phi = r^4/(4R^2) - r^2/2 (zero Neumann data)."""
    R = domain.radius
    grid = BallPoissonGrid(domain, n_r, n_c, n_phi)

    def rho(x):
        r2 = np.sum((x - domain.center) ** 2, axis=-1)
        return 3.0 - 5.0 * r2 / R**2

    sol = solve_neumann_poisson(density_problem(grid, rho))
    r2 = np.sum((grid.centers - domain.center) ** 2, axis=-1)
    exact = r2**2 / (4.0 * R**2) - 0.5 * r2
    exact -= np.sum(exact * grid.volumes) / grid.total_volume
    return float(np.max(np.abs(sol.values - exact))), grid


def density_potential_slice(domain: LevelSetDomain, rho: Callable, phi, n: int = 41) -> pd.DataFrame:
    """rho and phi_F along the first axis through the center."""
    s = np.linspace(-0.98, 0.98, n) * domain.inradius
    pts = domain.center + s[:, None] * np.array([1.0, 0.0, 0.0])
    return pd.DataFrame({'s': s, 'x1': pts[:, 0], 'density': rho(pts), 'potential': phi.value(pts)})


def check_vpb(cfg: RunConfig, rng: np.random.Generator) -> CheckOutcome:
    """Poisson oracle, solvability guard, alpha invariance, linearity and the VPB loop."""
    domain = build_domain(cfg.domain)
    config = build_solver_config(cfg.solver, cfg.collision)
    vpb = build_vpb_config(cfg.vpb)
    settings = build_settings(cfg.integrator)
    phi_E = build_external_potential(cfg)
    measured, fitted = {}, {}

    order_ok = True
    if isinstance(domain, Ball):
        coarse, _ = manufactured_poisson(domain, vpb.n_r)
        fine, _ = manufactured_poisson(domain, 2 * vpb.n_r)
        fitted['poisson_order'] = float(np.log2(coarse / fine))
        measured['poisson_error'] = fine
        order_ok = fitted['poisson_order'] >= 1.5

    grid = poisson_grid(domain, vpb)
    try:
        solve_neumann_poisson(density_problem(grid, lambda x: np.ones(x.shape[:-1]), rho0=0.9), vpb)
        guarded = False
    except CompatibilityViolation:
        guarded = True
    measured['solvability_guarded'] = guarded

    box = BoxGrid.for_domain(domain, config.n_spatial)
    basis = HermiteBasis(config.n_velocity)
    hessians = []
    for eps in (cfg.vpb.eps, 2.0 * cfg.vpb.eps):
        f0 = perturbed_equilibrium(domain, eps)
        f = GridField.from_function(lambda t, x, v: f0(x, v), config.times, box, basis, f0)
        rho = grid_density(f, 0.0)
        rho0 = float(np.sum(grid.cell_integrals(rho)) / grid.total_volume)
        solutions, potentials = solve_self_potential(f, grid, rho0, vpb)
        hessians.append(potential_diagnostics(potentials[0], domain, vpb.holder_exponent).hessian_sup)
        if eps == cfg.vpb.eps:
            composite = PotentialField(f.times, potentials, phi_E)
            defect = max(grid_neumann_defect(s) for s in solutions)
            neumann_tol = min(neumann_tolerance(s, vpb) for s in solutions)
            fit_defect = neumann_defect(composite, domain)
            drift = alpha_invariance(domain, [composite], ExternalPotentialField(phi_E))
            section = density_potential_slice(domain, rho, potentials[0])
    linearity = hessians[1] / hessians[0] if hessians[0] > 0 else float('nan')
    measured.update({'neumann_defect': defect, 'fit_neumann_defect': fit_defect, 'alpha_drift': drift})
    fitted['hessian_ratio'] = linearity

    result = run_vpb(config, domain, phi_E, perturbed_equilibrium(domain, cfg.vpb.eps), cfg.vpb.steps, vpb,
                     settings=settings)
    grads = result.diagnostics['grad_sup'].to_numpy()
    bounded = bool(np.max(grads) <= 3.0 * grads[0] + 1e-12)
    measured['max_grad_phi'] = float(np.max(grads))
    diag = result.diagnostics
    loop_neumann = bool((diag['neumann_defect'] <= diag['neumann_tol']).all())

    passed = (order_ok and guarded and defect <= neumann_tol and loop_neumann and drift <= vpb.alpha_tol
              and abs(linearity / 2.0 - 1.0) <= 0.2 and bounded)
    return CheckOutcome(passed=passed, measured=measured, fitted=fitted,
                        tolerances={'min_order': 1.5, 'neumann': neumann_tol, 'alpha': vpb.alpha_tol,
                                    'linearity': 0.2, 'growth_factor': 3.0},
                        tables={'vpb_steps': result.diagnostics, 'vpb_slice': section})


CHECK_REGISTRY: Dict[str, Callable[[RunConfig, np.random.Generator], CheckOutcome]] = {
    'sign_condition': check_sign,
    'liouville': check_liouville,
    'boundary_determinant': check_boundary_determinant,
    'gamma_determinants': check_gamma_determinants,
    'collision': check_collision,
    'wall_law': check_wall_law,
    'velocity_lemma': check_velocity_lemma,
    'cycles': check_cycles,
    'kernel_bounds': check_kernel_bounds,
    'duhamel': check_duhamel,
    'balances': check_balances,
    'picard': check_picard,
    'vpb': check_vpb,
}


def get_check(name: str) -> Callable[[RunConfig, np.random.Generator], CheckOutcome]:
    """Get a check function by name."""
    if name not in CHECK_REGISTRY:
        raise ValueError(f"Unknown check: {name}. Available: {list(CHECK_REGISTRY.keys())}")
    return CHECK_REGISTRY[name]


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------

def run_check(name: str, cfg: RunConfig) -> Tuple[CheckReport, Dict[str, pd.DataFrame]]:
    """Run one check; exceptions become status 'error'."""
    func = get_check(name)
    rng = check_rng(cfg.seed, name)
    start = time.perf_counter()
    try:
        outcome = func(cfg, rng)
        status = 'skipped' if outcome.skipped else ('pass' if outcome.passed else 'fail')
    except (ToolkitError, ValueError, ArithmeticError, KeyError, IndexError) as exc:
        logger.exception("check %s raised", name)
        outcome = CheckOutcome(passed=False, message=f"{type(exc).__name__}: {exc}")
        status = 'error'
    elapsed = time.perf_counter() - start
    report = CheckReport(name=name, status=status, seed=cfg.seed, stream=check_stream(name),
                         measured=outcome.measured, fitted=outcome.fitted, tolerances=outcome.tolerances,
                         message=outcome.message, wall_time=elapsed)
    logger.info("check %s: %s (%.2fs)", name, status, elapsed)
    return report, outcome.tables


def _run_check_worker(args):
    name, cfg_dict = args
    return run_check(name, RunConfig.model_validate(cfg_dict))


@dataclass
class SuiteResult:
    reports: List[CheckReport]
    tables: Dict[str, Dict[str, pd.DataFrame]]

    @property
    def exit_code(self) -> int:
        return 1 if any(r.failed for r in self.reports) else 0

    def to_dict(self, cfg: RunConfig) -> Dict:
        return {'config': cfg.defaults_dump(), 'checks': [r.to_dict() for r in self.reports],
                'exit_code': self.exit_code}


def run_suite(cfg: RunConfig, names: Optional[List[str]] = None, jobs: Optional[int] = None) -> SuiteResult:
    """
    Run the selected checks (registry order); jobs > 1 uses a process pool.
    """
    names = cfg.selected_checks() if names is None else list(names)
    for name in names:
        get_check(name)
    ordered = [n for n in CHECK_REGISTRY if n in names]
    jobs = cfg.jobs if jobs is None else jobs
    if jobs > 1 and len(ordered) > 1:
        payload = [(n, cfg.model_dump()) for n in ordered]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_check_worker, payload))
    else:
        results = [run_check(n, cfg) for n in ordered]
    reports = [r for r, _ in results]
    tables = {r.name: t for r, t in results}
    return SuiteResult(reports=reports, tables=tables)


def write_outputs(result: SuiteResult, cfg: RunConfig, out_dir: Optional[Path] = None) -> Path:
    """report.json, timings.json and one CSV per table."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / 'report.json').open('w', encoding='utf-8', newline='\n') as fh:
        json.dump(result.to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write('\n')
    with (out / 'timings.json').open('w', encoding='utf-8', newline='\n') as fh:
        json.dump({r.name: r.wall_time for r in result.reports}, fh, indent=2, sort_keys=True)
        fh.write('\n')
    for name, tables in result.tables.items():
        for label, df in tables.items():
            df.to_csv(out / f"{name}__{label}.csv", index=False, encoding='utf-8', lineterminator='\n')
    logger.info("wrote %d reports to %s", len(result.reports), out)
    return out


def summary_lines(result: SuiteResult) -> List[str]:
    """One line per check for the console table."""
    width = max((len(r.name) for r in result.reports), default=5)
    lines = [f"{'check'.ljust(width)}  status   seconds"]
    for r in result.reports:
        lines.append(f"{r.name.ljust(width)}  {r.status.ljust(7)}  {r.wall_time:7.2f}")
    return lines
