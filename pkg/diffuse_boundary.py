"""
Diffuse Boundary Module

Diffuse reflection law on gamma_-, the wall sampler, stochastic diffuse
cycles (backward exit, resample an outgoing velocity, repeat), the cycle-gap
lower bound and the weighted tail estimate of {t^l > 0}.

Wall law:
    F(t, x, v) = c_mu mu(v) int_{n.u > 0} F(t, x, u) (n.u) du,   n(x).v < 0
with c_mu = sqrt(2 pi).
"""

import logging
from dataclasses import dataclass, field as dc_field
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd
import statsmodels.api as sm
from tqdm import tqdm

from characteristics import IntegratorSettings, PhaseState, backward_exit, march_batch
from collision import maxwellian
from domain_geometry import LevelSetDomain, outward_normal, sample_boundary
from errors import GrazingAmbiguous, NoExitWithinHorizon, QuadratureUnderresolved
from external_field import FieldSpec
from quadrature import frame_from_normal, half_space_rule

logger = logging.getLogger(__name__)


def cmu_constant() -> float:
    """c_mu with c_mu int_{n.u>0} mu(u)(n.u) du = 1."""
    return float(np.sqrt(2.0 * np.pi))


def cmu_by_quadrature(normal, n_normal: int = 24, n_tangential: int = 12) -> float:
    """1 / int_{n.u>0} mu(u)(n.u) du on the half-space rule."""
    n = np.asarray(normal, dtype=float)
    nodes, w = half_space_rule(n, n_normal, n_tangential)
    return float(1.0 / np.sum(w * maxwellian(nodes) * (nodes @ n)))


def outgoing_flux(normal, F_out: Callable, n_normal: int = 24, n_tangential: int = 12) -> float:
    """int_{n.u>0} F_out(u)(n.u) du."""
    n = np.asarray(normal, dtype=float)
    nodes, w = half_space_rule(n, n_normal, n_tangential)
    return float(np.sum(w * F_out(nodes) * (nodes @ n)))


def diffuse_trace(normal, F_out: Callable, tol: float = 1e-8) -> Callable:
    """
    Incoming trace v -> c_mu mu(v) * outgoing flux, for n.v < 0.

    Raises:
        QuadratureUnderresolved: flux changes by more than tol (1 + |flux|)
            between two half-space orders
    """
    flux = outgoing_flux(normal, F_out)
    fine = outgoing_flux(normal, F_out, n_normal=32, n_tangential=16)
    if abs(fine - flux) > tol * (1.0 + abs(flux)):
        raise QuadratureUnderresolved(f"outgoing flux {flux:.10g} vs refined {fine:.10g}")
    c = cmu_constant()

    def incoming(v):
        return c * maxwellian(v) * fine
    return incoming


class WallSampler:
    """
    Sampler of the wall law c_mu mu(v)(n.v) on {n.v > 0} at one boundary point.

    The normal component is Rayleigh (density s e^{-s^2/2}), the tangential
    ones standard normal. With scale s the law is the same shape at
    temperature s^2 (s = sqrt 2 samples sqrt(mu)(v)(n.v)).
    """

    def __init__(self, domain: LevelSetDomain, point, rng: np.random.Generator, scale: float = 1.0):
        self.scale = float(scale)
        self.point = np.asarray(point, dtype=float)
        self.normal = outward_normal(domain, self.point)
        self.tau1, self.tau2 = frame_from_normal(self.normal)
        self.c_mu = cmu_constant()
        self.rng = rng

    def sample(self, size: Optional[int] = None) -> np.ndarray:
        vn = self.rng.rayleigh(self.scale, size=size)
        vt = self.scale * self.rng.standard_normal(size=(2,) if size is None else (size, 2))
        return (np.asarray(vn)[..., None] * self.normal
                + vt[..., :1] * self.tau1 + vt[..., 1:] * self.tau2)

    def density(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        vn = v @ self.normal
        if self.scale == 1.0:
            return np.where(vn > 0, self.c_mu * maxwellian(v) * vn, 0.0)
        s2 = self.scale**2
        return np.where(vn > 0, np.exp(-0.5 * np.sum(v * v, axis=-1) / s2) * vn / (2.0 * np.pi * s2**2), 0.0)


def sample_outgoing(sampler: WallSampler) -> np.ndarray:
    return sampler.sample()


def sample_wall_velocities(domain: LevelSetDomain, points: np.ndarray, rng: np.random.Generator,
                           scale: float = 1.0) -> np.ndarray:
    """One WallSampler draw per boundary point, for many points at once."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    normals = outward_normal(domain, points)
    tau1, tau2 = frame_from_normal(normals)
    vn = rng.rayleigh(scale, size=len(points))
    vt = scale * rng.standard_normal(size=(len(points), 2))
    return vn[:, None] * normals + vt[:, :1] * tau1 + vt[:, 1:] * tau2


# ---------------------------------------------------------------------------
# Cycles
# ---------------------------------------------------------------------------

@dataclass
class DiffuseCycleNode:
    index: int
    t: float
    x: np.ndarray
    v: np.ndarray
    v_b_prev: np.ndarray
    gap: float
    normal: np.ndarray

    def to_dict(self) -> Dict:
        return {'index': self.index, 't': self.t, 'x': self.x.tolist(), 'v': self.v.tolist(),
                'v_b_prev': self.v_b_prev.tolist(), 'gap': self.gap,
                'normal': self.normal.tolist()}


@dataclass
class DiffuseCycle:
    start: PhaseState
    nodes: List[DiffuseCycleNode] = dc_field(default_factory=list)
    terminated: bool = False
    truncated: bool = False

    def __len__(self):
        return len(self.nodes)


def run_diffuse_cycles(domain: LevelSetDomain, field: FieldSpec, start: PhaseState, l_max: int,
                       rng: np.random.Generator,
                       settings: Optional[IntegratorSettings] = None) -> DiffuseCycle:
    """
    Stochastic cycle from start: t^{l+1} = t^l - t_b(t^l, x^l, v^l), new v^{l+1}
    drawn from the wall law at x^{l+1}.

    Stops when the next wall time is negative (terminated) or at l_max nodes.
    A grazing event truncates the cycle with the flag set.
    """
    cycle = DiffuseCycle(start=start)
    state = start
    for index in range(1, l_max + 1):
        try:
            rec = backward_exit(domain, field, state, settings, horizon=state.t + 1e-9)
        except GrazingAmbiguous as exc:
            logger.warning("cycle truncated at node %d: %s", index, exc)
            cycle.truncated = True
            return cycle
        except NoExitWithinHorizon:
            cycle.terminated = True
            return cycle
        t_next = state.t - rec.exit_time
        if t_next < 0.0:
            cycle.terminated = True
            return cycle
        sampler = WallSampler(domain, rec.exit_point, rng)
        v_new = sampler.sample()
        cycle.nodes.append(DiffuseCycleNode(index=index, t=t_next, x=rec.exit_point, v=v_new,
                                            v_b_prev=rec.exit_velocity, gap=rec.exit_time,
                                            normal=sampler.normal))
        state = PhaseState(t_next, rec.exit_point, v_new)
    return cycle



def run_cycle_sweep(domain: LevelSetDomain, field: FieldSpec, start: PhaseState, n_cycles: int,
                    l_max: int, rng: np.random.Generator,
                    settings: Optional[IntegratorSettings] = None,
                    progress: bool = False) -> List[DiffuseCycle]:
    """n_cycles independent cycles, each on its own child stream of rng."""
    seeds = np.random.SeedSequence(int(rng.integers(2**63))).spawn(n_cycles)
    return [run_diffuse_cycles(domain, field, start, l_max, np.random.default_rng(s), settings)
            for s in tqdm(seeds, disable=not progress, desc="cycles")]


def cycles_to_frame(cycles: List[DiffuseCycle]) -> pd.DataFrame:
    """One row per node."""
    columns = ['cycle', 'index', 't', 'gap', 'x1', 'x2', 'x3', 'v1', 'v2', 'v3',
               'speed', 'normal_speed']
    rows = []
    for k, c in enumerate(cycles):
        for node in c.nodes:
            rows.append([k, node.index, node.t, node.gap, *node.x, *node.v,
                         float(np.linalg.norm(node.v)), float(node.v @ node.normal)])
    return pd.DataFrame(rows, columns=columns)


# ---------------------------------------------------------------------------
# Gap bound
# ---------------------------------------------------------------------------

@dataclass
class ChordFit:
    min_ratio: float
    max_ratio: float
    c_omega: float
    n_pairs: int

    def to_dict(self) -> Dict:
        return dict(self.__dict__)


def fit_chord_constant(domain: LevelSetDomain, n_pairs: int = 10_000) -> ChordFit:
    """
    Ratios |x - y|^2 / |(x - y).n(x)| over boundary pairs.

    c_omega is the max ratio. The gap bound on straight chords needs
    c_omega >= 1 / min ratio; a domain where that fails is logged. On the unit
    sphere every ratio equals 2.
    """
    m = int(np.ceil(np.sqrt(n_pairs))) + 1
    pts = sample_boundary(domain, m)
    normals = outward_normal(domain, pts)
    diff = pts[:, None, :] - pts[None, :, :]
    num = np.sum(diff * diff, axis=-1)
    den = np.abs(np.einsum('ijk,ik->ij', diff, normals))
    mask = den > 1e-14 * domain.scale
    ratio = num[mask] / den[mask]
    lo, hi = float(np.min(ratio)), float(np.max(ratio))
    fit = ChordFit(min_ratio=lo, max_ratio=hi, c_omega=hi, n_pairs=int(mask.sum()))
    if hi * lo < 1.0:
        logger.warning("chord constant %.6g is below 1 / min ratio = %.6g", hi, 1.0 / lo)
    logger.info("chord constant: ratio in [%.6g, %.6g], C_Omega = %.6g", lo, hi, fit.c_omega)
    return fit


@dataclass
class GapCheck:
    bound: float
    checked: int
    exempt: int
    violations: int

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> Dict:
        d = dict(self.__dict__)
        d['passed'] = self.passed
        return d


def cycle_gap_bound_check(cycles: List[DiffuseCycle], delta: float, c_omega: float,
                          e_sup: float) -> GapCheck:
    """
    For each node j whose velocity lies in {n.v >= delta, |v| <= 1/delta},
    the next gap t^j - t^{j+1} must be at least
        delta^3 / (C_Omega (1 + delta^2 |E|_inf^2)).
    Other nodes are exempt.
    """
    bound = delta**3 / (c_omega * (1.0 + delta**2 * e_sup**2))
    checked = exempt = violations = 0
    for c in cycles:
        for node, nxt in zip(c.nodes[:-1], c.nodes[1:]):
            if node.v @ node.normal >= delta and np.linalg.norm(node.v) <= 1.0 / delta:
                checked += 1
                if nxt.gap < bound:
                    violations += 1
            else:
                exempt += 1
    if violations:
        logger.warning("gap bound %.4g violated %d/%d times", bound, violations, checked)
    return GapCheck(bound=bound, checked=checked, exempt=exempt, violations=violations)


# ---------------------------------------------------------------------------
# Tail estimate
# ---------------------------------------------------------------------------

_PROPOSAL_NORM = 2.0 * (8.0 * np.pi) ** -1.5


def _bracket(v):
    return np.sqrt(1.0 + np.sum(v * v, axis=-1))


def _proposal(gens: List[np.random.Generator], normals: np.ndarray) -> np.ndarray:
    """Half-space Gaussian of variance 4 (density prop. to e^{-|v|^2/8} on n.v > 0)."""
    z = 2.0 * np.array([g.standard_normal(3) for g in gens])
    vn = np.sum(z * normals, axis=-1, keepdims=True)
    return z + (np.abs(vn) - vn) * normals


def tail_probability_curve(domain: LevelSetDomain, field: FieldSpec, start: PhaseState, l_max: int,
                           n_trials: int, rng: np.random.Generator, varpi: float = 1.0,
                           settings: Optional[IntegratorSettings] = None) -> pd.DataFrame:
    """
    Importance-sampled weighted measure of {t^l > 0} for l = 1..l_max.

    Each of the l - 1 free velocities v^j is drawn from a half-space Gaussian
    q; a path carries
        prod_j mu^{1/4}(v^j) <v^j> e^{varpi <v^j> t^j} / q(v^j)
        * prod_{j <= l-2} sqrt(mu(v_b^j)) <v_b^j>
    and contributes to level l when t^l > 0. Trials use independent child
    streams and advance together through march_batch.

    Returns:
        DataFrame(level, estimate, std_error, n_alive)
    """
    first = backward_exit(domain, field, start, settings)
    t1 = start.t - first.exit_time
    contrib = np.zeros((l_max, n_trials))
    alive_counts = np.zeros(l_max, dtype=int)
    if t1 > 0.0:
        contrib[0] = 1.0
        alive_counts[0] = n_trials
        seeds = np.random.SeedSequence(int(rng.integers(2**63))).spawn(n_trials)
        gens = [np.random.default_rng(s) for s in seeds]
        T = np.full(n_trials, t1)
        X = np.tile(first.exit_point, (n_trials, 1))
        weight = np.ones(n_trials)
        alive = np.ones(n_trials, dtype=bool)
        for j in range(1, l_max):
            idx = np.flatnonzero(alive)
            if len(idx) == 0:
                break
            normals = outward_normal(domain, X[idx])
            V = _proposal([gens[i] for i in idx], normals)
            q = _PROPOSAL_NORM * np.exp(-np.sum(V * V, axis=-1) / 8.0)
            b = _bracket(V)
            g = maxwellian(V) ** 0.25 * b * np.exp(varpi * b * T[idx]) / q
            level_weight = weight[idx] * g
            res = march_batch(domain, field, T[idx], X[idx], V, T[idx], settings, direction=-1)
            hit = res.exited & (res.clock > 0.0)
            contrib[j, idx] = np.where(hit, level_weight, 0.0)
            alive_counts[j] = int(hit.sum())
            alive[idx] = hit
            X[idx] = res.x
            T[idx] = res.clock
            weight[idx] = level_weight * np.sqrt(maxwellian(res.v)) * _bracket(res.v)
    est = contrib.mean(axis=1)
    se = contrib.std(axis=1, ddof=1) / np.sqrt(n_trials) if n_trials > 1 else np.zeros(l_max)
    df = pd.DataFrame({'level': np.arange(1, l_max + 1), 'estimate': est, 'std_error': se,
                       'n_alive': alive_counts})
    logger.info("tail estimate: %s", ", ".join(f"l={l}:{e:.3g}" for l, e in zip(df['level'], est)))
    return df


@dataclass
class TailEstimate:
    level: int
    estimate: float
    std_error: float
    n_trials: int

    def to_dict(self) -> Dict:
        return dict(self.__dict__)


def tail_probability_estimate(domain: LevelSetDomain, field: FieldSpec, start: PhaseState, l: int,
                              n_trials: int, rng: np.random.Generator, varpi: float = 1.0,
                              settings: Optional[IntegratorSettings] = None) -> TailEstimate:
    """Estimate at a single level l (see tail_probability_curve)."""
    df = tail_probability_curve(domain, field, start, l, n_trials, rng, varpi, settings)
    row = df.iloc[l - 1]
    return TailEstimate(level=l, estimate=float(row['estimate']), std_error=float(row['std_error']),
                        n_trials=n_trials)


@dataclass
class GeometricTailFit:
    ratio: float
    l0: int
    intercept: float
    n_levels: int

    @property
    def decaying(self) -> bool:
        return bool(np.isfinite(self.ratio) and self.ratio < 1.0)

    def to_dict(self) -> Dict:
        d = dict(self.__dict__)
        d['decaying'] = self.decaying
        return d


def fit_geometric_tail(curve: pd.DataFrame) -> GeometricTailFit:
    """
    WLS fit of log(estimate) = a + l log(r) from l0 on, where l0 is the first
    level after which the estimates only decrease. Level 1 is a calibration
    point and is left out; levels with a zero estimate are dropped.
    """
    df = curve[(curve['level'] >= 2) & (curve['estimate'] > 0)].reset_index(drop=True)
    if len(df) < 2:
        return GeometricTailFit(ratio=float('nan'), l0=int(curve['level'].max()),
                                intercept=float('nan'), n_levels=len(df))
    est = df['estimate'].to_numpy()
    l0_pos = len(est) - 1
    while l0_pos > 0 and est[l0_pos - 1] > est[l0_pos]:
        l0_pos -= 1
    tail = df.iloc[l0_pos:]
    if len(tail) < 2:
        tail = df.iloc[-2:]
    rel = (tail['std_error'] / tail['estimate']).to_numpy()
    weights = 1.0 / np.maximum(rel, 1e-3) ** 2
    X = sm.add_constant(tail['level'].to_numpy(dtype=float))
    model = sm.WLS(np.log(tail['estimate'].to_numpy()), X, weights=weights).fit()
    fit = GeometricTailFit(ratio=float(np.exp(model.params[1])), l0=int(tail['level'].iloc[0]),
                           intercept=float(model.params[0]), n_levels=len(tail))
    logger.info("tail decay: ratio %.4g from l0=%d", fit.ratio, fit.l0)
    return fit
