"""
Transport Solver Module

Linear in-flow transport by Duhamel along characteristics, the Monte Carlo
cycle evaluator for diffuse walls (self-referential or closed on f0), the
Picard iteration with diffuse boundary in stochastic or grid mode, and the
Green's-identity and trace balances.

Sign conventions:
    {d_t + v.grad_x + E.grad_v + nu} f = H
    f(t) = e^{-int nu} (f0 or g at the foot of the characteristic) + int e^{-int nu} H

Iterates are stored as f(t, x, v) = sqrt(mu(v)) sum_a L_a(v) h_a(t, x) with
L_a the tensor Lagrange cardinal functions on probabilists' Hermite nodes
and h_a piecewise linear in (t, x) on a box grid covering the domain.
Stochastic mode fills the node values with the cycle evaluator; grid mode
reads the wall law off the interpolated previous iterate.
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import statsmodels.api as sm
from numpy.polynomial import hermite_e
from scipy.interpolate import RegularGridInterpolator
from scipy.ndimage import distance_transform_edt
from tqdm import tqdm

from characteristics import (DEFAULT_SETTINGS, IntegratorSettings, PhaseState, backward_exit,
                             march_batch)
from collision import CollisionKernel, maxwellian, sqrt_maxwellian
from diffuse_boundary import (GeometricTailFit, cmu_constant, fit_geometric_tail, sample_wall_velocities,
                              tail_probability_curve)
from domain_geometry import (LevelSetDomain, nearest_boundary_point, outward_normal, sample_boundary,
                             surface_rule, tangent_frame, volume_rule)
from errors import (AdmissibilityViolation, CompatibilityViolation, CycleBudgetExceeded,
                    GrazingSingularity, NoExitWithinHorizon)
from external_field import FieldSpec, field_norms
from quadrature import capped_half_space_rule, gauss_hermite_velocity, gauss_legendre, half_space_rule

logger = logging.getLogger(__name__)

Rate = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]

PICARD_MODES = ('stochastic', 'grid')


@dataclass
class SolverConfig:
    """
    Solver inputs.

    Attributes:
        horizon: time horizon T (< 1, and below theta so theta' > 0)
        time_steps: grid time intervals on [0, T]
        v_max: velocity cutoff
        theta: Gaussian weight rate, 0 < theta < 1/4
        varpi: weight rate in e^{-varpi <v> t}
        p: exponent of the L^p balances
        l_max: diffuse-cycle truncation depth
        n_samples: Monte Carlo samples per pointwise evaluation
        cycle_tol: admissible truncated-cycle mass
        n_spatial: box-grid nodes per axis (grid mode)
        n_velocity: Hermite nodes per velocity axis (grid mode)
        picard_mode: 'stochastic' (cycle evaluator at the nodes) or 'grid' (interpolated wall law)
        picard_samples: cycle-evaluator samples per node in stochastic Picard steps
        budget_trials: trials of the tail curve behind the cycle budget
        kappa, collision_polar, collision_azimuth, collision_velocity: collision rule
    """
    horizon: float = 0.1
    time_steps: int = 2
    v_max: float = 8.0
    theta: float = 0.2
    varpi: float = 10.0
    p: float = 2.0
    l_max: int = 8
    n_samples: int = 256
    cycle_tol: float = 1e-2
    n_spatial: int = 5
    n_velocity: int = 4
    picard_mode: str = 'stochastic'
    picard_samples: int = 16
    budget_trials: int = 200
    kappa: float = 1.0
    collision_polar: int = 6
    collision_azimuth: int = 12
    collision_velocity: int = 6

    def __post_init__(self):
        if not 0.0 < self.theta < 0.25:
            raise AdmissibilityViolation(f"theta must lie in (0, 1/4), got {self.theta}")
        if not 0.0 < self.horizon < 1.0:
            raise AdmissibilityViolation(f"horizon must lie in (0, 1), got {self.horizon}")
        if self.theta_prime <= 0.0:
            raise AdmissibilityViolation(
                f"theta' = theta - T = {self.theta_prime:.4g} must be positive")
        if self.p < 1.0:
            raise AdmissibilityViolation(f"p must be >= 1, got {self.p}")
        if min(self.time_steps, self.l_max, self.n_samples, self.n_spatial, self.n_velocity,
               self.picard_samples, self.budget_trials) < 1:
            raise ValueError("solver orders must be positive")
        if self.picard_mode not in PICARD_MODES:
            raise ValueError(f"Unknown picard mode: {self.picard_mode}. Available: {list(PICARD_MODES)}")

    @property
    def theta_prime(self) -> float:
        return self.theta - self.horizon

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.time_steps + 1)

    def collision_kernel(self) -> CollisionKernel:
        return CollisionKernel(kappa=self.kappa, n_polar=self.collision_polar,
                               n_azimuth=self.collision_azimuth,
                               n_velocity=self.collision_velocity, v_max=self.v_max)

    def to_dict(self) -> Dict:
        return dict(self.__dict__)


def constant_rate(c: float) -> Rate:
    """(s, x, v) -> c, vectorized over rows."""
    def rate(s, x, v):
        return np.full(np.shape(x)[:-1], float(c))
    return rate


ZERO_RATE = constant_rate(0.0)


# ---------------------------------------------------------------------------
# Distribution fields
# ---------------------------------------------------------------------------

class DistributionField:
    """
    Base class for f(t, x, v), vectorized over rows.

    For t < 0 every field returns the extension e^{t} f0(x, v).
    """

    def __init__(self, name: str, f0: Callable):
        self.name = name
        self.f0 = f0

    def _evaluate(self, t, x, v) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, t, x, v) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        t = np.broadcast_to(np.asarray(t, dtype=float), np.broadcast_shapes(x.shape[:-1], v.shape[:-1]))
        if not np.any(t < 0.0):
            return self._evaluate(t, x, v)
        out = np.asarray(self._evaluate(np.maximum(t, 0.0), x, v), dtype=float)
        past = np.exp(np.minimum(t, 0.0)) * self.f0(x, v)
        return np.where(t < 0.0, past, out)


class AnalyticField(DistributionField):
    """Closed-form f(t, x, v)."""

    def __init__(self, func: Callable, f0: Optional[Callable] = None, name: str = "analytic"):
        super().__init__(name, f0 or (lambda x, v: func(0.0, x, v)))
        self.func = func

    def _evaluate(self, t, x, v):
        return np.asarray(self.func(t, x, v), dtype=float) * np.ones(np.shape(t))


class HermiteBasis:
    """Tensor Lagrange cardinal functions on n probabilists' Hermite nodes per axis."""

    def __init__(self, n: int):
        self.n = n
        self.points = hermite_e.hermegauss(n)[0]
        X, Y, Z = np.meshgrid(self.points, self.points, self.points, indexing='ij')
        self.nodes = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=-1)
        diff = self.points[:, None] - self.points[None, :]
        np.fill_diagonal(diff, 1.0)
        self._denominator = np.prod(diff, axis=1)

    @property
    def size(self) -> int:
        return self.n**3

    def cardinal_1d(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)[..., None]
        factors = s - self.points
        out = np.empty(s.shape[:-1] + (self.n,))
        for j in range(self.n):
            out[..., j] = np.prod(np.delete(factors, j, axis=-1), axis=-1) / self._denominator[j]
        return out

    def cardinal(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        a, b, c = (self.cardinal_1d(v[..., k]) for k in range(3))
        return np.einsum('...i,...j,...k->...ijk', a, b, c).reshape(v.shape[:-1] + (self.size,))


@dataclass
class BoxGrid:
    """Box grid over the domain; exterior nodes copy their nearest interior node."""
    axes: Tuple[np.ndarray, np.ndarray, np.ndarray]
    inside: np.ndarray
    fill_index: np.ndarray

    @classmethod
    def for_domain(cls, domain: LevelSetDomain, n: int) -> 'BoxGrid':
        pts = sample_boundary(domain, 256)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        axes = tuple(np.linspace(lo[k], hi[k], n) for k in range(3))
        G = np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1)
        inside = domain.xi(G) < -domain.boundary_tol
        if not np.any(inside):
            raise ValueError(f"box grid with {n} nodes per axis has no interior node")
        fill_index = distance_transform_edt(~inside, return_distances=False, return_indices=True)
        return cls(axes=axes, inside=inside, fill_index=fill_index)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.inside.shape

    @property
    def points(self) -> np.ndarray:
        return np.stack(np.meshgrid(*self.axes, indexing='ij'), axis=-1)

    @property
    def interior_points(self) -> np.ndarray:
        return self.points[self.inside]

    def extend(self, values: np.ndarray) -> np.ndarray:
        """values of shape (nx, ny, nz, ...) with exterior entries replaced."""
        i, j, k = self.fill_index
        return values[i, j, k]


class GridField(DistributionField):
    """
    Grid-mode distribution: coefficients h[t, ix, iy, iz, a] with
    f = sqrt(mu(v)) sum_a L_a(v) h_a(t, x).
    """

    def __init__(self, times: np.ndarray, grid: BoxGrid, basis: HermiteBasis, coeffs: np.ndarray,
                 f0: Callable, name: str = "grid"):
        super().__init__(name, f0)
        self.times = np.asarray(times, dtype=float)
        self.grid = grid
        self.basis = basis
        self.coeffs = coeffs
        self._interp = _grid_interpolator(self.times, grid, coeffs)

    @classmethod
    def from_function(cls, func: Callable, times: np.ndarray, grid: BoxGrid, basis: HermiteBasis,
                      f0: Optional[Callable] = None, name: str = "grid") -> 'GridField':
        """Sample func(t, x, v) at every (time, node, velocity node)."""
        P = grid.points
        coeffs = np.empty((len(times),) + grid.shape + (basis.size,))
        weight = sqrt_maxwellian(basis.nodes)
        for j, t in enumerate(times):
            X = np.broadcast_to(P[..., None, :], grid.shape + (basis.size, 3))
            V = np.broadcast_to(basis.nodes, grid.shape + (basis.size, 3))
            coeffs[j] = func(np.full(X.shape[:-1], t), X, V) / weight
        return cls(times, grid, basis, coeffs, f0 or (lambda x, v: func(0.0, x, v)), name=name)

    def coefficients(self, t, x) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        q = np.concatenate([np.broadcast_to(t[..., None], x.shape[:-1] + (1,)), x], axis=-1)
        return self._interp(q.reshape(-1, 4)).reshape(x.shape[:-1] + (self.basis.size,))

    def _evaluate(self, t, x, v):
        h = self.coefficients(t, x)
        return sqrt_maxwellian(v) * np.sum(self.basis.cardinal(v) * h, axis=-1)

    def node_values(self) -> np.ndarray:
        """f at (time, interior node, velocity node)."""
        return self.coeffs[:, self.grid.inside, :] * sqrt_maxwellian(self.basis.nodes)


def _grid_interpolator(times, grid: BoxGrid, values: np.ndarray) -> RegularGridInterpolator:
    full = np.stack([grid.extend(values[j]) for j in range(len(times))])
    t_axis = times if len(times) > 1 else np.array([times[0], times[0] + 1.0])
    if len(times) == 1:
        full = np.concatenate([full, full])
    return RegularGridInterpolator((t_axis,) + tuple(grid.axes), full, method='linear',
                                   bounds_error=False, fill_value=None)


# ---------------------------------------------------------------------------
# Duhamel evaluation
# ---------------------------------------------------------------------------

def duhamel_augment(nu: Rate, H: Rate):
    """Extras (Lambda, S): d Lambda/ds = -nu, dS/ds = -e^{-Lambda} H (integrated backward)."""
    def augment(s, x, v, m):
        lam = m[..., 0]
        return np.stack([-nu(s, x, v), -np.exp(-lam) * H(s, x, v)], axis=-1)
    return augment


@dataclass
class DuhamelBatch:
    value: np.ndarray
    damping: np.ndarray
    source: np.ndarray
    hit_wall: np.ndarray
    foot_time: np.ndarray
    foot_x: np.ndarray
    foot_v: np.ndarray


def duhamel_batch(domain: LevelSetDomain, field: FieldSpec, nu: Rate, H: Rate, f0: Callable,
                  g: Callable, t, X: np.ndarray, V: np.ndarray,
                  settings: Optional[IntegratorSettings] = None) -> DuhamelBatch:
    """Duhamel values for many interior states at once (no grazing classification)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    M = len(X)
    t = np.broadcast_to(np.asarray(t, dtype=float), (M,))
    res = march_batch(domain, field, t, X, V, t.copy(), settings, direction=-1,
                      augment=duhamel_augment(nu, H), extra0=np.zeros((M, 2)))
    lam, src = res.extra[:, 0], res.extra[:, 1]
    hit = res.exited
    foot = np.empty(M)
    if np.any(~hit):
        foot[~hit] = f0(res.x[~hit], res.v[~hit])
    if np.any(hit):
        foot[hit] = g(res.clock[hit], res.x[hit], res.v[hit])
    damping = np.exp(-lam)
    return DuhamelBatch(value=damping * foot + src, damping=damping, source=src, hit_wall=hit,
                        foot_time=res.clock, foot_x=res.x, foot_v=res.v)


@dataclass
class DuhamelResult:
    value: float
    exit_time: float
    hit_wall: bool
    damping: float
    source: float
    std_error: float = 0.0

    def to_dict(self) -> Dict:
        return dict(self.__dict__)


def duhamel_evaluate(config: SolverConfig, domain: LevelSetDomain, field: FieldSpec, nu: Rate,
                     H: Rate, f0: Callable, g: Callable, state: PhaseState,
                     settings: Optional[IntegratorSettings] = None) -> DuhamelResult:
    """
    f(t, x, v) = 1_{t <= t_b} e^{-int nu} f0(X(0), V(0))
               + 1_{t > t_b} e^{-int nu} g(t - t_b, x_b, v_b) + int e^{-int nu} H.

    Raises:
        GrazingAmbiguous: grazing start or touching path
        ExitDetectionFailed: exit refinement failure
    """
    try:
        rec = backward_exit(domain, field, state, settings, horizon=state.t + 1e-9)
        t_b = rec.exit_time
    except NoExitWithinHorizon:
        rec, t_b = None, np.inf
    duration = min(state.t, t_b)
    M = 1
    res = march_batch(domain, field, np.array([state.t]), state.x[None], state.v[None],
                      np.array([duration]), settings, direction=-1,
                      augment=duhamel_augment(nu, H), extra0=np.zeros((M, 2)))
    lam, src = float(res.extra[0, 0]), float(res.extra[0, 1])
    damping = np.exp(-lam)
    if rec is not None and t_b < state.t:
        foot = float(np.asarray(g(np.array([state.t - t_b]), rec.exit_point[None], rec.exit_velocity[None])).ravel()[0])
        hit = True
    else:
        foot = float(np.asarray(f0(res.x, res.v)).ravel()[0])
        hit = False
    return DuhamelResult(value=damping * foot + src, exit_time=float(t_b), hit_wall=hit,
                         damping=float(damping), source=src)


# ---------------------------------------------------------------------------
# Stochastic evaluator (self-referential diffuse boundary)
# ---------------------------------------------------------------------------

SQRT_MU_FLUX = (2.0 * np.pi) ** -0.75 * 8.0 * np.pi


@dataclass
class CycleBudget:
    """
    Measured tail of the diffuse-cycle expansion.

    tail bounds the weighted mass of paths still alive after l_max resolved
    cycles: the fitted geometric decay at level l_max + 1, or, when the
    curve shows no decaying fit, the smallest resolved level (estimate + 2 SE).
    """
    curve: pd.DataFrame
    fit: GeometricTailFit
    l_max: int

    @property
    def tail(self) -> float:
        level = self.l_max + 1
        if self.fit.decaying:
            return float(np.exp(self.fit.intercept + level * np.log(self.fit.ratio)))
        resolved = self.curve[(self.curve['level'] <= level) & (self.curve['estimate'] > 0.0)]
        if resolved.empty:
            return 0.0
        return float((resolved['estimate'] + 2.0 * resolved['std_error']).min())

    def check(self, f_sup: float, tol: float) -> float:
        """tail * f_sup, raising CycleBudgetExceeded above tol."""
        estimate = self.tail * f_sup
        if estimate > tol:
            raise CycleBudgetExceeded(
                f"cycle tail after {self.l_max} cycles is {self.tail:.3g}; truncation estimate "
                f"{estimate:.3g} > {tol:.3g}")
        return estimate

    def to_dict(self) -> Dict:
        return {'l_max': self.l_max, 'tail': self.tail, 'fit': self.fit.to_dict(),
                'curve': self.curve.to_dict(orient='list')}


def measure_cycle_budget(config: SolverConfig, domain: LevelSetDomain, field: FieldSpec,
                         rng: np.random.Generator, n_trials: Optional[int] = None,
                         settings: Optional[IntegratorSettings] = None) -> CycleBudget:
    """Tail curve up to level l_max + 1 from a state that reaches the wall at half the horizon."""
    p = sample_boundary(domain, 1)[0]
    n = outward_normal(domain, p)
    depth = 0.1 * domain.inradius
    start = PhaseState(config.horizon, p - depth * n, -(2.0 * depth / config.horizon) * n)
    curve = tail_probability_curve(domain, field, start, config.l_max + 1,
                                   n_trials or config.budget_trials, rng, settings=settings)
    budget = CycleBudget(curve=curve, fit=fit_geometric_tail(curve), l_max=config.l_max)
    logger.info("cycle budget: tail %.3g after %d cycles", budget.tail, config.l_max)
    return budget


@dataclass
class CycleValues:
    value: np.ndarray
    std_error: np.ndarray
    hit_wall: np.ndarray
    truncation: float


def cycle_values(config: SolverConfig, domain: LevelSetDomain, field: FieldSpec,
                 rates: Sequence[Tuple[Rate, Rate]], f0: Callable, t, X: np.ndarray, V: np.ndarray,
                 seed: int, n_samples: Optional[int] = None, depth: Optional[int] = None,
                 budget: Optional[CycleBudget] = None, f_sup: float = 1.0,
                 settings: Optional[IntegratorSettings] = None, chunk_rows: int = 8192) -> CycleValues:
    """
    Monte Carlo Duhamel values through diffuse cycles for many states.

    Between its k-th and (k+1)-th wall hit a path follows the rates
    rates[min(k, len(rates) - 1)]. At a hit u is drawn from
    sqrt(mu(u))(n.u)/Z and the path picks up the factor
    c_mu Z sqrt(mu(v_b)) e^{-int nu}. With depth set, hit number depth
    closes on the diffuse law of f0; without it the problem is
    self-referential. Hits beyond l_max are cut, and the truncation
    estimate is the larger of their mass and the budget tail, times f_sup.

    Chunks draw from SeedSequence([seed, chunk]), so two calls with the same
    seed and states follow identical paths up to the first hit where they
    differ.

    Raises:
        CycleBudgetExceeded: truncation estimate above config.cycle_tol
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    n_states = len(X)
    t = np.broadcast_to(np.asarray(t, dtype=float), (n_states,))
    n = n_samples or config.n_samples
    unresolved = depth is None or depth > config.l_max
    tail = budget.check(f_sup, config.cycle_tol) if unresolved and budget is not None else 0.0
    c_wall = cmu_constant() * SQRT_MU_FLUX
    per_chunk = max(1, chunk_rows // n)

    value = np.empty(n_states)
    error = np.zeros(n_states)
    hit_any = np.zeros(n_states, dtype=bool)
    dropped = 0.0
    for c, lo in enumerate(range(0, n_states, per_chunk)):
        hi = min(n_states, lo + per_chunk)
        rng = np.random.default_rng(np.random.SeedSequence([seed, c]))
        T = np.repeat(t[lo:hi], n)
        Xc = np.repeat(X[lo:hi], n, axis=0)
        Vc = np.repeat(V[lo:hi], n, axis=0)
        rows = len(T)
        weight = np.ones(rows)
        acc = np.zeros(rows)
        lost = np.zeros(rows)
        alive = np.ones(rows, dtype=bool)
        hit = np.zeros(rows, dtype=bool)

        for k in range(config.l_max + 1):
            idx = np.flatnonzero(alive)
            if len(idx) == 0:
                break
            nu, H = rates[min(k, len(rates) - 1)]
            res = march_batch(domain, field, T[idx], Xc[idx], Vc[idx], T[idx], settings, direction=-1,
                              augment=duhamel_augment(nu, H), extra0=np.zeros((len(idx), 2)))
            damping = np.exp(-res.extra[:, 0])
            acc[idx] += weight[idx] * res.extra[:, 1]
            foot = ~res.exited
            if np.any(foot):
                rows_f = idx[foot]
                acc[rows_f] += weight[rows_f] * damping[foot] * f0(res.x[foot], res.v[foot])
                alive[rows_f] = False
            wall = np.flatnonzero(res.exited)
            if len(wall) == 0:
                continue
            rows_w = idx[wall]
            hit[rows_w] = True
            factor = damping[wall] * c_wall * sqrt_maxwellian(res.v[wall])
            # one draw per hit in every branch
            u = sample_wall_velocities(domain, res.x[wall], rng, scale=np.sqrt(2.0))
            if k + 1 > config.l_max:
                lost[rows_w] = np.abs(weight[rows_w] * factor)
                alive[rows_w] = False
            elif depth is not None and k + 1 >= depth:
                acc[rows_w] += weight[rows_w] * factor * f0(res.x[wall], u)
                alive[rows_w] = False
            else:
                weight[rows_w] *= factor
                T[rows_w], Xc[rows_w], Vc[rows_w] = res.clock[wall], res.x[wall], u

        shape = (hi - lo, n)
        samples = acc.reshape(shape)
        value[lo:hi] = samples.mean(axis=1)
        if n > 1:
            error[lo:hi] = samples.std(axis=1, ddof=1) / np.sqrt(n)
        hit_any[lo:hi] = hit.reshape(shape).any(axis=1)
        dropped = max(dropped, float(lost.reshape(shape).mean(axis=1).max()))

    estimate = max(dropped * f_sup, tail)
    if estimate > config.cycle_tol:
        raise CycleBudgetExceeded(
            f"truncation estimate {estimate:.3g} after {config.l_max} cycles > {config.cycle_tol:.3g}")
    if estimate > 0.0:
        logger.debug("cycles cut after %d hits (estimate %.3g)", config.l_max, estimate)
    return CycleValues(value=value, std_error=error, hit_wall=hit_any, truncation=estimate)


def stochastic_duhamel(config: SolverConfig, domain: LevelSetDomain, field: FieldSpec, nu: Rate,
                       H: Rate, f0: Callable, state: PhaseState, rng: np.random.Generator,
                       n_samples: Optional[int] = None,
                       settings: Optional[IntegratorSettings] = None,
                       budget: Optional[CycleBudget] = None,
                       f_sup: Optional[float] = None) -> DuhamelResult:
    """
    Monte Carlo value of the linear problem whose wall data is the diffuse
    law of the solution itself,
        g(t, x, v) = c_mu sqrt(mu(v)) int_{n.u > 0} f(t, x, u) sqrt(mu(u)) (n.u) du.

    Paths still alive after l_max cycles are cut. f_sup defaults to the
    weighted sup of f0.

    Raises:
        CycleBudgetExceeded: truncation estimate above config.cycle_tol
    """
    if f_sup is None:
        f_sup = initial_weighted_sup(config, domain, f0)
    res = cycle_values(config, domain, field, [(nu, H)], f0, state.t, state.x[None], state.v[None],
                       int(rng.integers(2**63)), n_samples=n_samples, budget=budget, f_sup=f_sup,
                       settings=settings)
    return DuhamelResult(value=float(res.value[0]), exit_time=float('nan'), hit_wall=bool(res.hit_wall[0]),
                         damping=float('nan'), source=float('nan'), std_error=float(res.std_error[0]))


class StochasticField(DistributionField):
    """Pointwise stochastic evaluator of the self-referential diffuse problem."""

    def __init__(self, config: SolverConfig, domain: LevelSetDomain, field: FieldSpec, nu: Rate,
                 H: Rate, f0: Callable, seed: int = 0, settings: Optional[IntegratorSettings] = None,
                 budget: Optional[CycleBudget] = None):
        super().__init__("stochastic", f0)
        self.config, self.domain, self.field = config, domain, field
        self.nu, self.H, self.seed, self.settings = nu, H, seed, settings
        self.budget = budget
        self.f_sup = initial_weighted_sup(config, domain, f0)

    def evaluate_with_error(self, t: float, x, v) -> DuhamelResult:
        coords = np.concatenate([[t], np.ravel(x), np.ravel(v)])
        key = np.random.SeedSequence([self.seed] + [int(abs(round(c * 1e9))) % 2**32 for c in coords])
        rng = np.random.default_rng(key)
        state = PhaseState(float(t), np.asarray(x, dtype=float), np.asarray(v, dtype=float))
        return stochastic_duhamel(self.config, self.domain, self.field, self.nu, self.H, self.f0,
                                  state, rng, settings=self.settings,
                                  budget=self.budget, f_sup=self.f_sup)

    def _evaluate(self, t, x, v):
        x = np.atleast_2d(x)
        v = np.atleast_2d(v)
        t = np.broadcast_to(t, (len(x),))
        return np.array([self.evaluate_with_error(tt, xx, vv).value for tt, xx, vv in zip(t, x, v)])


# ---------------------------------------------------------------------------
# Compatibility
# ---------------------------------------------------------------------------

@dataclass
class CompatibilityReport:
    max_mismatch: float
    passed: bool
    n_checked: int

    def to_dict(self) -> Dict:
        return dict(self.__dict__)


def diffuse_boundary_datum(domain: LevelSetDomain, f_out: Callable, n_normal: int = 8,
                           n_tangential: int = 6) -> Callable:
    """
    g(t, x, v) = c_mu^h sqrt(mu(v)) sum_i w_i f_out(t, x, u_i) sqrt(mu(u_i))(n.u_i)
    with c_mu^h the discrete normalization of the same rule, so that
    f_out = sqrt(mu) reproduces sqrt(mu) exactly.
    """
    def g(t, x, v):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        v = np.atleast_2d(np.asarray(v, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), (len(x),))
        normals = outward_normal(domain, x)
        out = np.empty(len(x))
        for k in range(len(x)):
            nodes, w = half_space_rule(normals[k], n_normal, n_tangential)
            flux = w * maxwellian(nodes) * (nodes @ normals[k])
            vals = f_out(np.full(len(nodes), t[k]), np.tile(x[k], (len(nodes), 1)), nodes)
            out[k] = float(sqrt_maxwellian(v[k])) * float(np.sum(flux * vals / sqrt_maxwellian(nodes))) / np.sum(flux)
        return out
    return g


def check_compatibility(domain: LevelSetDomain, f0: Callable, g: Callable, n_points: int = 32,
                        tol: float = 1e-6) -> CompatibilityReport:
    """max |f0(x, v) - g(0, x, v)| over boundary samples and incoming velocities."""
    pts = sample_boundary(domain, n_points)
    normals = outward_normal(domain, pts)
    worst, count = 0.0, 0
    for x, n in zip(pts, normals):
        nodes, _ = half_space_rule(-n, 4, 3, v_max=4.0)
        X = np.tile(x, (len(nodes), 1))
        mismatch = np.abs(f0(X, nodes) - g(np.zeros(len(nodes)), X, nodes))
        worst = max(worst, float(np.max(mismatch)))
        count += len(nodes)
    report = CompatibilityReport(max_mismatch=worst, passed=worst <= tol, n_checked=count)
    logger.info("compatibility: max mismatch %.3e over %d samples", worst, count)
    return report


# ---------------------------------------------------------------------------
# Grid-mode Picard iteration
# ---------------------------------------------------------------------------

@dataclass
class CollisionTables:
    """Gamma_gain(f, f)(v_l) = h^T gain[l] h and nu(sqrt(mu) f)(v_l) = frequency[l] . h."""
    gain: np.ndarray
    frequency: np.ndarray


def collision_tables(kernel: CollisionKernel, basis: HermiteBasis) -> CollisionTables:
    u, wu = kernel.u_nodes, kernel.u_weights
    om, wo = kernel.omega, kernel.omega_weights
    sq_u = sqrt_maxwellian(u)
    L_u = basis.cardinal(u)
    gain = np.empty((basis.size, basis.size, basis.size))
    freq = np.empty((basis.size, basis.size))
    for l, v in enumerate(basis.nodes):
        B = kernel.cross_section(v, u, om)
        proj = ((u - v) @ om.T)[..., None] * om[None, :, :]
        u_p = (u[:, None, :] - proj).reshape(-1, 3)
        v_p = (v + proj).reshape(-1, 3)
        W = (wu[:, None] * wo[None, :] * B * sq_u[:, None]).ravel()
        Fa = sqrt_maxwellian(u_p)[:, None] * basis.cardinal(u_p)
        Fb = sqrt_maxwellian(v_p)[:, None] * basis.cardinal(v_p)
        gain[l] = (Fa * W[:, None]).T @ Fb
        freq[l] = (wu * (B @ wo) * sq_u**2) @ L_u
    return CollisionTables(gain=gain, frequency=freq)


@dataclass
class PicardResult:
    iterates: List[GridField]
    history: pd.DataFrame
    initial_weighted_sup: float
    mode: str = 'grid'
    budget: Optional[CycleBudget] = None

    @property
    def c1(self) -> float:
        """Fitted C_1 in sup_m ||e^{theta'|v|^2} f^m|| <= C_1 ||e^{theta|v|^2} f0||."""
        return float(self.history['bound_ratio'].max())

    def contraction_rate(self) -> float:
        """exp(slope) of an OLS fit of log sup-differences against m."""
        diffs = self.history.dropna(subset=['sup_difference'])
        diffs = diffs[diffs['sup_difference'] > 0]
        if len(diffs) < 2:
            return float('nan')
        X = sm.add_constant(diffs['m'].to_numpy(dtype=float))
        fit = sm.OLS(np.log(diffs['sup_difference'].to_numpy()), X).fit()
        return float(np.exp(fit.params[1]))

    def to_dict(self) -> Dict:
        return {'c1': self.c1, 'contraction_rate': self.contraction_rate(),
                'initial_weighted_sup': self.initial_weighted_sup, 'mode': self.mode,
                'cycle_tail': self.budget.tail if self.budget is not None else None,
                'history': self.history.to_dict(orient='list')}


def weighted_sup(config: SolverConfig, f: GridField, theta: Optional[float] = None) -> float:
    """max e^{theta |v|^2} |f| over (time, interior node, velocity node)."""
    theta = config.theta_prime if theta is None else theta
    vals = f.node_values()
    w = np.exp(theta * np.sum(f.basis.nodes**2, axis=-1))
    return float(np.max(np.abs(vals) * w))


def initial_weighted_sup(config: SolverConfig, domain: LevelSetDomain, f0: Callable,
                         n_points: int = 64) -> float:
    """Sampled ||e^{theta |v|^2} f0||_inf on interior and boundary points over |v| <= 4."""
    pts = np.vstack([volume_rule(domain, 3, 4, 8)[0], sample_boundary(domain, n_points)])
    vel = gauss_hermite_velocity(6, v_max=4.0)[0]
    X = np.repeat(pts, len(vel), axis=0)
    Vv = np.tile(vel, (len(pts), 1))
    return float(np.max(np.abs(f0(X, Vv)) * np.exp(config.theta * np.sum(Vv**2, axis=-1))))


def _boundary_moments(basis: HermiteBasis, normals: np.ndarray, n_normal: int = 8,
                      n_tangential: int = 6) -> np.ndarray:
    """
    Rows c_h * sum_i w_i mu(u_i)(n.u_i) L_a(u_i): the diffuse law of a grid
    field at a wall point is sqrt(mu(v)) times this row dotted with h.
    """
    out = np.empty((len(normals), basis.size))
    for k, n in enumerate(normals):
        nodes, w = half_space_rule(n, n_normal, n_tangential)
        flux = w * maxwellian(nodes) * (nodes @ n)
        out[k] = (flux @ basis.cardinal(nodes)) / np.sum(flux)
    return out


def _level_rates(field: FieldSpec, f: GridField, tables: CollisionTables) -> Tuple[Rate, Rate]:
    """(nu(sqrt(mu) f) - v.E/2, Gamma_gain(f, f)) of a grid iterate as rates along characteristics."""
    grid, basis, times = f.grid, f.basis, f.times
    sq_nodes = sqrt_maxwellian(basis.nodes)
    nu_grid = np.einsum('la,t...a->t...l', tables.frequency, f.coeffs)
    gain_grid = np.einsum('lab,t...a,t...b->t...l', tables.gain, f.coeffs, f.coeffs) / sq_nodes
    nu_interp = _grid_interpolator(times, grid, nu_grid)
    gain_interp = _grid_interpolator(times, grid, gain_grid)

    def query(interp, s, x):
        q = np.concatenate([np.asarray(s, dtype=float).reshape(-1, 1), x.reshape(-1, 3)], axis=-1)
        return interp(q)

    def nu_eff(s, x, v):
        L = basis.cardinal(v)
        rate = np.sum(L * query(nu_interp, s, x), axis=-1)
        return rate - 0.5 * np.sum(v * field.value(s, x), axis=-1)

    def source(s, x, v):
        L = basis.cardinal(v)
        return sqrt_maxwellian(v) * np.sum(L * query(gain_interp, s, x), axis=-1)

    return nu_eff, source


def _initial_coeffs(f0: Callable, times: np.ndarray, grid: BoxGrid, basis: HermiteBasis) -> np.ndarray:
    return GridField.from_function(lambda t, x, v: f0(x, v), times[:1], grid, basis).coeffs[0]


def picard_step(config: SolverConfig, domain: LevelSetDomain, field: FieldSpec,
                f0: Callable, prev: GridField, wall_source: GridField, tables: CollisionTables,
                settings: Optional[IntegratorSettings] = None) -> GridField:
    """One grid-mode level: collision terms from prev, wall data from the diffuse law of wall_source."""
    grid, basis, times = prev.grid, prev.basis, prev.times
    sq_nodes = sqrt_maxwellian(basis.nodes)
    nu_eff, source = _level_rates(field, prev, tables)

    def g(s, x, v):
        moments = _boundary_moments(basis, outward_normal(domain, x))
        h = wall_source.coefficients(s, x)
        return sqrt_maxwellian(v) * np.sum(moments * h, axis=-1)

    interior = grid.interior_points
    coeffs = np.empty_like(prev.coeffs)
    coeffs[0] = _initial_coeffs(f0, times, grid, basis)
    X = np.repeat(interior, basis.size, axis=0)
    V = np.tile(basis.nodes, (len(interior), 1))
    for j, t in enumerate(times[1:], start=1):
        batch = duhamel_batch(domain, field, nu_eff, source, f0, g, t, X, V, settings)
        level = np.zeros(grid.shape + (basis.size,))
        level[grid.inside] = batch.value.reshape(len(interior), basis.size) / sq_nodes
        coeffs[j] = level
    return GridField(times, grid, basis, coeffs, f0, name="picard")


def stochastic_picard_step(config: SolverConfig, domain: LevelSetDomain, field: FieldSpec,
                           f0: Callable, template: GridField, rates: Sequence[Tuple[Rate, Rate]],
                           seed: int, budget: Optional[CycleBudget] = None, f_sup: float = 1.0,
                           settings: Optional[IntegratorSettings] = None) -> Tuple[GridField, float, float]:
    """
    f^{m+1} at the grid nodes from the cycle evaluator.

    rates lists the rates of f^m, f^{m-1}, ..., f^0: after k wall hits a path
    follows the equation of f^{m+1-k}, and hit number m + 1 closes on the
    diffuse law of f0.

    Returns:
        (f^{m+1}, weighted max standard error, truncation estimate)
    """
    grid, basis, times = template.grid, template.basis, template.times
    sq_nodes = sqrt_maxwellian(basis.nodes)
    interior = grid.interior_points
    later = times[1:]
    X = np.repeat(interior, basis.size, axis=0)
    V = np.tile(basis.nodes, (len(interior), 1))
    res = cycle_values(config, domain, field, rates, f0, np.repeat(later, len(X)),
                       np.tile(X, (len(later), 1)), np.tile(V, (len(later), 1)), seed,
                       n_samples=config.picard_samples, depth=len(rates), budget=budget, f_sup=f_sup,
                       settings=settings)
    coeffs = np.empty((len(times),) + grid.shape + (basis.size,))
    coeffs[0] = _initial_coeffs(f0, times, grid, basis)
    values = res.value.reshape(len(later), len(interior), basis.size)
    for j in range(len(later)):
        level = np.zeros(grid.shape + (basis.size,))
        level[grid.inside] = values[j] / sq_nodes
        coeffs[j + 1] = level
    w = np.exp(config.theta_prime * np.sum(basis.nodes**2, axis=-1))
    se = float(np.max(res.std_error.reshape(-1, basis.size) * w))
    return GridField(times, grid, basis, coeffs, f0, name="picard"), se, res.truncation


def picard_iterate(config: SolverConfig, domain: LevelSetDomain, field: FieldSpec, f0: Callable,
                   m_max: int, kernel: Optional[CollisionKernel] = None,
                   settings: Optional[IntegratorSettings] = None, check_compat: bool = True,
                   progress: bool = False, mode: Optional[str] = None, seed: int = 0,
                   budget: Optional[CycleBudget] = None) -> PicardResult:
    """
    f^0 = sqrt(mu); f^{m+1} solves
        {d_t + v.grad_x + E.grad_v - v.E/2 + nu(sqrt(mu) f^m)} f^{m+1} = Gamma_gain(f^m, f^m)
    with f^{m+1}(0) = f0 and wall data the diffuse law of f0 (m = 0) or f^m.

    mode 'stochastic' (config.picard_mode by default) evaluates every level
    at the nodes with the cycle evaluator; levels deeper than l_max are
    checked against the measured cycle budget. Every level reuses the
    stream of seed. mode 'grid' takes the wall law from the interpolated
    previous iterate.

    Raises:
        CompatibilityViolation: f0 disagrees with its diffuse law on gamma_- at t = 0
        CycleBudgetExceeded: truncated cycle mass above config.cycle_tol
    """
    mode = mode or config.picard_mode
    if mode not in PICARD_MODES:
        raise ValueError(f"Unknown picard mode: {mode}. Available: {list(PICARD_MODES)}")
    grid = BoxGrid.for_domain(domain, config.n_spatial)
    basis = HermiteBasis(config.n_velocity)
    times = config.times
    if check_compat:
        report = check_compatibility(domain, f0, diffuse_boundary_datum(domain, lambda t, x, v: f0(x, v)),
                                     n_points=16, tol=1e-6)
        if not report.passed:
            raise CompatibilityViolation(
                f"f0 differs from its diffuse law by {report.max_mismatch:.3e} on gamma_-")
    tables = collision_tables(kernel or config.collision_kernel(), basis)
    f_init = GridField.from_function(lambda t, x, v: f0(x, v), times, grid, basis, f0, name="f0")
    current = GridField.from_function(lambda t, x, v: sqrt_maxwellian(v) * np.ones(np.shape(t)),
                                      times, grid, basis, f0, name="f^0")
    bound0 = initial_weighted_sup(config, domain, f0)
    if mode == 'stochastic' and budget is None:
        budget = measure_cycle_budget(config, domain, field, np.random.default_rng(seed), settings=settings)
    rates = [_level_rates(field, current, tables)] if mode == 'stochastic' else []
    f_sup = max(bound0, weighted_sup(config, current))
    iterates = [current]
    rows = [{'m': 0, 'weighted_sup': weighted_sup(config, current),
             'bound_ratio': weighted_sup(config, current) / bound0, 'sup_difference': np.nan,
             'std_error': 0.0, 'truncation': 0.0}]

    steps = range(1, m_max + 1)
    for m in tqdm(steps, desc="picard", disable=not progress):
        if mode == 'stochastic':
            nxt, se, trunc = stochastic_picard_step(config, domain, field, f0, current, rates, seed,
                                                    budget, f_sup, settings)
            rates.insert(0, _level_rates(field, nxt, tables))
        else:
            wall = f_init if m == 1 else current
            nxt = picard_step(config, domain, field, f0, current, wall, tables, settings)
            se, trunc = 0.0, 0.0
        ws = weighted_sup(config, nxt)
        f_sup = max(f_sup, ws)
        diff = float(np.max(np.abs(nxt.node_values() - current.node_values())
                            * np.exp(config.theta_prime * np.sum(basis.nodes**2, axis=-1))))
        rows.append({'m': m, 'weighted_sup': ws, 'bound_ratio': ws / bound0, 'sup_difference': diff,
                     'std_error': se, 'truncation': trunc})
        logger.info("picard (%s) m=%d: weighted sup %.6g, difference %.3e", mode, m, ws, diff)
        iterates.append(nxt)
        current = nxt
    return PicardResult(iterates=iterates, history=pd.DataFrame(rows), initial_weighted_sup=bound0,
                        mode=mode, budget=budget)


def perturbed_equilibrium(domain: LevelSetDomain, eps: float = 0.1, width: float = 0.5) -> Callable:
    """f0 = sqrt(mu)(1 + eps bump(x)), compatible with the diffuse law."""
    def f0(x, v):
        x = np.asarray(x, dtype=float)
        r2 = np.sum((x - domain.center) ** 2, axis=-1)
        return sqrt_maxwellian(v) * (1.0 + eps * np.exp(-r2 / width**2))
    return f0


# ---------------------------------------------------------------------------
# Balances
# ---------------------------------------------------------------------------

def transport_fd(f: DistributionField, field: FieldSpec, t, x, v, h: float) -> np.ndarray:
    """Forward differences of {d_t + v.grad_x + E.grad_v} f (first order in h)."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1])
    base = f(t, x, v)
    out = (f(t + h, x, v) - base) / h
    E = field.value(t, x)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        out = out + v[..., k] * (f(t, x + e, v) - base) / h
        out = out + E[..., k] * (f(t, x, v + e) - base) / h
    return out


def _signed_power(f, p):
    if p == 2:
        return f
    return np.where(f == 0.0, 0.0, np.abs(f) ** (p - 2.0) * f)


@dataclass
class GreensResolution:
    n_rho: int = 10
    n_polar: int = 8
    n_azimuth: int = 16
    n_velocity: int = 8
    n_time: int = 4
    n_normal: int = 8
    n_tangential: int = 6
    fd_step: float = 1e-3

    def refined(self, factor: float) -> 'GreensResolution':
        """Every node count times factor (rounded up), fd_step over factor."""
        counts = {k: int(np.ceil(v * factor - 1e-9)) for k, v in self.__dict__.items() if k != 'fd_step'}
        return GreensResolution(**counts, fd_step=self.fd_step / factor)


@dataclass
class GreensTerms:
    final: float
    outgoing: float
    initial: float
    incoming: float
    transport: float

    @property
    def residual(self) -> float:
        return self.final + self.outgoing - self.initial - self.incoming - self.transport

    def to_dict(self) -> Dict:
        d = dict(self.__dict__)
        d['residual'] = self.residual
        return d


def greens_identity_terms(config: SolverConfig, f: DistributionField, domain: LevelSetDomain,
                          field: FieldSpec, p: float, t_final: float,
                          resolution: Optional[GreensResolution] = None) -> GreensTerms:
    """
    ||f(T')||_p^p + int |f|_{gamma+,p}^p - ||f(0)||_p^p - int |f|_{gamma-,p}^p
        - int int p {d_t + v.grad_x + E.grad_v} f |f|^{p-2} f
    term by term.
    """
    res = resolution or GreensResolution()
    xs, wx = volume_rule(domain, res.n_rho, res.n_polar, res.n_azimuth)
    vs, wv = gauss_hermite_velocity(res.n_velocity, v_max=config.v_max)
    X = np.repeat(xs, len(vs), axis=0)
    Vv = np.tile(vs, (len(xs), 1))
    W = np.repeat(wx, len(vs)) * np.tile(wv, len(xs))
    ts, wt = gauss_legendre(res.n_time, 0.0, t_final)

    def bulk(t):
        return float(np.sum(W * np.abs(f(np.full(len(X), t), X, Vv)) ** p))

    bpts, bnormals, bw = surface_rule(domain, res.n_polar, res.n_azimuth)
    outgoing = incoming = 0.0
    for y, n, wy in zip(bpts, bnormals, bw):
        for sign in (1.0, -1.0):
            nodes, wn = half_space_rule(sign * n, res.n_normal, res.n_tangential, v_max=config.v_max)
            Y = np.tile(y, (len(nodes), 1))
            flux = np.abs(nodes @ n)
            total = 0.0
            for t, w_t in zip(ts, wt):
                total += w_t * float(np.sum(wn * flux * np.abs(f(np.full(len(nodes), t), Y, nodes)) ** p))
            if sign > 0:
                outgoing += wy * total
            else:
                incoming += wy * total

    transport = 0.0
    for t, w_t in zip(ts, wt):
        tt = np.full(len(X), t)
        vals = f(tt, X, Vv)
        transport += w_t * float(np.sum(W * p * transport_fd(f, field, tt, X, Vv, res.fd_step)
                                        * _signed_power(vals, p)))
    return GreensTerms(final=bulk(t_final), outgoing=outgoing, initial=bulk(0.0), incoming=incoming,
                       transport=transport)


def greens_identity_residual(config: SolverConfig, f: DistributionField, domain: LevelSetDomain,
                             field: FieldSpec, p: Optional[float] = None,
                             t_final: Optional[float] = None,
                             resolution: Optional[GreensResolution] = None) -> float:
    p = config.p if p is None else p
    t_final = config.horizon if t_final is None else t_final
    terms = greens_identity_terms(config, f, domain, field, p, t_final, resolution)
    logger.debug("green's identity terms: %s", terms.to_dict())
    return terms.residual


def greens_refinement_study(config: SolverConfig, f: DistributionField, domain: LevelSetDomain,
                            field: FieldSpec, steps: Sequence[float] = (0.04, 0.028, 0.02),
                            resolution: Optional[GreensResolution] = None) -> pd.DataFrame:
    """
    Residual on a refining grid sequence.

    Level h refines every node count of the base resolution by steps[0] / h
    and uses h as the difference step, so the grid spacing is proportional to
    h. attrs['order'] is the OLS slope of log |residual| against log h.
    """
    base = resolution or GreensResolution()
    rows = []
    for h in steps:
        factor = steps[0] / h
        r = replace(base, fd_step=steps[0]).refined(factor)
        rows.append({'h': h, 'factor': factor, 'n_rho': r.n_rho, 'n_velocity': r.n_velocity,
                     'residual': greens_identity_residual(config, f, domain, field, resolution=r)})
    df = pd.DataFrame(rows)
    X = sm.add_constant(np.log(df['h'].to_numpy()))
    fit = sm.OLS(np.log(np.abs(df['residual'].to_numpy())), X).fit()
    df.attrs['order'] = float(fit.params[1])
    logger.info("green's identity residual order %.3f", df.attrs['order'])
    return df


@dataclass
class TraceCheck:
    eps: float
    lhs: float
    rhs_shape: float
    constant: float

    @property
    def rhs(self) -> float:
        return self.constant * self.rhs_shape

    @property
    def passed(self) -> bool:
        return self.lhs <= self.rhs * (1.0 + 1e-12)

    def to_dict(self) -> Dict:
        return {'eps': self.eps, 'lhs': self.lhs, 'rhs_shape': self.rhs_shape,
                'constant': self.constant, 'rhs': self.rhs, 'passed': self.passed}


def trace_balance_check(config: SolverConfig, f: DistributionField, domain: LevelSetDomain,
                        field: FieldSpec, eps: float, t: Optional[float] = None,
                        constant: float = 1.0,
                        resolution: Optional[GreensResolution] = None) -> TraceCheck:
    """
    lhs = int_0^t int_{gamma+ \\ gamma+^eps} |f| d gamma ds with the almost
    grazing (n.v < eps) and large (|v| > 1/eps) velocities removed;
    rhs = C e^{T||E||}(1 + eps^2 ||E||^2)/eps^3
          [||f0||_1 + int_0^t (||f||_1 + ||{d_t + v.grad_x + E.grad_v} f||_1)].
    """
    res = resolution or GreensResolution()
    t = config.horizon if t is None else t
    e_sup = field_norms(domain, field, n_samples=128).e_sup
    ts, wt = gauss_legendre(res.n_time, 0.0, t)

    bpts, bnormals, bw = surface_rule(domain, res.n_polar, res.n_azimuth)
    lhs = 0.0
    for y, n, wy in zip(bpts, bnormals, bw):
        nodes, wn = capped_half_space_rule(n, eps, n_normal=res.n_normal, n_radial=res.n_tangential,
                                           n_angle=2 * res.n_tangential)
        Y = np.tile(y, (len(nodes), 1))
        flux = nodes @ n
        for s, w_s in zip(ts, wt):
            lhs += wy * w_s * float(np.sum(wn * flux * np.abs(f(np.full(len(nodes), s), Y, nodes))))

    xs, wx = volume_rule(domain, res.n_rho, res.n_polar, res.n_azimuth)
    vs, wv = gauss_hermite_velocity(res.n_velocity, v_max=config.v_max)
    X = np.repeat(xs, len(vs), axis=0)
    Vv = np.tile(vs, (len(xs), 1))
    W = np.repeat(wx, len(vs)) * np.tile(wv, len(xs))
    f0_norm = float(np.sum(W * np.abs(f(np.zeros(len(X)), X, Vv))))
    time_part = 0.0
    for s, w_s in zip(ts, wt):
        ss = np.full(len(X), s)
        time_part += w_s * float(np.sum(W * (np.abs(f(ss, X, Vv))
                                             + np.abs(transport_fd(f, field, ss, X, Vv, res.fd_step)))))
    shape = (np.exp(config.horizon * e_sup) * (1.0 + eps**2 * e_sup**2) / eps**3
             * (f0_norm + time_part))
    return TraceCheck(eps=eps, lhs=lhs, rhs_shape=float(shape), constant=constant)


def fit_trace_constant(checks: Sequence[TraceCheck]) -> float:
    """One constant for a family: max lhs / rhs_shape."""
    ratios = [c.lhs / c.rhs_shape for c in checks if c.rhs_shape > 0]
    return float(max(ratios)) if ratios else 0.0


# ---------------------------------------------------------------------------
# Boundary normal derivative
# ---------------------------------------------------------------------------

@dataclass
class BoundaryDerivative:
    gradient: np.ndarray
    normal_derivative: float
    n_dot_v: float

    def to_dict(self) -> Dict:
        return {'gradient': self.gradient.tolist(), 'normal_derivative': self.normal_derivative,
                'n_dot_v': self.n_dot_v}


def _project(domain: LevelSetDomain, x):
    return nearest_boundary_point(domain, x, strict=False).xbar


def boundary_normal_derivative(config: SolverConfig, g: Callable, domain: LevelSetDomain,
                               field: FieldSpec, state: PhaseState, nu: Rate = ZERO_RATE,
                               H: Rate = ZERO_RATE, h: float = 1e-5, level_form: bool = False,
                               settings: Optional[IntegratorSettings] = None) -> BoundaryDerivative:
    """
    grad_x g on gamma_- assembled from the wall data:
        sum_i tau_i d_tau_i g - n/(n.v) {d_t g + sum_i (v.tau_i) d_tau_i g + nu g - H + E.grad_v g}
    level_form adds the -v.E/2 g term of the Picard level equation.

    Raises:
        GrazingSingularity: |n.v| below the grazing tolerance
    """
    settings = settings or DEFAULT_SETTINGS
    x, v, t = state.x, state.v, state.t
    frame = tangent_frame(domain, x)
    n = frame.normal
    nv = float(n @ v)
    if abs(nv) < settings.grazing_tol(v):
        raise GrazingSingularity(f"n.v = {nv:.3e} on the grazing set")
    if abs(nv) < 0.1:
        logger.warning("normal derivative near grazing: n.v = %.3e", nv)

    def gv(tt, xx, vv):
        return float(np.asarray(g(np.array([tt]), np.asarray(xx)[None], np.asarray(vv)[None])).ravel()[0])

    base = gv(t, x, v)
    tangential = []
    for tau in (frame.tau1, frame.tau2):
        plus = gv(t, _project(domain, x + h * tau), v)
        minus = gv(t, _project(domain, x - h * tau), v)
        tangential.append((plus - minus) / (2.0 * h))
    dt = (gv(t + h, x, v) - gv(t - h, x, v)) / (2.0 * h)
    grad_v = np.array([(gv(t, x, v + h * e) - gv(t, x, v - h * e)) / (2.0 * h) for e in np.eye(3)])
    E = field.value(t, x)
    rate = float(np.asarray(nu(np.array([t]), x[None], v[None])).ravel()[0])
    src = float(np.asarray(H(np.array([t]), x[None], v[None])).ravel()[0])
    bracket = (dt + sum(float(v @ tau) * d for tau, d in zip((frame.tau1, frame.tau2), tangential))
               + rate * base - src + float(E @ grad_v))
    if level_form:
        bracket -= 0.5 * float(v @ E) * base
    grad = tangential[0] * frame.tau1 + tangential[1] * frame.tau2 - n * bracket / nv
    return BoundaryDerivative(gradient=grad, normal_derivative=float(grad @ n), n_dot_v=nv)


def boundary_normal_derivative_level(config: SolverConfig, g: Callable, domain: LevelSetDomain,
                                     field: FieldSpec, state: PhaseState, nu: Rate = ZERO_RATE,
                                     H: Rate = ZERO_RATE, h: float = 1e-5,
                                     settings: Optional[IntegratorSettings] = None) -> BoundaryDerivative:
    """Normal derivative of a Picard level on gamma_- (includes the -v.E/2 term)."""
    return boundary_normal_derivative(config, g, domain, field, state, nu, H, h, level_form=True,
                                      settings=settings)


def fd_normal_derivative(f: DistributionField, domain: LevelSetDomain, state: PhaseState,
                         h: float = 1e-5) -> float:
    """One-sided difference of f along -n at a wall point."""
    n = outward_normal(domain, state.x)
    inner = state.x - h * n
    vals = f(np.array([state.t, state.t]), np.stack([state.x, inner]), np.stack([state.v, state.v]))
    return float((vals[0] - vals[1]) / h)
