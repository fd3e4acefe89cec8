"""
Kinematic Weight Module

The grazing-set weight alpha = chi(beta) near the wall, its sextic cutoff chi, the
closed-form transport derivative of beta^2, and the velocity-lemma sandwich

    e^{-C int(|V|+1)} alpha(s) <= alpha(tau) <= e^{C int(|V|+1)} alpha(s)

checked on sampled trajectories with a fitted rate C.
"""

import logging
from dataclasses import dataclass, field as dc_field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.integrate import cumulative_trapezoid
from tqdm import tqdm

from characteristics import IntegratorSettings, PhaseState, rk4_step, sample_trajectory
from domain_geometry import (LevelSetDomain, nearest_boundary_point, nearest_point_jacobian,
                             outward_normal, sample_boundary)
from errors import GrazingAmbiguous, NegativeRadicand, OutsideCollar
from external_field import FieldSpec

logger = logging.getLogger(__name__)

RADICAND_FLOOR = -1e-14


class Cutoff:
    """
    chi(s) = s on [0, a], a + (b - a) P((s - a)/(b - a)) on (a, b), 3 delta'/8 beyond,
    with a = delta'/4, b = delta'/2 and P(u) = u - 5/2 u^4 + 3 u^5 - u^6.

    P' = 1 - (10u^3 - 15u^4 + 6u^5), so chi is C^2, nondecreasing and chi' <= 1.
    """

    def __init__(self, delta_prime: float):
        if delta_prime <= 0:
            raise ValueError(f"delta_prime must be positive, got {delta_prime}")
        self.delta_prime = float(delta_prime)
        self.a = 0.25 * delta_prime
        self.b = 0.5 * delta_prime
        self.plateau = 0.375 * delta_prime

    def _u(self, s):
        return np.clip((np.asarray(s, dtype=float) - self.a) / (self.b - self.a), 0.0, 1.0)

    def __call__(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        u = self._u(s)
        blend = self.a + (self.b - self.a) * (u - 2.5 * u**4 + 3.0 * u**5 - u**6)
        return np.where(s <= self.a, s, blend)

    def derivative(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        u = self._u(s)
        return np.where(s <= self.a, 1.0, 1.0 - (10.0 * u**3 - 15.0 * u**4 + 6.0 * u**5))


def shell_level(domain: LevelSetDomain, delta: float, n: int = 400) -> float:
    """delta' = min |xi| over the sampled shell {x : d(x, boundary) = delta}."""
    pts = sample_boundary(domain, n)
    shell = pts - delta * outward_normal(domain, pts)
    return float(np.min(np.abs(domain.xi(shell))))


@dataclass
class KineticWeight:
    """
    Weight parameters and evaluation.

    Attributes:
        domain, field: geometry and external field
        delta: collar width (defaults to the domain collar)
        delta_prime: level threshold (sampled from the shell when omitted)
    """
    domain: LevelSetDomain
    field: FieldSpec
    delta: Optional[float] = None
    delta_prime: Optional[float] = None
    cutoff: Cutoff = dc_field(init=False)

    def __post_init__(self):
        if self.delta is None:
            self.delta = self.domain.collar_width
        if not 0.0 < self.delta <= self.domain.collar_width:
            raise ValueError(f"delta must lie in (0, {self.domain.collar_width:.4g}], got {self.delta}")
        if self.delta_prime is None:
            self.delta_prime = shell_level(self.domain, self.delta)
        self.cutoff = Cutoff(self.delta_prime)
        logger.debug("weight: delta=%.4g delta'=%.4g plateau=%.4g",
                     self.delta, self.delta_prime, self.plateau)

    @property
    def plateau(self) -> float:
        return self.cutoff.plateau

    def describe(self) -> Dict:
        return {'delta': self.delta, 'delta_prime': self.delta_prime, 'plateau': self.plateau}

    # -- beta -----------------------------------------------------------------

    def _projection(self, x):
        proj = nearest_boundary_point(self.domain, x, strict=False)
        return proj, proj.distance < self.delta

    def beta_squared(self, t: float, x, v, projection=None) -> np.ndarray:
        """
        beta^2 at (t, x) for one or many velocities v (shape (3,) or (N, 3)).

        Raises:
            OutsideCollar: x deeper than delta
            NegativeRadicand: radicand below -1e-14
        """
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        if projection is None:
            projection, inside = self._projection(x)
            if not inside:
                raise OutsideCollar(f"d(x)={projection.distance:.4g} >= delta={self.delta:.4g}",
                                    candidate=projection.xbar, distance=projection.distance)
        xbar = projection.xbar
        xi = float(self.domain.xi(x))
        g = self.domain.grad(x)
        H = self.domain.hess(x)
        e_dot_n = float(np.dot(self.field.value(t, xbar), self.domain.grad(xbar)))
        vg = v @ g
        vHv = np.einsum('...i,ij,...j->...', v, H, v)
        rad = vg**2 + xi**2 - 2.0 * vHv * xi - 2.0 * e_dot_n * xi
        if np.any(rad < RADICAND_FLOOR):
            raise NegativeRadicand(
                f"beta^2 = {float(np.min(rad)):.3e} < 0 at x={x.tolist()}: sign condition or convexity fails")
        return np.maximum(rad, 0.0)

    def beta(self, t: float, x, v) -> np.ndarray:
        return np.sqrt(self.beta_squared(t, x, v))

    # -- alpha ----------------------------------------------------------------

    def alpha_velocities(self, t: float, x, v) -> np.ndarray:
        """alpha at one point x for many velocities."""
        proj, inside = self._projection(x)
        v = np.asarray(v, dtype=float)
        if not inside:
            return np.full(v.shape[:-1], self.plateau)
        return self.cutoff(np.sqrt(self.beta_squared(t, x, v, projection=proj)))

    def alpha(self, t: float, x, v) -> float:
        return float(self.alpha_velocities(t, x, v))

    # -- transport derivative ---------------------------------------------------

    def transport_derivative_beta2(self, t: float, x, v) -> float:
        """
        {d_t + v.grad_x + E.grad_v} beta^2 in closed form.

        With a = v.grad xi(x), Phi = E(t, xbar).grad xi(xbar):
            2a(vHv + E.g) + 2 xi a
            - 2[a vHv + xi (T[v,v,v] + 2 E.Hv)]
            - 2[a Phi + xi (d_t E(xbar).g(xbar) + grad_y Phi . (Dxbar v))]
        """
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        proj, inside = self._projection(x)
        if not inside:
            raise OutsideCollar(f"d(x)={proj.distance:.4g} >= delta={self.delta:.4g}",
                                candidate=proj.xbar, distance=proj.distance)
        dom = self.domain
        xi = float(dom.xi(x))
        g = dom.grad(x)
        H = dom.hess(x)
        T = dom.third(x)
        E = self.field.value(t, x)
        a = float(v @ g)
        vHv = float(v @ H @ v)
        tvvv = 0.0 if T is None else float(np.einsum('ijk,i,j,k->', T, v, v, v))

        xbar = proj.xbar
        gb = dom.grad(xbar)
        Eb, Gb, Db = self.field.evaluate(t, xbar)
        phi = float(Eb @ gb)
        grad_phi = Gb.T @ gb + dom.hess(xbar) @ Eb
        dxbar = nearest_point_jacobian(dom, x, projection=proj)

        return (2.0 * a * (vHv + float(E @ g)) + 2.0 * xi * a
                - 2.0 * (a * vHv + xi * (tvvv + 2.0 * float(E @ H @ v)))
                - 2.0 * (a * phi + xi * (float(Db @ gb) + float(grad_phi @ (dxbar @ v)))))

    def transport_derivative_fd(self, t: float, x, v, h: float = 1e-4) -> float:
        """Central difference of beta^2 along the free RK4 flow."""
        xp, vp = rk4_step(self.field, t, x, v, h)
        xm, vm = rk4_step(self.field, t, x, v, -h)
        bp = float(self.beta_squared(t + h, xp, vp))
        bm = float(self.beta_squared(t - h, xm, vm))
        return (bp - bm) / (2.0 * h)

    # -- seam and cutoff diagnostics ---------------------------------------------

    def cutoff_slope_max(self, n: int = 4001) -> float:
        s = np.linspace(0.0, self.delta_prime, n)
        return float(np.max(self.cutoff.derivative(s)))

    def seam_lipschitz(self, t: float = 0.0, n_points: int = 64, offset: float = 1e-3,
                       seed: int = 0) -> float:
        """
        max |alpha(x) - alpha(x')| / |x - x'| over pairs straddling d = delta.
        """
        rng = np.random.default_rng(seed)
        pts = sample_boundary(self.domain, n_points)
        normals = outward_normal(self.domain, pts)
        worst = 0.0
        for p, n in zip(pts, normals):
            v = rng.standard_normal(3)
            inner = p - (self.delta + offset) * n
            outer = p - (self.delta - offset) * n
            diff = abs(self.alpha(t, inner, v) - self.alpha(t, outer, v))
            worst = max(worst, diff / (2.0 * offset))
        return worst


# ---------------------------------------------------------------------------
# Velocity lemma
# ---------------------------------------------------------------------------

@dataclass
class VelocityLemmaResult:
    max_violation: float
    passed: bool
    table: pd.DataFrame

    def to_dict(self) -> Dict:
        return {'max_violation': self.max_violation, 'passed': self.passed,
                'n_samples': len(self.table)}


def _alpha_along(weight: KineticWeight, trajectory: pd.DataFrame) -> np.ndarray:
    X = trajectory[['x1', 'x2', 'x3']].to_numpy()
    V = trajectory[['v1', 'v2', 'v3']].to_numpy()
    s = trajectory['s'].to_numpy()
    return np.array([weight.alpha(si, xi, vi) for si, xi, vi in zip(s, X, V)])


def velocity_lemma_check(weight: KineticWeight, trajectory: pd.DataFrame, C: float,
                         tol: float = 1e-9) -> VelocityLemmaResult:
    """
    Check the sandwich inequality from the first stored sample to every later one.

    Args:
        trajectory: table from sample_trajectory (columns s, x1..x3, v1..v3)
        C: rate constant

    Returns:
        VelocityLemmaResult with per-sample bounds (tau, alpha, bound_low, bound_high)
    """
    alpha = _alpha_along(weight, trajectory)
    s = trajectory['s'].to_numpy()
    speed = np.linalg.norm(trajectory[['v1', 'v2', 'v3']].to_numpy(), axis=-1)
    integral = np.abs(cumulative_trapezoid(speed + 1.0, s, initial=0.0))
    low = alpha[0] * np.exp(-C * integral)
    high = alpha[0] * np.exp(C * integral)
    log_gap = np.abs(np.log(alpha) - np.log(alpha[0])) - C * integral
    max_violation = float(np.max(log_gap))
    table = pd.DataFrame({'tau': s, 'alpha': alpha, 'bound_low': low, 'bound_high': high})
    return VelocityLemmaResult(max_violation=max_violation, passed=max_violation <= tol, table=table)


def log_alpha_rates(weight: KineticWeight, trajectory: pd.DataFrame) -> np.ndarray:
    """
    |d/dtau log alpha| / (|V| + 1) at each sample, from the closed-form
    transport derivative. Samples outside the blend region contribute 0.
    """
    out = np.zeros(len(trajectory))
    X = trajectory[['x1', 'x2', 'x3']].to_numpy()
    V = trajectory[['v1', 'v2', 'v3']].to_numpy()
    s = trajectory['s'].to_numpy()
    chi = weight.cutoff
    for k in range(len(trajectory)):
        proj = nearest_boundary_point(weight.domain, X[k], strict=False)
        if proj.distance >= weight.delta:
            continue
        b = float(np.sqrt(weight.beta_squared(s[k], X[k], V[k], projection=proj)))
        if b < 1e-12 or b >= chi.b:
            continue
        d = weight.transport_derivative_beta2(s[k], X[k], V[k])
        rate = abs(float(chi.derivative(b)) * d / (2.0 * b * float(chi(b))))
        out[k] = rate / (np.linalg.norm(V[k]) + 1.0)
    return out


@dataclass
class VelocityLemmaFit:
    rate: float
    alpha2_rate: float
    margin: float
    n_trajectories: int
    n_samples: int

    def to_dict(self) -> Dict:
        return dict(self.__dict__)


def fit_velocity_lemma_rate(weight: KineticWeight, trajectories: Sequence[pd.DataFrame],
                            margin: float = 0.05) -> VelocityLemmaFit:
    """C = (1 + margin) * max sampled rate; the alpha^2-level rate is 2C."""
    rates = [log_alpha_rates(weight, tr) for tr in trajectories]
    peak = max((float(np.max(r)) for r in rates if len(r)), default=0.0)
    C = peak * (1.0 + margin)
    logger.info("velocity lemma: fitted C = %.6g (alpha^2 rate %.6g)", C, 2.0 * C)
    return VelocityLemmaFit(rate=C, alpha2_rate=2.0 * C, margin=margin,
                            n_trajectories=len(trajectories), n_samples=sum(len(r) for r in rates))


def near_boundary_trajectories(weight: KineticWeight, rng: np.random.Generator, n: int,
                               t: float = 1.0, duration: float = 0.5,
                               settings: Optional[IntegratorSettings] = None,
                               progress: bool = False,
                               grazing_fraction: float = 0.5) -> List[pd.DataFrame]:
    """
    Backward trajectories from random collar starts.

    Generic starts are boundary samples pushed inward by a depth uniform in
    (0, delta/2) with standard normal velocities. A grazing_fraction of the
    starts sits in the thin layer where alpha is below its plateau: depth
    log-uniform in (1e-4, 10^-1.5) delta' and a normal velocity component of at
    most plateau / |grad xi|. Each path runs to t - duration or its exit.
    """
    dom = weight.domain
    pts = sample_boundary(dom, max(n, 8))
    normals = outward_normal(dom, pts)
    slopes = np.linalg.norm(dom.grad(pts), axis=-1)
    out = []
    for k in tqdm(range(n), disable=not progress, desc="trajectories"):
        j = rng.integers(len(pts))
        v = rng.standard_normal(3)
        if rng.uniform() < grazing_fraction:
            depth = weight.delta_prime * 10.0 ** rng.uniform(-4.0, -1.5) / slopes[j]
            vn = rng.uniform(-1.0, 1.0) * weight.plateau / slopes[j]
            v = v - (v @ normals[j]) * normals[j] + vn * normals[j]
        else:
            depth = rng.uniform(0.0, 0.5 * weight.delta)
        x = pts[j] - max(depth, 1e-9 * weight.delta) * normals[j]
        try:
            traj = sample_trajectory(dom, weight.field, PhaseState(t, x, v), t - duration, settings)
        except GrazingAmbiguous:
            logger.debug("skipping touching start at %s", x.tolist())
            continue
        if len(traj) > 2:
            out.append(traj)
    return out


def velocity_lemma_sweep(weight: KineticWeight, trajectories: Sequence[pd.DataFrame],
                         C: float) -> pd.DataFrame:
    """One row per trajectory: max violation and pass flag at rate C."""
    rows = []
    for k, tr in enumerate(trajectories):
        res = velocity_lemma_check(weight, tr, C)
        rows.append({'trajectory': k, 'n_samples': len(tr), 'max_violation': res.max_violation,
                     'passed': res.passed})
    df = pd.DataFrame(rows)
    if len(df):
        logger.info("velocity lemma at C=%.4g: %d/%d pass", C, int(df['passed'].sum()), len(df))
    return df
