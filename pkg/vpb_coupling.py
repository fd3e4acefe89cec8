"""
VPB Coupling Module

Neumann Poisson solve for the self-generated potential, the composite field
E = grad(phi_F + phi_E), the Vlasov-Poisson-Boltzmann Picard loop built on the
transport solver, and potential diagnostics.

    -Laplace phi_F = rho - rho0 in Omega,   d phi_F/dn = 0 on the wall,
    rho(t, x) = int sqrt(mu) f dv,           zero-mean gauge.

Grids:
- BallPoissonGrid: finite volumes in (r, cos theta, phi); the wall and the
  poles carry zero flux exactly.
- BoxPoissonGrid: cell-centered box cells inside a general convex domain,
  zero flux across staircase faces.
"""

import logging
from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from numpy.polynomial import hermite_e
from scipy import sparse
from scipy.interpolate import LinearNDInterpolator, NearestNDInterpolator
from scipy.sparse.linalg import LinearOperator, cg
from tqdm import tqdm

from collision import CollisionKernel, sqrt_maxwellian
from domain_geometry import Ball, LevelSetDomain, outward_normal, sample_boundary, volume_rule
from errors import CompatibilityViolation, SolverDiverged
from external_field import FieldSpec, check_sign_condition
from kinematic_weight import KineticWeight
from transport_solver import (BoxGrid, CollisionTables, GridField, HermiteBasis, SolverConfig,
                              collision_tables, initial_weighted_sup, picard_step, weighted_sup)

logger = logging.getLogger(__name__)


@dataclass
class VPBConfig:
    """
    Attributes:
        n_r, n_c, n_phi: ball grid cells in r, cos(theta), phi
        box_cells: cells per axis of the box grid (non-ball domains)
        degree: total degree of the polynomial fit of phi_F
        compat_tol: admissible |int (rho - rho0)| relative to |Omega| (1 + max|rho|)
        drift_tol: admissible drift projected out during the loop
        cg_rtol: conjugate-gradient relative tolerance
        holder_exponent: exponent of the C^{1, gamma} seminorm proxy
        neumann_tol: admissible |d phi_F/dn| at the wall in units of h max|rho - rho0|
        alpha_tol: admissible change of alpha when grad phi_F is added to the field
    """
    n_r: int = 10
    n_c: int = 6
    n_phi: int = 8
    box_cells: int = 10
    degree: int = 6
    compat_tol: float = 1e-8
    drift_tol: float = 1e-2
    cg_rtol: float = 1e-10
    holder_exponent: float = 0.5
    neumann_tol: float = 2.0
    alpha_tol: float = 1e-2

    def to_dict(self) -> Dict:
        return dict(self.__dict__)


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------

class PoissonGrid:
    """Finite-volume cells: centers, volumes and the flux matrix K ~ -int Laplace."""

    centers: np.ndarray
    volumes: np.ndarray
    stiffness: sparse.csr_matrix
    spacing: float

    @property
    def size(self) -> int:
        return len(self.volumes)

    @property
    def total_volume(self) -> float:
        return float(np.sum(self.volumes))

    def cell_integrals(self, func: Callable) -> np.ndarray:
        raise NotImplementedError


def _assemble(n: int, rows: List[np.ndarray], cols: List[np.ndarray], coef: List[np.ndarray]) -> sparse.csr_matrix:
    i = np.concatenate(rows)
    j = np.concatenate(cols)
    a = np.concatenate(coef)
    off = sparse.coo_matrix((-a, (i, j)), shape=(n, n))
    off = off + off.T
    diag = -np.asarray(off.sum(axis=1)).ravel()
    return (off + sparse.diags(diag)).tocsr()


class BallPoissonGrid(PoissonGrid):
    """Cells in (r, c = cos theta, phi) over a ball."""

    def __init__(self, domain: Ball, n_r: int = 10, n_c: int = 6, n_phi: int = 8):
        self.domain = domain
        R = domain.radius
        self.shape = (n_r, n_c, n_phi)
        self.r_edges = np.linspace(0.0, R, n_r + 1)
        self.c_edges = np.linspace(-1.0, 1.0, n_c + 1)
        self.p_edges = np.linspace(0.0, 2.0 * np.pi, n_phi + 1)
        rc = 0.5 * (self.r_edges[1:] + self.r_edges[:-1])
        cc = 0.5 * (self.c_edges[1:] + self.c_edges[:-1])
        pc = 0.5 * (self.p_edges[1:] + self.p_edges[:-1])
        dr, dc, dp = R / n_r, 2.0 / n_c, 2.0 * np.pi / n_phi
        self.spacing = dr
        Rg, Cg, Pg = np.meshgrid(rc, cc, pc, indexing='ij')
        self.centers = domain.center + self._cartesian(Rg, Cg, Pg).reshape(-1, 3)
        shell = (self.r_edges[1:] ** 3 - self.r_edges[:-1] ** 3) / 3.0
        self.volumes = np.broadcast_to(shell[:, None, None] * dc * dp, self.shape).ravel().copy()

        index = np.arange(np.prod(self.shape)).reshape(self.shape)
        rows, cols, coef = [], [], []
        # radial faces (interior only; r = 0 has zero area, r = R is the wall)
        rf = self.r_edges[1:-1]
        a = np.broadcast_to((rf**2 * dc * dp / dr)[:, None, None], (n_r - 1, n_c, n_phi))
        rows.append(index[:-1].ravel()); cols.append(index[1:].ravel()); coef.append(a.ravel())
        # polar faces (1 - c^2 vanishes at the poles)
        cf = self.c_edges[1:-1]
        a = np.broadcast_to((dr * dp * (1.0 - cf**2) / dc)[None, :, None], (n_r, n_c - 1, n_phi))
        rows.append(index[:, :-1].ravel()); cols.append(index[:, 1:].ravel()); coef.append(a.ravel())
        # azimuthal faces, periodic
        a = np.broadcast_to((dr * dc / (1.0 - cc**2) / dp)[None, :, None], (n_r, n_c, n_phi))
        rows.append(index.ravel()); cols.append(np.roll(index, -1, axis=2).ravel()); coef.append(a.ravel())
        self.stiffness = _assemble(index.size, rows, cols, coef)

    @staticmethod
    def _cartesian(r, c, p):
        s = np.sqrt(np.clip(1.0 - c**2, 0.0, None))
        return np.stack([r * s * np.cos(p), r * s * np.sin(p), r * c], axis=-1)

    def cell_integrals(self, func: Callable, order: int = 3) -> np.ndarray:
        """Gauss-Legendre integrals of func over every cell."""
        x, w = np.polynomial.legendre.leggauss(order)
        out = np.zeros(self.shape)
        r0, r1 = self.r_edges[:-1], self.r_edges[1:]
        c0, c1 = self.c_edges[:-1], self.c_edges[1:]
        p0, p1 = self.p_edges[:-1], self.p_edges[1:]
        for xi, wi in zip(x, w):
            r = 0.5 * (r0 + r1) + 0.5 * (r1 - r0) * xi
            for xj, wj in zip(x, w):
                c = 0.5 * (c0 + c1) + 0.5 * (c1 - c0) * xj
                for xk, wk in zip(x, w):
                    p = 0.5 * (p0 + p1) + 0.5 * (p1 - p0) * xk
                    Rg, Cg, Pg = np.meshgrid(r, c, p, indexing='ij')
                    pts = self.domain.center + self._cartesian(Rg, Cg, Pg)
                    jac = (Rg**2 * np.outer(0.5 * (r1 - r0), 0.5 * (c1 - c0))[..., None]
                           * (0.5 * (p1 - p0))[None, None, :])
                    out += wi * wj * wk * jac * func(pts)
        return out.ravel()


class BoxPoissonGrid(PoissonGrid):
    """Cell-centered cubes whose centers lie inside a convex domain."""

    def __init__(self, domain: LevelSetDomain, n: int = 10):
        self.domain = domain
        pts = sample_boundary(domain, 256)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        self.h = float(np.max(hi - lo)) / n
        self.spacing = self.h
        counts = np.ceil((hi - lo) / self.h).astype(int)
        axes = [lo[k] + self.h * (np.arange(counts[k]) + 0.5) for k in range(3)]
        G = np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1)
        active = domain.xi(G) < 0.0
        index = -np.ones(active.shape, dtype=int)
        index[active] = np.arange(int(active.sum()))
        self.centers = G[active]
        self.volumes = np.full(len(self.centers), self.h**3)
        rows, cols, coef = [], [], []
        for axis in range(3):
            a = np.take(index, np.arange(active.shape[axis] - 1), axis=axis)
            b = np.take(index, np.arange(1, active.shape[axis]), axis=axis)
            both = (a >= 0) & (b >= 0)
            rows.append(a[both]); cols.append(b[both]); coef.append(np.full(int(both.sum()), self.h))
        self.stiffness = _assemble(len(self.centers), rows, cols, coef)

    def cell_integrals(self, func: Callable, order: int = 2) -> np.ndarray:
        x, w = np.polynomial.legendre.leggauss(order)
        out = np.zeros(len(self.centers))
        half = 0.5 * self.h
        for a, wa in zip(x, w):
            for b, wb in zip(x, w):
                for c, wc in zip(x, w):
                    out += wa * wb * wc * func(self.centers + half * np.array([a, b, c]))
        return out * half**3


def poisson_grid(domain: LevelSetDomain, config: Optional[VPBConfig] = None) -> PoissonGrid:
    config = config or VPBConfig()
    if isinstance(domain, Ball):
        return BallPoissonGrid(domain, config.n_r, config.n_c, config.n_phi)
    return BoxPoissonGrid(domain, config.box_cells)


# ---------------------------------------------------------------------------
# Poisson solve
# ---------------------------------------------------------------------------

@dataclass
class PoissonProblem:
    """
    Attributes:
        grid: finite-volume grid
        source: cell integrals of rho
        rho0: neutralizing constant (None: the mean of rho)
    """
    grid: PoissonGrid
    source: np.ndarray
    rho0: Optional[float] = None

    def __post_init__(self):
        if self.rho0 is None:
            self.rho0 = float(np.sum(self.source) / self.grid.total_volume)

    @property
    def imbalance(self) -> float:
        """int (rho - rho0) dx."""
        return float(np.sum(self.source) - self.rho0 * self.grid.total_volume)


def density_problem(grid: PoissonGrid, rho: Callable, rho0: Optional[float] = None) -> PoissonProblem:
    return PoissonProblem(grid=grid, source=grid.cell_integrals(rho), rho0=rho0)


@dataclass
class PotentialSolution:
    grid: PoissonGrid
    values: np.ndarray
    residual: float
    iterations: int
    projected: float = 0.0
    contrast: float = 0.0

    def mean(self) -> float:
        return float(np.sum(self.values * self.grid.volumes) / self.grid.total_volume)

    def fit(self, degree: int = 6) -> 'PolynomialPotential':
        return PolynomialPotential.fit(self.grid.centers, self.values, self.grid.volumes, degree,
                                       center=self.grid.domain.center, scale=self.grid.domain.scale)


def solve_neumann_poisson(problem: PoissonProblem, config: Optional[VPBConfig] = None,
                          x0: Optional[np.ndarray] = None, project: bool = False) -> PotentialSolution:
    """
    -Laplace phi = rho - rho0 with homogeneous Neumann data, zero-mean gauge.

    Args:
        project: remove an imbalance up to config.drift_tol (logged) instead of raising

    Raises:
        CompatibilityViolation: |int (rho - rho0)| above tolerance
        SolverDiverged: conjugate gradients fail or leave a large residual
    """
    config = config or VPBConfig()
    grid = problem.grid
    volume = grid.total_volume
    b = problem.source - problem.rho0 * grid.volumes
    scale = volume * (1.0 + float(np.max(np.abs(problem.source / grid.volumes))))
    imbalance = float(np.sum(b))
    limit = (config.drift_tol if project else config.compat_tol) * scale
    if abs(imbalance) > limit:
        raise CompatibilityViolation(
            f"int (rho - rho0) = {imbalance:.4g} exceeds {limit:.3g} (|Omega| = {volume:.4g})")
    projected = imbalance / volume
    if project and abs(imbalance) > config.compat_tol * scale:
        logger.warning("projected out density drift %.3e", projected)
    b = b - projected * grid.volumes
    contrast = float(np.max(np.abs(b / grid.volumes)))

    if np.max(np.abs(b), initial=0.0) <= 1e-13 * scale:
        return PotentialSolution(grid=grid, values=np.zeros(grid.size), residual=0.0, iterations=0,
                                 projected=projected, contrast=contrast)

    K = grid.stiffness
    inv_diag = 1.0 / K.diagonal()
    M = LinearOperator(K.shape, matvec=lambda r: inv_diag * r, dtype=float)
    counter = {'n': 0}

    def tick(_):
        counter['n'] += 1
    phi, info = cg(K, b, x0=x0, rtol=config.cg_rtol, atol=0.0, M=M, maxiter=20 * grid.size,
                   callback=tick)
    if info != 0:
        raise SolverDiverged(f"conjugate gradients stopped with info={info}")
    phi = phi - np.sum(phi * grid.volumes) / volume
    residual = float(np.linalg.norm(K @ phi - b) / max(np.linalg.norm(b), 1e-300))
    if residual > 1e3 * config.cg_rtol:
        raise SolverDiverged(f"relative residual {residual:.3e} after {counter['n']} iterations")
    logger.debug("poisson: %d cells, %d iterations, residual %.2e", grid.size, counter['n'], residual)
    return PotentialSolution(grid=grid, values=phi, residual=residual, iterations=counter['n'],
                             projected=projected, contrast=contrast)


# ---------------------------------------------------------------------------
# Potentials
# ---------------------------------------------------------------------------

class ExternalPotential:
    """Base class for phi_E; the field is its gradient."""

    name = "potential"

    def value(self, x) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, x) -> np.ndarray:
        raise NotImplementedError

    def hessian(self, x) -> np.ndarray:
        raise NotImplementedError


class RadialPotential(ExternalPotential):
    """phi_E = (c/2)|x - x0|^2, so E = c (x - x0)."""

    name = "radial"

    def __init__(self, strength: float = 1.0, center=(0.0, 0.0, 0.0)):
        self.strength = float(strength)
        self.center = np.asarray(center, dtype=float)

    def value(self, x):
        y = np.asarray(x, dtype=float) - self.center
        return 0.5 * self.strength * np.sum(y * y, axis=-1)

    def gradient(self, x):
        return self.strength * (np.asarray(x, dtype=float) - self.center)

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.strength * np.eye(3), x.shape[:-1] + (3, 3)).copy()


class ZeroPotential(ExternalPotential):
    name = "zero"

    def value(self, x):
        return np.zeros(np.shape(x)[:-1])

    def gradient(self, x):
        return np.zeros(np.shape(x))

    def hessian(self, x):
        return np.zeros(np.shape(x) + (3,))


def _exponents(degree: int) -> np.ndarray:
    out = [(0, 0, 0)]
    for d in range(1, degree + 1):
        for combo in combinations_with_replacement(range(3), d):
            out.append(tuple(int(combo.count(k)) for k in range(3)))
    return np.array(out)


class PolynomialPotential(ExternalPotential):
    """sum_k c_k prod_i ((x_i - x0_i)/s)^{e_ki}, fitted by weighted least squares."""

    name = "polynomial"

    def __init__(self, coeffs: np.ndarray, exponents: np.ndarray, center, scale: float):
        self.coeffs = np.asarray(coeffs, dtype=float)
        self.exponents = exponents
        self.center = np.asarray(center, dtype=float)
        self.scale = float(scale)

    @classmethod
    def fit(cls, points, values, weights, degree: int, center, scale: float) -> 'PolynomialPotential':
        exps = _exponents(degree)
        y = (np.asarray(points) - center) / scale
        A = np.prod(y[:, None, :] ** exps[None, :, :], axis=-1)
        sw = np.sqrt(np.asarray(weights))
        coeffs, *_ = np.linalg.lstsq(A * sw[:, None], np.asarray(values) * sw, rcond=None)
        return cls(coeffs, exps, center, scale)

    @classmethod
    def zero(cls) -> 'PolynomialPotential':
        return cls(np.zeros(1), np.zeros((1, 3), dtype=int), np.zeros(3), 1.0)

    def _powers(self, y, shift):
        e = self.exponents - shift
        ok = np.all(e >= 0, axis=-1)
        e = np.maximum(e, 0)
        return np.prod(y[..., None, :] ** e, axis=-1) * ok

    def value(self, x):
        y = (np.asarray(x, dtype=float) - self.center) / self.scale
        return self._powers(y, np.zeros(3, dtype=int)) @ self.coeffs

    def gradient(self, x):
        y = (np.asarray(x, dtype=float) - self.center) / self.scale
        out = []
        for i in range(3):
            shift = np.eye(3, dtype=int)[i]
            out.append(self._powers(y, shift) @ (self.coeffs * self.exponents[:, i]))
        return np.stack(out, axis=-1) / self.scale

    def hessian(self, x):
        y = (np.asarray(x, dtype=float) - self.center) / self.scale
        out = np.empty(y.shape + (3,))
        for i in range(3):
            for j in range(3):
                shift = np.eye(3, dtype=int)[i] + np.eye(3, dtype=int)[j]
                e = self.exponents
                factor = e[:, i] * (e[:, j] - (1 if i == j else 0))
                out[..., i, j] = self._powers(y, shift) @ (self.coeffs * factor)
        return out / self.scale**2


class PotentialField(FieldSpec):
    """
    E(t, x) = grad(phi_F(t) + phi_E)(x) with phi_F piecewise linear in t
    between the solve times (constant outside).
    """

    def __init__(self, times: Sequence[float], self_potentials: Sequence[ExternalPotential],
                 external: ExternalPotential):
        super().__init__(name="potential", description="E = grad(phi_F + phi_E)")
        self.times = np.asarray(times, dtype=float)
        self.self_potentials = list(self_potentials)
        self.external = external

    def default_params(self) -> Dict:
        return {'times': self.times.tolist(), 'external': self.external.name}

    def _weights(self, t, shape):
        t = np.broadcast_to(np.asarray(t, dtype=float), shape)
        n = len(self.times)
        w = np.zeros(shape + (n,))
        dw = np.zeros(shape + (n,))
        if n == 1:
            w[..., 0] = 1.0
            return w, dw
        tc = np.clip(t, self.times[0], self.times[-1])
        k = np.clip(np.searchsorted(self.times, tc, side='right') - 1, 0, n - 2)
        span = self.times[k + 1] - self.times[k]
        lam = (tc - self.times[k]) / span
        inside = (t >= self.times[0]) & (t <= self.times[-1])
        np.put_along_axis(w, k[..., None], (1.0 - lam)[..., None], axis=-1)
        np.put_along_axis(w, (k + 1)[..., None], lam[..., None], axis=-1)
        np.put_along_axis(dw, k[..., None], np.where(inside, -1.0 / span, 0.0)[..., None], axis=-1)
        np.put_along_axis(dw, (k + 1)[..., None], np.where(inside, 1.0 / span, 0.0)[..., None], axis=-1)
        return w, dw

    def evaluate(self, t, x):
        x = np.asarray(x, dtype=float)
        w, dw = self._weights(t, x.shape[:-1])
        E = self.external.gradient(x)
        G = self.external.hessian(x)
        dt = np.zeros_like(x)
        for j, phi in enumerate(self.self_potentials):
            g = phi.gradient(x)
            E = E + w[..., j, None] * g
            G = G + w[..., j, None, None] * phi.hessian(x)
            dt = dt + dw[..., j, None] * g
        return E, G, dt

    def value(self, t, x):
        x = np.asarray(x, dtype=float)
        w, _ = self._weights(t, x.shape[:-1])
        E = self.external.gradient(x)
        for j, phi in enumerate(self.self_potentials):
            E = E + w[..., j, None] * phi.gradient(x)
        return E


class ExternalPotentialField(PotentialField):
    """E = grad phi_E alone."""

    def __init__(self, external: ExternalPotential):
        super().__init__([0.0], [PolynomialPotential.zero()], external)


# ---------------------------------------------------------------------------
# Densities and the VPB loop
# ---------------------------------------------------------------------------

def mass_weights(basis: HermiteBasis) -> np.ndarray:
    """int mu(v) L_a(v) dv for every cardinal function (Gauss-Hermite weights)."""
    _, w = hermite_e.hermegauss(basis.n)
    w = w / np.sqrt(2.0 * np.pi)
    return np.einsum('i,j,k->ijk', w, w, w).ravel()


def grid_density(f: GridField, t: float) -> Callable:
    """x -> rho(t, x) = int sqrt(mu) f dv for a grid field."""
    m = mass_weights(f.basis)

    def rho(x):
        x = np.asarray(x, dtype=float)
        return f.coefficients(np.full(x.shape[:-1], t), x) @ m
    return rho


@dataclass
class VPBStep:
    m: int
    field: PotentialField
    solutions: List[PotentialSolution]
    f_next: GridField

    @property
    def max_projected(self) -> float:
        return float(max(abs(s.projected) for s in self.solutions))


def solve_self_potential(f: GridField, grid: PoissonGrid, rho0: float,
                         config: Optional[VPBConfig] = None) -> Tuple[List[PotentialSolution], List[PolynomialPotential]]:
    """Poisson solves from the density of f at each of its time nodes."""
    config = config or VPBConfig()
    solutions, potentials = [], []
    for t in f.times:
        problem = density_problem(grid, grid_density(f, t), rho0=rho0)
        sol = solve_neumann_poisson(problem, config, project=True)
        solutions.append(sol)
        potentials.append(sol.fit(config.degree) if np.any(sol.values) else PolynomialPotential.zero())
    return solutions, potentials


def vpb_picard_step(config: SolverConfig, domain: LevelSetDomain, f_m: GridField,
                    phi_E: ExternalPotential, f0: Callable, wall_source: GridField,
                    tables: CollisionTables, grid: PoissonGrid, rho0: float, m: int = 0,
                    vpb: Optional[VPBConfig] = None, settings=None) -> VPBStep:
    """
    phi_F^m from the density of f^m, then one transport Picard level with
    E = grad(phi_F^m + phi_E).
    """
    vpb = vpb or VPBConfig()
    solutions, potentials = solve_self_potential(f_m, grid, rho0, vpb)
    field = PotentialField(f_m.times, potentials, phi_E)
    f_next = picard_step(config, domain, field, f0, f_m, wall_source, tables, settings)
    return VPBStep(m=m, field=field, solutions=solutions, f_next=f_next)


@dataclass
class VPBResult:
    steps: List[VPBStep]
    diagnostics: pd.DataFrame
    rho0: float

    def to_dict(self) -> Dict:
        return {'rho0': self.rho0, 'diagnostics': self.diagnostics.to_dict(orient='list')}


def run_vpb(config: SolverConfig, domain: LevelSetDomain, phi_E: ExternalPotential, f0: Callable,
            steps: int, vpb: Optional[VPBConfig] = None, kernel: Optional[CollisionKernel] = None,
            settings=None, progress: bool = False) -> VPBResult:
    """
    VPB Picard loop started from f^0 = f0 (constant in t), so the density drift
    starts at zero; rho0 is the mean initial density.

    Raises:
        CompatibilityViolation: density drift beyond vpb.drift_tol
    """
    vpb = vpb or VPBConfig()
    sign = check_sign_condition(domain, ExternalPotentialField(phi_E))
    if not sign.passed:
        logger.warning("external potential fails the sign condition (C_E = %.4g)", sign.c_e_lower)
    grid = poisson_grid(domain, vpb)
    box = BoxGrid.for_domain(domain, config.n_spatial)
    basis = HermiteBasis(config.n_velocity)
    tables = collision_tables(kernel or config.collision_kernel(), basis)
    times = config.times
    f_init = GridField.from_function(lambda t, x, v: f0(x, v), times, box, basis, f0, name="f0")
    rho0 = float(np.sum(grid.cell_integrals(grid_density(f_init, 0.0))) / grid.total_volume)
    current = f_init
    bound0 = initial_weighted_sup(config, domain, f0)
    out, rows = [], []
    for m in tqdm(range(steps), desc="vpb", disable=not progress):
        step = vpb_picard_step(config, domain, current, phi_E, f0, current, tables, grid, rho0, m, vpb, settings)
        diag = potential_diagnostics(step.solutions[-1].fit(vpb.degree) if np.any(step.solutions[-1].values)
                                     else PolynomialPotential.zero(), domain, vpb.holder_exponent)
        rows.append({'m': m, 'weighted_sup': weighted_sup(config, step.f_next),
                     'bound_ratio': weighted_sup(config, step.f_next) / bound0,
                     'grad_sup': diag.grad_sup, 'hessian_sup': diag.hessian_sup,
                     'holder_seminorm': diag.holder_seminorm, 'projected': step.max_projected,
                     'neumann_defect': max(grid_neumann_defect(s) for s in step.solutions),
                     'neumann_tol': max(neumann_tolerance(s, vpb) for s in step.solutions),
                     'fit_neumann_defect': neumann_defect(step.field, domain)})
        logger.info("vpb m=%d: |grad phi_F| %.3e, |D^2 phi_F| %.3e", m, diag.grad_sup, diag.hessian_sup)
        out.append(step)
        current = step.f_next
    return VPBResult(steps=out, diagnostics=pd.DataFrame(rows), rho0=rho0)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

def holder_quotient(gradient: Callable, points: np.ndarray, exponent: float) -> float:
    """max over point pairs of |grad(x) - grad(y)| / |x - y|^exponent."""
    g = gradient(points)
    best = 0.0
    for k in range(len(points) - 1):
        d = np.linalg.norm(points[k + 1:] - points[k], axis=-1)
        num = np.linalg.norm(g[k + 1:] - g[k], axis=-1)
        ok = d > 1e-9
        if np.any(ok):
            best = max(best, float(np.max(num[ok] / d[ok] ** exponent)))
    return best


def diagnostic_points(domain: LevelSetDomain) -> np.ndarray:
    return np.vstack([volume_rule(domain, 4, 4, 8)[0], sample_boundary(domain, 32)])


def neumann_defect(field: PotentialField, domain: LevelSetDomain, n: int = 64) -> float:
    """max |n . grad phi_F| over wall samples and solve times."""
    pts = sample_boundary(domain, n)
    normals = outward_normal(domain, pts)
    worst = 0.0
    for phi in field.self_potentials:
        worst = max(worst, float(np.max(np.abs(np.sum(phi.gradient(pts) * normals, axis=-1)))))
    return worst


def grid_neumann_defect(solution: PotentialSolution, n: int = 64) -> float:
    """
    max |d phi/dn| at the wall read off the grid values by one-sided quadratic
    extrapolation.

    Ball grids use the three outermost shells of every (c, phi) column; box
    grids interpolate the cell values at depths 1.5h, 2.5h and 3.5h along the
    inward normal of n wall samples.
    """
    grid = solution.grid
    h = grid.spacing
    if isinstance(grid, BallPoissonGrid):
        phi = solution.values.reshape(grid.shape)
        return float(np.max(np.abs(2.0 * phi[-1] - 3.0 * phi[-2] + phi[-3]))) / h
    domain = grid.domain
    pts = sample_boundary(domain, n)
    normals = outward_normal(domain, pts)
    linear = LinearNDInterpolator(grid.centers, solution.values)
    nearest = NearestNDInterpolator(grid.centers, solution.values)
    depths = np.array([1.5, 2.5, 3.5])
    inner = pts[:, None, :] - h * depths[None, :, None] * normals[:, None, :]
    vals = linear(inner.reshape(-1, 3))
    missing = np.isnan(vals)
    if np.any(missing):
        vals[missing] = nearest(inner.reshape(-1, 3)[missing])
    vals = vals.reshape(len(pts), 3)
    # d/ds at s = 0 of the quadratic through s = 1.5, 2.5, 3.5 (s = depth / h); d/dn = -d/ds
    slope = (-3.0 * vals[:, 0] + 5.0 * vals[:, 1] - 2.0 * vals[:, 2]) / h
    return float(np.max(np.abs(slope)))


def neumann_tolerance(solution: PotentialSolution, config: Optional[VPBConfig] = None) -> float:
    """config.neumann_tol * h * max|rho - rho0|, shrinking with the grid spacing."""
    config = config or VPBConfig()
    return config.neumann_tol * solution.grid.spacing * max(solution.contrast, 1e-12)


@dataclass
class PotentialDiagnostics:
    sup_phi: float
    grad_sup: float
    holder_seminorm: float
    hessian_sup: float
    weighted_sup_f: Optional[float] = None
    weighted_alpha_gradient: Optional[float] = None
    lp_factor: Optional[float] = None

    @property
    def c1_gamma_norm(self) -> float:
        return self.sup_phi + self.grad_sup + self.holder_seminorm

    def to_dict(self) -> Dict:
        d = dict(self.__dict__)
        d['c1_gamma_norm'] = self.c1_gamma_norm
        return d


def potential_diagnostics(phi: ExternalPotential, domain: LevelSetDomain, holder_exponent: float = 0.5,
                          f: Optional[GridField] = None, weight: Optional[KineticWeight] = None,
                          config: Optional[SolverConfig] = None, t: float = 0.0,
                          lp_p: Optional[float] = None) -> PotentialDiagnostics:
    """
    Sampled proxies of ||phi_F||_{C^{1,gamma}} and ||D^2 phi_F||_inf, with the
    drivers ||e^{theta|v|^2} f||_inf, ||e^{-varpi<v>t} alpha grad_x f||_inf and
    the L^p factor of the 1/alpha velocity moment when the inputs are given.
    """
    pts = diagnostic_points(domain)
    diag = PotentialDiagnostics(
        sup_phi=float(np.max(np.abs(phi.value(pts)))),
        grad_sup=float(np.max(np.linalg.norm(phi.gradient(pts), axis=-1))),
        holder_seminorm=holder_quotient(phi.gradient, pts, holder_exponent),
        hessian_sup=float(np.max(np.linalg.norm(phi.hessian(pts), ord=2, axis=(-2, -1)))),
    )
    if f is not None and config is not None:
        diag.weighted_sup_f = weighted_sup(config, f, theta=config.theta)
        if weight is not None:
            diag.weighted_alpha_gradient = weighted_alpha_gradient(config, f, weight, t)
    if lp_p is not None and weight is not None:
        from singular_integrals import inv_alpha_Lp_norm
        diag.lp_factor = inv_alpha_Lp_norm(weight, lp_p, t=t, check=False).norm
    return diag


def weighted_alpha_gradient(config: SolverConfig, f: GridField, weight: KineticWeight, t: float,
                            h: float = 1e-3) -> float:
    """max e^{-varpi <v> t} alpha(t, x, v) |grad_x f| over interior grid nodes and velocity nodes."""
    X = f.grid.interior_points
    V = f.basis.nodes
    best = 0.0
    for x in X:
        Xr = np.tile(x, (len(V), 1))
        grad = np.stack([(f(np.full(len(V), t), Xr + h * e, V) - f(np.full(len(V), t), Xr - h * e, V)) / (2 * h)
                         for e in np.eye(3)], axis=-1)
        alpha = weight.alpha_velocities(t, x, V)
        damp = np.exp(-config.varpi * np.sqrt(1.0 + np.sum(V * V, axis=-1)) * t)
        best = max(best, float(np.max(damp * alpha * np.linalg.norm(grad, axis=-1))))
    return best


def alpha_invariance(domain: LevelSetDomain, fields: Sequence[FieldSpec], reference: FieldSpec,
                     t: float = 0.0, n_points: int = 16) -> float:
    """max |alpha_field - alpha_reference| over collar points and velocities."""
    ref = KineticWeight(domain, reference)
    pts = sample_boundary(domain, n_points)
    pts = pts - 0.5 * ref.delta * outward_normal(domain, pts)
    vel = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.3, -0.2, 0.9], [-1.0, 0.5, 0.2]])
    worst = 0.0
    for fld in fields:
        w = KineticWeight(domain, fld, delta=ref.delta, delta_prime=ref.delta_prime)
        for x in pts:
            worst = max(worst, float(np.max(np.abs(w.alpha_velocities(t, x, vel)
                                                   - ref.alpha_velocities(t, x, vel)))))
    return worst
