"""
Domain Geometry Module

Strictly convex domains Omega = {xi < 0} described by a level-set function.

Provides:
- xi, its gradient, Hessian and third derivative (analytic for quadrics,
  finite differences for user callbacks)
- outward normals and deterministic tangent frames
- nearest-boundary projection with its Jacobian
- graph-style boundary charts
- boundary sampling and volume/surface quadrature over star-shaped domains
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy.optimize import brentq

from errors import ChartRadiusTooSmall, DegenerateGradient, OutsideCollar
from quadrature import frame_from_normal, gauss_legendre, sphere_rule

logger = logging.getLogger(__name__)


class LevelSetDomain:
    """
    Base class for level-set domains.

    Subclasses supply xi/grad/hess (vectorized over a trailing axis of 3).

    Attributes:
        name: short identifier
        center: a point well inside the domain (rays from it hit the boundary once)
        convexity_constant: lower bound on Hessian eigenvalues
        diameter: D >= sup |x - y| over the boundary
        inradius: distance from center to the boundary
    """

    def __init__(self, name: str, center, convexity_constant: float,
                 diameter: float, inradius: float):
        self.name = name
        self.center = np.asarray(center, dtype=float)
        self.convexity_constant = float(convexity_constant)
        self.diameter = float(diameter)
        self.inradius = float(inradius)

    @property
    def scale(self) -> float:
        """Characteristic length used to scale tolerances."""
        return 0.5 * self.diameter

    @property
    def collar_width(self) -> float:
        """Width delta of the nearest-point uniqueness collar."""
        return 0.2 * self.inradius

    @property
    def boundary_tol(self) -> float:
        return 1e-10 * self.scale

    def xi(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hess(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def third(self, x: np.ndarray) -> Optional[np.ndarray]:
        """Rank-3 derivative tensor, or None when unavailable."""
        return None

    def line_exit(self, x: np.ndarray, d: np.ndarray) -> Optional[float]:
        """Closed-form first boundary hit along x + s d (s >= 0), if the shape has one."""
        return None

    def ray_radius(self, direction: np.ndarray) -> np.ndarray:
        """Distance from center to the boundary along unit direction(s)."""
        dirs = np.atleast_2d(np.asarray(direction, dtype=float))
        out = np.empty(len(dirs))
        for i, d in enumerate(dirs):
            hi = self.diameter * 1.01 + 1e-12
            out[i] = brentq(lambda s: float(self.xi(self.center + s * d)), 0.0, hi,
                            xtol=1e-14 * self.scale)
        return out.reshape(np.shape(direction)[:-1])

    def volume(self) -> float:
        _, w = volume_rule(self, 16, 16, 32)
        return float(np.sum(w))

    def describe(self) -> Dict:
        return {
            'name': self.name,
            'center': self.center.tolist(),
            'convexity_constant': self.convexity_constant,
            'diameter': self.diameter,
            'inradius': self.inradius,
            'collar_width': self.collar_width,
        }


class QuadricDomain(LevelSetDomain):
    """xi(x) = (x - c)^T diag(A) (x - c) - k, with A > 0."""

    def __init__(self, name: str, center, diag: np.ndarray, level: float,
                 convexity_constant: float, diameter: float, inradius: float):
        super().__init__(name, center, convexity_constant, diameter, inradius)
        self.diag = np.asarray(diag, dtype=float)
        self.level = float(level)

    def xi(self, x):
        y = np.asarray(x, dtype=float) - self.center
        return np.sum(self.diag * y * y, axis=-1) - self.level

    def grad(self, x):
        y = np.asarray(x, dtype=float) - self.center
        return 2.0 * self.diag * y

    def hess(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.diag(2.0 * self.diag), x.shape[:-1] + (3, 3)).copy()

    def third(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (3, 3, 3))

    def line_exit(self, x, d):
        y = np.asarray(x, dtype=float) - self.center
        d = np.asarray(d, dtype=float)
        a = float(np.sum(self.diag * d * d))
        if a <= 0.0:
            return None
        b = 2.0 * float(np.sum(self.diag * d * y))
        c = float(np.sum(self.diag * y * y)) - self.level
        disc = b * b - 4.0 * a * c
        if disc < 0.0:
            return None
        root = (-b + np.sqrt(disc)) / (2.0 * a)
        return max(root, 0.0)

    def ray_radius(self, direction):
        d = np.asarray(direction, dtype=float)
        return np.sqrt(self.level / np.sum(self.diag * d * d, axis=-1))


class Ball(QuadricDomain):
    """Ball |x - c|^2 - r^2 < 0."""

    def __init__(self, radius: float = 1.0, center=(0.0, 0.0, 0.0)):
        super().__init__('ball', center, np.ones(3), radius**2,
                         convexity_constant=2.0, diameter=2.0 * radius, inradius=radius)
        self.radius = float(radius)

    def volume(self) -> float:
        return 4.0 / 3.0 * np.pi * self.radius**3


class Ellipsoid(QuadricDomain):
    """Axis-aligned ellipsoid sum (x_i - c_i)^2 / a_i^2 - 1 < 0."""

    def __init__(self, semi_axes=(2.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)):
        a = np.asarray(semi_axes, dtype=float)
        if np.any(a <= 0):
            raise ValueError(f"semi_axes must be positive, got {a.tolist()}")
        super().__init__('ellipsoid', center, 1.0 / a**2, 1.0,
                         convexity_constant=float(np.min(2.0 / a**2)),
                         diameter=2.0 * float(np.max(a)), inradius=float(np.min(a)))
        self.semi_axes = a

    def volume(self) -> float:
        return 4.0 / 3.0 * np.pi * float(np.prod(self.semi_axes))


class CallbackDomain(LevelSetDomain):
    """
    User-supplied level set. Missing derivatives come from central differences;
    supplied gradients are checked against them at construction.
    """

    def __init__(self, xi: Callable, center, convexity_constant: float, diameter: float,
                 inradius: float, grad: Optional[Callable] = None,
                 hess: Optional[Callable] = None, name: str = 'callback'):
        super().__init__(name, center, convexity_constant, diameter, inradius)
        self._xi = xi
        self._grad = grad
        self._hess = hess
        self._h = 1e-6 * (1.0 + self.scale)
        if grad is not None:
            self._check_consistency()

    def _check_consistency(self):
        inner_points = self.center + 0.5 * self.inradius * np.vstack([np.eye(3), -np.eye(3)])
        for p in inner_points:
            g = np.asarray(self._grad(p), dtype=float)
            g_fd = self._fd_grad(p)
            if np.linalg.norm(g - g_fd) > 1e-5 * (1.0 + np.linalg.norm(g)):
                raise ValueError(f"grad callback inconsistent with xi at {p.tolist()}")

    def _fd_grad(self, x):
        x = np.asarray(x, dtype=float)
        h = self._h
        out = np.empty(x.shape)
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            out[..., i] = (self.xi(x + e) - self.xi(x - e)) / (2.0 * h)
        return out

    def xi(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return float(self._xi(x))
        flat = x.reshape(-1, 3)
        return np.array([self._xi(p) for p in flat]).reshape(x.shape[:-1])

    def grad(self, x):
        if self._grad is None:
            return self._fd_grad(x)
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return np.asarray(self._grad(x), dtype=float)
        return np.array([self._grad(p) for p in x.reshape(-1, 3)]).reshape(x.shape)

    def hess(self, x):
        x = np.asarray(x, dtype=float)
        if self._hess is not None and x.ndim == 1:
            return np.asarray(self._hess(x), dtype=float)
        h = self._h * 10.0
        out = np.empty(x.shape + (3,))
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            out[..., :, j] = (self.grad(x + e) - self.grad(x - e)) / (2.0 * h)
        return 0.5 * (out + np.swapaxes(out, -1, -2))


DOMAIN_REGISTRY = {
    'ball': Ball,
    'ellipsoid': Ellipsoid,
}


def get_domain(name: str, **params) -> LevelSetDomain:
    """Build a built-in domain by name."""
    if name not in DOMAIN_REGISTRY:
        raise ValueError(f"Unknown domain: {name}. Available: {list(DOMAIN_REGISTRY.keys())}")
    return DOMAIN_REGISTRY[name](**params)


# ---------------------------------------------------------------------------
# Pointwise geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundaryFrame:
    point: np.ndarray
    normal: np.ndarray
    tau1: np.ndarray
    tau2: np.ndarray

    def to_dict(self) -> Dict:
        return {k: getattr(self, k).tolist() for k in ('point', 'normal', 'tau1', 'tau2')}


@dataclass(frozen=True)
class NearestPoint:
    xbar: np.ndarray
    distance: float
    multiplier: float
    in_collar: bool
    residual: float


def xi_eval(domain: LevelSetDomain, x) -> Tuple[float, np.ndarray, np.ndarray]:
    """Return (xi(x), grad xi(x), hess xi(x))."""
    x = np.asarray(x, dtype=float)
    return float(domain.xi(x)), domain.grad(x), domain.hess(x)


def outward_normal(domain: LevelSetDomain, x, tol: float = 1e-12) -> np.ndarray:
    """n(x) = grad xi / |grad xi|; vectorized over leading axes."""
    g = domain.grad(np.asarray(x, dtype=float))
    norm = np.linalg.norm(g, axis=-1, keepdims=True)
    if np.any(norm <= tol):
        raise DegenerateGradient(f"|grad xi| <= {tol:g} at {np.asarray(x).tolist()}")
    return g / norm


def tangent_frame(domain: LevelSetDomain, x) -> BoundaryFrame:
    """Orthonormal right-handed frame (tau1, tau2, n) at a boundary point."""
    x = np.asarray(x, dtype=float)
    value = float(domain.xi(x))
    if abs(value) > 1e-6 * (1.0 + domain.scale):
        logger.debug("tangent_frame requested off the boundary (xi=%.3e)", value)
    n = outward_normal(domain, x)
    t1, t2 = frame_from_normal(n)
    return BoundaryFrame(point=x, normal=n, tau1=t1, tau2=t2)


def nearest_boundary_point(domain: LevelSetDomain, x, strict: bool = True,
                           max_iter: int = 60) -> NearestPoint:
    """
    Projected-Newton solve of the optimality system
        y - x + lam * grad xi(y) = 0,   xi(y) = 0.

    The starting guess is the ray hit from the domain center through x.

    Args:
        domain: the domain
        x: interior (or boundary) point
        strict: raise OutsideCollar when x is deeper than the collar width

    Returns:
        NearestPoint with xbar, distance and the multiplier lam
    """
    x = np.asarray(x, dtype=float)
    offset = x - domain.center
    r = np.linalg.norm(offset)
    direction = offset / r if r > 1e-14 * domain.scale else np.array([1.0, 0.0, 0.0])
    y = domain.center + float(domain.ray_radius(direction)) * direction
    g = domain.grad(y)
    lam = -np.linalg.norm(x - y) / np.linalg.norm(g)
    tol = 1e-14 * (1.0 + domain.scale)

    residual = np.inf
    for _ in range(max_iter):
        g = domain.grad(y)
        F = np.concatenate([y - x + lam * g, [domain.xi(y)]])
        residual = float(np.linalg.norm(F))
        if residual < tol:
            break
        K = np.zeros((4, 4))
        K[:3, :3] = np.eye(3) + lam * domain.hess(y)
        K[:3, 3] = g
        K[3, :3] = g
        step = np.linalg.solve(K, -F)
        y = y + step[:3]
        lam = lam + step[3]

    distance = float(np.linalg.norm(x - y))
    in_collar = distance < domain.collar_width
    result = NearestPoint(xbar=y, distance=distance, multiplier=float(lam),
                          in_collar=in_collar, residual=residual)
    if strict and not in_collar:
        raise OutsideCollar(
            f"distance {distance:.4g} exceeds collar width {domain.collar_width:.4g}",
            candidate=y, distance=distance)
    return result


def nearest_point_jacobian(domain: LevelSetDomain, x, projection: Optional[NearestPoint] = None) -> np.ndarray:
    """
    D xbar / D x from the implicit function theorem on the optimality system.
    """
    proj = projection or nearest_boundary_point(domain, x, strict=False)
    y, lam = proj.xbar, proj.multiplier
    g = domain.grad(y)
    K = np.zeros((4, 4))
    K[:3, :3] = np.eye(3) + lam * domain.hess(y)
    K[:3, 3] = g
    K[3, :3] = g
    rhs = np.zeros((4, 3))
    rhs[:3, :] = np.eye(3)
    return np.linalg.solve(K, rhs)[:3, :]


# ---------------------------------------------------------------------------
# Boundary charts
# ---------------------------------------------------------------------------

class BoundaryChart:
    """
    Graph chart over the tangent plane at p:
        eta(a, b) = p + a tau1 + b tau2 + h(a, b) n,   xi(eta) = 0.
    """

    def __init__(self, domain: LevelSetDomain, frame: BoundaryFrame, radius: float):
        self.domain = domain
        self.frame = frame
        self.center = frame.point
        self.radius = float(radius)

    def _height(self, base: np.ndarray) -> np.ndarray:
        n = self.frame.normal
        h = np.zeros(base.shape[:-1])
        for _ in range(60):
            q = base + h[..., None] * n
            f = self.domain.xi(q)
            df = np.sum(self.domain.grad(q) * n, axis=-1)
            step = f / df
            h = h - step
            if np.max(np.abs(step)) < 1e-15 * (1.0 + self.domain.scale):
                break
        return h

    def point(self, a, b) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        base = self.center + a[..., None] * self.frame.tau1 + b[..., None] * self.frame.tau2
        return base + self._height(base)[..., None] * self.frame.normal

    def partials(self, a, b) -> Tuple[np.ndarray, np.ndarray]:
        """(d eta / da, d eta / db)."""
        eta = self.point(a, b)
        g = self.domain.grad(eta)
        gn = np.sum(g * self.frame.normal, axis=-1)[..., None]
        ha = -np.sum(g * self.frame.tau1, axis=-1)[..., None] / gn
        hb = -np.sum(g * self.frame.tau2, axis=-1)[..., None] / gn
        return self.frame.tau1 + ha * self.frame.normal, self.frame.tau2 + hb * self.frame.normal

    def density(self, a, b) -> np.ndarray:
        """Surface measure density |d1 eta x d2 eta|."""
        d1, d2 = self.partials(a, b)
        return np.linalg.norm(np.cross(d1, d2), axis=-1)

    def coords(self, y) -> Tuple[np.ndarray, np.ndarray]:
        """Inverse map: boundary point -> chart parameters."""
        d = np.asarray(y, dtype=float) - self.center
        return np.sum(d * self.frame.tau1, axis=-1), np.sum(d * self.frame.tau2, axis=-1)


def boundary_chart(domain: LevelSetDomain, p, n_directions: int = 16,
                   min_cosine: float = 0.5) -> BoundaryChart:
    """
    Chart centered at boundary point p. The radius is the largest parameter
    radius on which the normal stays within arccos(min_cosine) of n(p).
    """
    frame = tangent_frame(domain, p)
    floor = 1e-3 * domain.scale
    chart = BoundaryChart(domain, frame, radius=np.inf)
    angles = 2.0 * np.pi * np.arange(n_directions) / n_directions
    r_max = 0.5 * domain.diameter

    def cosine(r, ang):
        eta = chart.point(np.array(r * np.cos(ang)), np.array(r * np.sin(ang)))
        if not np.all(np.isfinite(eta)) or abs(float(domain.xi(eta))) > 1e-8 * (1.0 + domain.scale):
            return -1.0
        return float(np.dot(outward_normal(domain, eta), frame.normal)) - min_cosine

    radius = r_max
    grid = np.linspace(0.0, r_max, 65)[1:]
    for ang in angles:
        prev = 0.0
        for r in grid:
            if r >= radius:
                break
            if cosine(r, ang) <= 0.0:
                radius = min(radius, brentq(cosine, prev, r, args=(ang,), xtol=1e-10 * domain.scale))
                break
            prev = r
    if radius < floor:
        raise ChartRadiusTooSmall(f"chart radius {radius:.3e} below floor {floor:.3e}")
    return BoundaryChart(domain, frame, radius)


# ---------------------------------------------------------------------------
# Sampling and quadrature over the domain
# ---------------------------------------------------------------------------

def fibonacci_directions(n: int) -> np.ndarray:
    """n near-uniform unit vectors (golden-angle spiral)."""
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    phi = np.pi * (1.0 + 5.0**0.5) * k
    s = np.sqrt(1.0 - z**2)
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=-1)


def sample_boundary(domain: LevelSetDomain, n: int) -> np.ndarray:
    """
    Deterministic boundary points: the six axis hits plus a Fibonacci lattice.
    """
    dirs = np.vstack([np.eye(3), -np.eye(3), fibonacci_directions(max(n - 6, 0))])[:max(n, 1)]
    r = domain.ray_radius(dirs)
    return domain.center + r[:, None] * dirs


def surface_rule(domain: LevelSetDomain, n_polar: int = 16,
                 n_azimuth: int = 32) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Boundary quadrature via rays from the center: dS = R^2 / (omega . n) d omega.

    Returns:
        points (M, 3), normals (M, 3), weights (M,)
    """
    dirs, w = sphere_rule(n_polar, n_azimuth)
    r = domain.ray_radius(dirs)
    pts = domain.center + r[:, None] * dirs
    normals = outward_normal(domain, pts)
    weights = w * r**2 / np.sum(dirs * normals, axis=-1)
    return pts, normals, weights


def volume_rule(domain: LevelSetDomain, n_rho: int = 12, n_polar: int = 12,
                n_azimuth: int = 24) -> Tuple[np.ndarray, np.ndarray]:
    """
    Volume quadrature x = c + rho R(omega) omega, dx = R^3 rho^2 d rho d omega.
    """
    dirs, w = sphere_rule(n_polar, n_azimuth)
    r = domain.ray_radius(dirs)
    rho, wr = gauss_legendre(n_rho, 0.0, 1.0)
    pts = domain.center + (rho[:, None, None] * r[None, :, None]) * dirs[None, :, :]
    weights = (wr[:, None] * rho[:, None]**2) * (w * r**3)[None, :]
    return pts.reshape(-1, 3), weights.ravel()


def convexity_certificate(domain: LevelSetDomain, n_rho: int = 4, n_polar: int = 6,
                          n_azimuth: int = 12) -> Dict:
    """Minimum sampled Hessian eigenvalue against the declared constant."""
    pts, _ = volume_rule(domain, n_rho, n_polar, n_azimuth)
    pts = np.vstack([pts, sample_boundary(domain, 64)])
    eig = np.linalg.eigvalsh(domain.hess(pts))
    min_eig = float(np.min(eig))
    return {
        'min_eigenvalue': min_eig,
        'declared': domain.convexity_constant,
        'passed': min_eig >= domain.convexity_constant * (1.0 - 1e-12),
        'n_samples': len(pts),
    }


def diameter_check(domain: LevelSetDomain, n: int = 200) -> Dict:
    pts = sample_boundary(domain, n)
    diff = pts[:, None, :] - pts[None, :, :]
    measured = float(np.max(np.linalg.norm(diff, axis=-1)))
    return {'measured': measured, 'declared': domain.diameter,
            'passed': measured <= domain.diameter * (1.0 + 1e-12)}
