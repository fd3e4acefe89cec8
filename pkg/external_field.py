"""
External Field Module

Field library E(t, x) with its spatial Jacobian and time derivative,
sampled norm estimates, and the boundary sign-condition certificate.

Conventions:
    grad_E[..., i, j] = dE_i / dx_j
    Every evaluate() is vectorized over leading axes of x.
"""

import logging
from dataclasses import dataclass, asdict
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import qmc

from domain_geometry import LevelSetDomain, outward_normal, sample_boundary

logger = logging.getLogger(__name__)


class FieldSpec:
    """Base class for external fields."""

    is_zero = False

    def __init__(self, name: str, description: str):
        self.name = name
        self.description = description

    def evaluate(self, t, x) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Evaluate the field.

        Returns:
            (E, grad_E, dt_E) with shapes (..., 3), (..., 3, 3), (..., 3)
        """
        raise NotImplementedError

    def value(self, t, x) -> np.ndarray:
        """E only (integrators call this in their inner loop)."""
        return self.evaluate(t, x)[0]

    def default_params(self) -> Dict:
        raise NotImplementedError


class ZeroField(FieldSpec):
    is_zero = True

    def __init__(self):
        super().__init__(name="zero", description="E = 0")

    def default_params(self) -> Dict:
        return {}

    def evaluate(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.zeros_like(x), np.zeros(x.shape + (3,)), np.zeros_like(x)

    def value(self, t, x):
        return np.zeros_like(np.asarray(x, dtype=float))


class RadialField(FieldSpec):
    """E(t, x) = c (x - x0)."""

    def __init__(self, strength: float = 1.0, center=(0.0, 0.0, 0.0)):
        super().__init__(name="radial", description="E = c (x - x0)")
        self.strength = float(strength)
        self.center = np.asarray(center, dtype=float)

    def default_params(self) -> Dict:
        return {'strength': 1.0, 'center': [0.0, 0.0, 0.0]}

    def evaluate(self, t, x):
        x = np.asarray(x, dtype=float)
        E = self.strength * (x - self.center)
        grad = np.broadcast_to(self.strength * np.eye(3), x.shape + (3,)).copy()
        return E, grad, np.zeros_like(x)

    def value(self, t, x):
        return self.strength * (np.asarray(x, dtype=float) - self.center)


class ConstantField(FieldSpec):
    """E(t, x) = E0."""

    def __init__(self, vector=(0.0, 0.0, -1.0)):
        super().__init__(name="constant", description="E = E0")
        self.vector = np.asarray(vector, dtype=float)

    def default_params(self) -> Dict:
        return {'vector': [0.0, 0.0, -1.0]}

    def evaluate(self, t, x):
        x = np.asarray(x, dtype=float)
        E = np.broadcast_to(self.vector, x.shape).copy()
        return E, np.zeros(x.shape + (3,)), np.zeros_like(x)

    def value(self, t, x):
        return np.broadcast_to(self.vector, np.shape(x)).copy()


class TimeModulatedRadialField(FieldSpec):
    """E(t, x) = c (1 + r t) x."""

    def __init__(self, strength: float = 1.0, rate: float = 1.0):
        super().__init__(name="time_modulated", description="E = c (1 + r t) x")
        self.strength = float(strength)
        self.rate = float(rate)

    def default_params(self) -> Dict:
        return {'strength': 1.0, 'rate': 1.0}

    def evaluate(self, t, x):
        x = np.asarray(x, dtype=float)
        amp = self.strength * (1.0 + self.rate * np.asarray(t, dtype=float))
        amp = np.broadcast_to(amp, x.shape[:-1])
        E = amp[..., None] * x
        grad = amp[..., None, None] * np.eye(3)
        return E, grad, self.strength * self.rate * x


class CallbackField(FieldSpec):
    """
    User field. Missing derivatives come from central differences with step h.
    """

    def __init__(self, func: Callable, grad: Optional[Callable] = None,
                 dt: Optional[Callable] = None, h: float = 1e-5, name: str = "callback"):
        super().__init__(name=name, description="user supplied E(t, x)")
        self.func = func
        self.grad_func = grad
        self.dt_func = dt
        self.h = h

    def default_params(self) -> Dict:
        return {'h': 1e-5}

    def value(self, t, x):
        return np.asarray(self.func(t, np.asarray(x, dtype=float)), dtype=float)

    def evaluate(self, t, x):
        x = np.asarray(x, dtype=float)
        E = self.value(t, x)
        h = self.h
        if self.grad_func is not None:
            grad = np.asarray(self.grad_func(t, x), dtype=float)
        else:
            grad = np.empty(x.shape + (3,))
            for j in range(3):
                e = np.zeros(3)
                e[j] = h
                grad[..., :, j] = (self.value(t, x + e) - self.value(t, x - e)) / (2.0 * h)
        if self.dt_func is not None:
            dt = np.asarray(self.dt_func(t, x), dtype=float)
        else:
            dt = (self.value(np.asarray(t) + h, x) - self.value(np.asarray(t) - h, x)) / (2.0 * h)
        return E, grad, dt


class CompositeField(FieldSpec):
    """Sum of fields (external potential gradient plus self-consistent part)."""

    def __init__(self, *parts: FieldSpec):
        super().__init__(name="composite", description=" + ".join(p.name for p in parts))
        self.parts = parts
        self.is_zero = all(p.is_zero for p in parts)

    def default_params(self) -> Dict:
        return {}

    def evaluate(self, t, x):
        E, G, D = self.parts[0].evaluate(t, x)
        E, G, D = E.copy(), G.copy(), D.copy()
        for p in self.parts[1:]:
            e, g, d = p.evaluate(t, x)
            E += e
            G += g
            D += d
        return E, G, D

    def value(self, t, x):
        out = self.parts[0].value(t, x).copy()
        for p in self.parts[1:]:
            out += p.value(t, x)
        return out


FIELD_REGISTRY = {
    'zero': ZeroField,
    'radial': RadialField,
    'constant': ConstantField,
    'time_modulated': TimeModulatedRadialField,
}


def get_field(name: str, **params) -> FieldSpec:
    """Build a built-in field by name."""
    if name not in FIELD_REGISTRY:
        raise ValueError(f"Unknown field: {name}. Available: {list(FIELD_REGISTRY.keys())}")
    return FIELD_REGISTRY[name](**params)


def field_eval(spec: FieldSpec, t: float, x) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return spec.evaluate(t, x)


# ---------------------------------------------------------------------------
# Certificates
# ---------------------------------------------------------------------------

@dataclass
class SignConditionReport:
    c_e_lower: float
    passed: bool
    worst_point: np.ndarray
    worst_time: float
    n_samples: int

    def to_dict(self) -> Dict:
        d = asdict(self)
        d['worst_point'] = np.asarray(self.worst_point).tolist()
        return d


@dataclass
class FieldNorms:
    e_sup: float
    grad_sup: float
    dt_sup: float
    n_interior: int
    n_boundary: int
    n_times: int

    def as_tuple(self) -> Tuple[float, float, float]:
        return self.e_sup, self.grad_sup, self.dt_sup

    def to_dict(self) -> Dict:
        return asdict(self)


def interior_samples(domain: LevelSetDomain, n: int) -> np.ndarray:
    """
    Deterministic interior points: an unscrambled Halton sequence mapped to
    star coordinates (uniform in volume for a ball).
    """
    u = qmc.Halton(d=3, scramble=False).random(n + 1)[1:]
    rho = np.cbrt(u[:, 0])
    cos_t = 2.0 * u[:, 1] - 1.0
    phi = 2.0 * np.pi * u[:, 2]
    s = np.sqrt(1.0 - cos_t**2)
    dirs = np.stack([s * np.cos(phi), s * np.sin(phi), cos_t], axis=-1)
    r = domain.ray_radius(dirs)
    return domain.center + (rho * r)[:, None] * dirs


def check_sign_condition(domain: LevelSetDomain, spec: FieldSpec, n_samples: int = 256,
                         t_grid: Sequence[float] = (0.0,)) -> SignConditionReport:
    """
    c_e_lower = min over (t, boundary sample) of E(t, x) . n(x).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    pts = sample_boundary(domain, n_samples)
    normals = outward_normal(domain, pts)
    best = np.inf
    worst_point, worst_time = pts[0], float(t_grid[0])
    for t in t_grid:
        en = np.sum(spec.value(t, pts) * normals, axis=-1)
        k = int(np.argmin(en))
        if en[k] < best:
            best, worst_point, worst_time = float(en[k]), pts[k], float(t)
    report = SignConditionReport(c_e_lower=best, passed=bool(best > 0.0), worst_point=worst_point,
                                 worst_time=worst_time, n_samples=len(pts) * len(t_grid))
    logger.info("sign condition: C_E lower = %.6g (%s)", best, "pass" if report.passed else "fail")
    return report


def field_norms(domain: LevelSetDomain, spec: FieldSpec, n_samples: int = 512,
                t_grid: Sequence[float] = (0.0,)) -> FieldNorms:
    """Sampled sup-norm estimates of E, grad E (spectral) and dt E."""
    pts = np.vstack([interior_samples(domain, n_samples), sample_boundary(domain, n_samples)])
    e_sup = g_sup = d_sup = 0.0
    for t in t_grid:
        E, G, D = spec.evaluate(t, pts)
        e_sup = max(e_sup, float(np.max(np.linalg.norm(E, axis=-1))))
        g_sup = max(g_sup, float(np.max(np.linalg.norm(G, ord=2, axis=(-2, -1)))))
        d_sup = max(d_sup, float(np.max(np.linalg.norm(D, axis=-1))))
    return FieldNorms(e_sup=e_sup, grad_sup=g_sup, dt_sup=d_sup,
                      n_interior=n_samples, n_boundary=n_samples, n_times=len(t_grid))


def check_field_consistency(spec: FieldSpec, points: np.ndarray, t: float = 0.0,
                            h: float = 1e-5) -> float:
    """
    Max over points of |FD grad E - grad E| / (1 + |grad E|), plus the same
    for the time derivative.
    """
    points = np.asarray(points, dtype=float)
    _, G, D = spec.evaluate(t, points)
    G_fd = np.empty_like(G)
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        G_fd[..., :, j] = (spec.value(t, points + e) - spec.value(t, points - e)) / (2.0 * h)
    D_fd = (spec.value(t + h, points) - spec.value(t - h, points)) / (2.0 * h)
    gscale = 1.0 + np.linalg.norm(G, ord=2, axis=(-2, -1))
    err_g = np.linalg.norm(G_fd - G, axis=(-2, -1)) / gscale
    err_d = np.linalg.norm(D_fd - D, axis=-1) / (1.0 + np.linalg.norm(D, axis=-1))
    return float(max(np.max(err_g), np.max(err_d)))
