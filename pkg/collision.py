"""
Collision Operator Module

Angular-cutoff hard-potential collision operator

    Q(F1, F2)(v) = int_R3 int_S2 |v - u|^kappa q0(((v - u)/|v - u|) . omega)
                     [F1(u') F2(v') - F1(u) F2(v)] d omega du

with u' = u - [(u - v).omega] omega, v' = v + [(u - v).omega] omega, its
gain/loss split, the weighted forms Gamma_gain and nu, and collision
invariance checks.

Quadrature:
- q_operator and gamma_gain integrate u on a Gauss-Hermite product grid and
  omega on a product-Gauss sphere rule; gain and loss share the nodes.
- nu_loss integrates in spherical coordinates centered at v and uses the
  closed angular factor int q0 d omega, so it is independent of the gain rule.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence

import numpy as np
import pandas as pd

from errors import QuadratureUnderresolved
from quadrature import gauss_hermite_velocity, gauss_legendre, sphere_rule

logger = logging.getLogger(__name__)


def maxwellian(v) -> np.ndarray:
    """mu(v) = (2 pi)^{-3/2} exp(-|v|^2 / 2)."""
    v = np.asarray(v, dtype=float)
    return (2.0 * np.pi) ** -1.5 * np.exp(-0.5 * np.sum(v * v, axis=-1))


def sqrt_maxwellian(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return (2.0 * np.pi) ** -0.75 * np.exp(-0.25 * np.sum(v * v, axis=-1))


def post_collision(u, v, omega):
    """
    (u', v') for collision parameter omega; broadcasts over leading axes.
    Momentum and energy are conserved exactly up to rounding.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    omega = np.asarray(omega, dtype=float)
    proj = np.sum((u - v) * omega, axis=-1, keepdims=True) * omega
    return u - proj, v + proj


@dataclass
class VelocityFunction:
    """
    Velocity profile v -> scalar, vectorized over leading axes.

    decay is 'gaussian' or 'compact'; it only labels the profile in reports.
    """
    func: Callable[[np.ndarray], np.ndarray]
    decay: str = 'gaussian'
    name: str = 'f'

    def __call__(self, v) -> np.ndarray:
        return np.asarray(self.func(np.asarray(v, dtype=float)), dtype=float)


def maxwellian_profile() -> VelocityFunction:
    return VelocityFunction(maxwellian, name='mu')


def sqrt_maxwellian_profile() -> VelocityFunction:
    return VelocityFunction(sqrt_maxwellian, name='sqrt_mu')


def zero_profile() -> VelocityFunction:
    return VelocityFunction(lambda v: np.zeros(v.shape[:-1]), decay='compact', name='zero')


def shifted_maxwellian(shift=(0.3, 0.0, 0.0)) -> VelocityFunction:
    shift = np.asarray(shift, dtype=float)
    return VelocityFunction(lambda v: maxwellian(v - shift), name=f'mu_shift{shift.tolist()}')


def anisotropic_gaussian(variances=(1.2, 1.0, 0.8)) -> VelocityFunction:
    """Normalized centered Gaussian with diagonal covariance."""
    var = np.asarray(variances, dtype=float)
    norm = (2.0 * np.pi) ** -1.5 / np.sqrt(np.prod(var))

    def func(v):
        return norm * np.exp(-0.5 * np.sum(v * v / var, axis=-1))
    return VelocityFunction(func, name='anisotropic')


def default_q0(c):
    return np.abs(c)


class CollisionKernel:
    """
    B(v - u, omega) = |v - u|^kappa q0(cos) with 0 <= q0(c) <= q0_constant |c|.

    Args:
        kappa: hard-potential exponent in [0, 1]
        q0: angular factor on [-1, 1] (default |c|)
        q0_constant: cutoff constant C in q0 <= C |c|
        n_polar, n_azimuth: omega rule orders
        n_velocity: Gauss-Hermite nodes per axis for u
        v_max: velocity cutoff
    """

    def __init__(self, kappa: float = 1.0, q0: Optional[Callable] = None, q0_constant: float = 1.0,
                 n_polar: int = 16, n_azimuth: int = 32, n_velocity: int = 12, v_max: float = 8.0):
        if not 0.0 <= kappa <= 1.0:
            raise ValueError(f"kappa must lie in [0, 1], got {kappa}")
        self.kappa = float(kappa)
        self.q0 = q0 or default_q0
        self.q0_constant = float(q0_constant)
        self.n_polar = n_polar
        self.n_azimuth = n_azimuth
        self.n_velocity = n_velocity
        self.v_max = float(v_max)
        self.omega, self.omega_weights = sphere_rule(n_polar, n_azimuth)
        self.u_nodes, self.u_weights = gauss_hermite_velocity(n_velocity, v_max=v_max)
        self._validate()
        c, wc = gauss_legendre(64)
        self.q0_total = float(2.0 * np.pi * np.sum(wc * self.q0(c)))

    def _validate(self):
        if abs(np.sum(self.omega_weights) - 4.0 * np.pi) > 1e-10:
            raise ValueError("angular rule does not reproduce |S^2|")
        if np.any(self.omega_weights <= 0) or np.any(self.u_weights <= 0):
            raise ValueError("quadrature weights must be positive")
        c = np.concatenate([self.omega[:, 2], np.linspace(-1.0, 1.0, 201)])
        q = self.q0(c)
        if np.any(q < 0) or np.any(q > self.q0_constant * np.abs(c) + 1e-12):
            raise ValueError(f"q0 violates 0 <= q0(c) <= {self.q0_constant} |c|")

    def refined(self) -> 'CollisionKernel':
        return CollisionKernel(self.kappa, self.q0, self.q0_constant,
                               n_polar=self.n_polar + self.n_polar // 2,
                               n_azimuth=self.n_azimuth + self.n_azimuth // 2,
                               n_velocity=self.n_velocity + 4, v_max=self.v_max)

    def describe(self) -> Dict:
        return {'kappa': self.kappa, 'q0_constant': self.q0_constant, 'n_polar': self.n_polar,
                'n_azimuth': self.n_azimuth, 'n_velocity': self.n_velocity, 'v_max': self.v_max}

    def cross_section(self, v, u, omega) -> np.ndarray:
        """B for v (3,), u (N, 3), omega (M, 3) -> (N, M)."""
        rel = v - u
        speed = np.linalg.norm(rel, axis=-1)
        unit = np.divide(rel, speed[:, None], out=np.zeros_like(rel), where=speed[:, None] > 0)
        cos = unit @ omega.T
        return (speed**self.kappa)[:, None] * self.q0(cos)


@dataclass
class CollisionValue:
    gain: float
    loss: float

    @property
    def value(self) -> float:
        return self.gain - self.loss

    def to_dict(self) -> Dict:
        return {'gain': self.gain, 'loss': self.loss, 'value': self.value}


def _gain_loss(kernel: CollisionKernel, F1, F2, v, u_weight: Optional[Callable] = None):
    """
    Shared-node gain and loss integrals at one v.

    u_weight replaces F1(u) in the loss and multiplies the gain by the same
    factor (used for the sqrt(mu)-weighted forms).
    """
    v = np.asarray(v, dtype=float)
    u, wu = kernel.u_nodes, kernel.u_weights
    om, wo = kernel.omega, kernel.omega_weights
    B = kernel.cross_section(v, u, om)
    proj = ((u - v) @ om.T)[..., None] * om[None, :, :]
    u_p = u[:, None, :] - proj
    v_p = v[None, None, :] + proj
    if u_weight is None:
        gain_integrand = F1(u_p) * F2(v_p)
        loss_integrand = (F1(u) * F2(v))[:, None]
    else:
        gain_integrand = u_weight(u)[:, None] * F1(u_p) * F2(v_p)
        loss_integrand = (u_weight(u) * F1(u) * F2(v))[:, None]
    W = wu[:, None] * wo[None, :]
    gain = float(np.sum(W * B * gain_integrand))
    loss = float(np.sum(W * B * np.broadcast_to(loss_integrand, B.shape)))
    return gain, loss


def q_operator(kernel: CollisionKernel, F1: VelocityFunction, F2: VelocityFunction, v,
               check_refinement: bool = False, tol: float = 1e-4) -> CollisionValue:
    """
    Q(F1, F2)(v) split into gain and loss.

    Raises:
        QuadratureUnderresolved: with check_refinement, when the refined rule
            moves the value by more than tol (1 + |gain| + |loss|)
    """
    gain, loss = _gain_loss(kernel, F1, F2, v)
    result = CollisionValue(gain=gain, loss=loss)
    if check_refinement:
        g2, l2 = _gain_loss(kernel.refined(), F1, F2, v)
        drift = abs((g2 - l2) - result.value)
        if drift > tol * (1.0 + abs(gain) + abs(loss)):
            raise QuadratureUnderresolved(f"Q changed by {drift:.3e} under refinement at v={np.asarray(v).tolist()}")
    return result


def gamma_gain(kernel: CollisionKernel, f1: VelocityFunction, f2: VelocityFunction, v) -> float:
    """Gamma_gain(f1, f2)(v) = int int B sqrt(mu(u)) f1(u') f2(v') d omega du."""
    return _gain_loss(kernel, f1, f2, v, u_weight=sqrt_maxwellian)[0]


def nu_loss(kernel: CollisionKernel, f: VelocityFunction, v, n_radial: int = 32,
            n_polar: int = 24, n_azimuth: int = 12) -> float:
    """
    nu(sqrt(mu) f)(v) = int |v - u|^kappa sqrt(mu(u)) f(u) du * int q0 d omega.

    u = v + r sigma with r on [0, |v| + v_max] and sigma on a sphere rule whose
    polar axis points from v toward the origin.
    """
    v = np.asarray(v, dtype=float)
    speed = float(np.linalg.norm(v))
    axis = -v / speed if speed > 0 else None
    sig, ws = sphere_rule(n_polar, n_azimuth, axis=axis)
    r, wr = gauss_legendre(n_radial, 0.0, speed + kernel.v_max)
    u = v + r[:, None, None] * sig[None, :, :]
    vals = sqrt_maxwellian(u) * f(u)
    radial = (wr * r ** (2.0 + kernel.kappa))[:, None] * ws[None, :]
    return float(kernel.q0_total * np.sum(radial * vals))


# ---------------------------------------------------------------------------
# Invariance and sweeps
# ---------------------------------------------------------------------------

@dataclass
class CollisionMoments:
    mass: float
    momentum: np.ndarray
    energy: float

    @property
    def max_abs(self) -> float:
        return float(max(abs(self.mass), np.max(np.abs(self.momentum)), abs(self.energy)))

    def to_dict(self) -> Dict:
        return {'mass': self.mass, 'momentum': self.momentum.tolist(), 'energy': self.energy,
                'max_abs': self.max_abs}


def check_collision_invariance(kernel: CollisionKernel, G: VelocityFunction,
                               n_outer: int = 6) -> CollisionMoments:
    """
    int [1, v, (|v|^2 - 3)/2] Q(G, G)(v) dv with a Gauss-Hermite outer rule
    (strong form: Q is evaluated pointwise at each outer node).
    """
    nodes, weights = gauss_hermite_velocity(n_outer, v_max=kernel.v_max)
    q = np.array([q_operator(kernel, G, G, v).value for v in nodes])
    wq = weights * q
    moments = CollisionMoments(
        mass=float(np.sum(wq)),
        momentum=np.sum(wq[:, None] * nodes, axis=0),
        energy=float(np.sum(wq * 0.5 * (np.sum(nodes**2, axis=-1) - 3.0))),
    )
    logger.info("collision invariance (%s): max |moment| = %.3e", G.name, moments.max_abs)
    return moments


def moment_refinement_table(G: VelocityFunction, orders: Sequence[int] = (6, 8, 10),
                            kappa: float = 1.0, n_outer: int = 6) -> pd.DataFrame:
    """Moment residuals of Q(G, G) across velocity/angle orders."""
    rows = []
    for n in orders:
        kernel = CollisionKernel(kappa=kappa, n_polar=n, n_azimuth=2 * n, n_velocity=n)
        m = check_collision_invariance(kernel, G, n_outer=n_outer)
        rows.append({'profile': G.name, 'order': n, 'mass': m.mass,
                     'momentum_x': m.momentum[0], 'momentum_y': m.momentum[1],
                     'momentum_z': m.momentum[2], 'energy': m.energy, 'max_abs': m.max_abs})
    return pd.DataFrame(rows)


def collision_frequency_profile(kernel: CollisionKernel, speeds: Optional[np.ndarray] = None,
                                direction=(1.0, 0.0, 0.0)) -> pd.DataFrame:
    """
    nu(mu)(v) / <v> along a ray of speeds; the column maximum is the fitted
    constant of |nu| <~ <v>.
    """
    speeds = np.linspace(0.0, kernel.v_max, 33) if speeds is None else np.asarray(speeds, dtype=float)
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    f = sqrt_maxwellian_profile()
    nu = np.array([nu_loss(kernel, f, s * d) for s in speeds])
    bracket = np.sqrt(1.0 + speeds**2)
    df = pd.DataFrame({'speed': speeds, 'nu': nu, 'nu_over_bracket': nu / bracket})
    logger.info("collision frequency: max nu/<v> = %.6g", float(df['nu_over_bracket'].max()))
    return df
