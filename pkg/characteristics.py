"""
Characteristics Module

Hamiltonian characteristics dX/ds = V, dV/ds = E(s, X), backward/forward
exit detection, variational (Jacobian) propagation and finite-difference
checks of the change-of-variable determinants.

Integration is classical RK4 with the step halved inside the collar. Exits
are bracketed by a sign change of xi(X) over one step and the root is
refined with Brent's method on the RK4 sub-step.
"""

import logging
from dataclasses import dataclass, field as dc_field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import simpson, trapezoid
from scipy.optimize import brentq

from domain_geometry import LevelSetDomain, boundary_chart, outward_normal
from errors import (ExitDetectionFailed, ExitedDomain, GrazingAmbiguous,
                    GrazingSingularity, NoExitWithinHorizon)
from external_field import FieldSpec, field_norms

logger = logging.getLogger(__name__)

Augment = Callable[[float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class PhaseState:
    t: float
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 't', float(self.t))
        object.__setattr__(self, 'x', np.asarray(self.x, dtype=float))
        object.__setattr__(self, 'v', np.asarray(self.v, dtype=float))

    def to_dict(self) -> Dict:
        return {'t': self.t, 'x': self.x.tolist(), 'v': self.v.tolist()}


@dataclass(frozen=True, eq=False)
class ExitRecord:
    """
    Exit data of a characteristic.

    exit_time is the duration (t_b or t_f); clock is the absolute time of the
    wall hit (t - t_b or t + t_f).
    """
    exit_time: float
    exit_point: np.ndarray
    exit_velocity: np.ndarray
    normal_component: float
    grazing: bool
    clock: float
    direction: str

    def state(self) -> PhaseState:
        return PhaseState(self.clock, self.exit_point, self.exit_velocity)

    def to_dict(self) -> Dict:
        return {
            'exit_time': self.exit_time,
            'exit_point': self.exit_point.tolist(),
            'exit_velocity': self.exit_velocity.tolist(),
            'normal_component': self.normal_component,
            'grazing': self.grazing,
            'clock': self.clock,
            'direction': self.direction,
        }


@dataclass(eq=False)
class FlowJacobian:
    """d(X(s), V(s)) / d(x, v) as a 6x6 matrix."""
    matrix: np.ndarray

    @property
    def dX_dx(self):
        return self.matrix[:3, :3]

    @property
    def dX_dv(self):
        return self.matrix[:3, 3:]

    @property
    def dV_dx(self):
        return self.matrix[3:, :3]

    @property
    def dV_dv(self):
        return self.matrix[3:, 3:]

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.matrix))


@dataclass
class IntegratorSettings:
    """
    Integration and detection controls.

    Attributes:
        step: base RK4 step (time units)
        max_displacement: cap on |V| h as a fraction of the domain scale
        grazing_rtol: |n.v| < grazing_rtol (1 + |v|) marks grazing
        horizon_scale: default horizon is horizon_scale / (1 + |v|)
        fd_rel: finite-difference step is fd_rel (1 + scale)
        touch_tol: |xi| below touch_tol * scale at a local max of xi is a touch
    """
    step: float = 1e-2
    max_displacement: float = 0.02
    grazing_rtol: float = 1e-6
    horizon_scale: float = 10.0
    fd_rel: float = 1e-5
    touch_tol: float = 1e-8

    def grazing_tol(self, v: np.ndarray) -> float:
        return self.grazing_rtol * (1.0 + float(np.linalg.norm(v)))

    def horizon(self, v: np.ndarray) -> float:
        return self.horizon_scale / (1.0 + float(np.linalg.norm(v)))

    def fd_step(self, domain: LevelSetDomain) -> float:
        return self.fd_rel * (1.0 + domain.scale)

    def step_for(self, domain: LevelSetDomain, x: np.ndarray, v: np.ndarray) -> float:
        speed = float(np.linalg.norm(v))
        h = self.step
        if speed > 0.0:
            h = min(h, self.max_displacement * domain.scale / speed)
        if abs(float(domain.xi(x))) < domain.collar_width:
            h *= 0.5
        return h


DEFAULT_SETTINGS = IntegratorSettings()


# ---------------------------------------------------------------------------
# RK4 kernels
# ---------------------------------------------------------------------------

def _rhs(field: FieldSpec, s, y: np.ndarray, augment: Optional[Augment]) -> np.ndarray:
    x, v = y[..., :3], y[..., 3:6]
    parts = [v, field.value(s, x)]
    if augment is not None:
        parts.append(augment(s, x, v, y[..., 6:]))
    return np.concatenate(parts, axis=-1)


def _rk4(field: FieldSpec, s, y: np.ndarray, h, augment: Optional[Augment] = None) -> np.ndarray:
    """One classical RK4 step of signed size h (h may be an array for batches)."""
    hh = np.asarray(h, dtype=float)
    hc = hh[..., None] if hh.ndim else hh
    k1 = _rhs(field, s, y, augment)
    k2 = _rhs(field, s + 0.5 * hh, y + 0.5 * hc * k1, augment)
    k3 = _rhs(field, s + 0.5 * hh, y + 0.5 * hc * k2, augment)
    k4 = _rhs(field, s + hh, y + hc * k3, augment)
    return y + hc / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step(field: FieldSpec, s, x: np.ndarray, v: np.ndarray, h) -> Tuple[np.ndarray, np.ndarray]:
    """Free RK4 step (no domain), vectorized over leading axes."""
    y = np.concatenate([np.asarray(x, dtype=float), np.asarray(v, dtype=float)], axis=-1)
    y = _rk4(field, s, y, h)
    return y[..., :3], y[..., 3:6]


def variational_augment(field: FieldSpec) -> Augment:
    """d/ds M = [[0, I], [grad E, 0]] M for the flattened 6x6 sensitivity M."""
    def augment(s, x, v, m):
        G = field.evaluate(s, x)[1]
        M = m.reshape(6, 6)
        dM = np.empty((6, 6))
        dM[:3] = M[3:]
        dM[3:] = G @ M[:3]
        return dM.ravel()
    return augment


# ---------------------------------------------------------------------------
# Scalar marching
# ---------------------------------------------------------------------------

@dataclass
class _MarchResult:
    s: float
    y: np.ndarray
    exited: bool
    elapsed: float
    samples: List[Tuple[float, np.ndarray]] = dc_field(default_factory=list)


def _march(domain: LevelSetDomain, field: FieldSpec, t0: float, y0: np.ndarray,
           duration: float, direction: int, settings: IntegratorSettings,
           augment: Optional[Augment] = None, record: bool = False,
           stop_at_exit: bool = True) -> _MarchResult:
    """
    Integrate from t0 for `duration` in the given time direction (+1/-1).

    Stops at the first exit when stop_at_exit is set; the returned state then
    sits on the boundary.
    """
    y = np.array(y0, dtype=float)
    s = float(t0)
    elapsed = 0.0
    out = _MarchResult(s=s, y=y, exited=False, elapsed=0.0)
    if record:
        out.samples.append((s, y.copy()))
    exit_threshold = domain.boundary_tol
    xi_prev = xi_cur = float(domain.xi(y[:3]))

    while elapsed < duration:
        h = min(settings.step_for(domain, y[:3], y[3:6]), duration - elapsed)
        if h <= 0.0:
            break
        y_new = _rk4(field, s, y, direction * h, augment)
        xi_new = float(domain.xi(y_new[:3]))

        if stop_at_exit and xi_new > exit_threshold:
            def phi(tau, s=s, y=y):
                return float(domain.xi(_rk4(field, s, y, direction * tau, augment)[:3]))
            lo_val = phi(0.0)
            if lo_val >= 0.0:
                tau = 0.0
            else:
                try:
                    tau = brentq(phi, 0.0, h, xtol=1e-15, maxiter=200)
                except (ValueError, RuntimeError) as exc:
                    raise ExitDetectionFailed(f"exit refinement failed near s={s:.6g}: {exc}") from exc
            y = _rk4(field, s, y, direction * tau, augment) if tau > 0.0 else y
            s = s + direction * tau
            elapsed += tau
            out.s, out.y, out.exited, out.elapsed = s, y, True, elapsed
            if record:
                out.samples.append((s, y.copy()))
            return out

        if (stop_at_exit and xi_cur > xi_prev and xi_cur > xi_new
                and abs(xi_cur) < settings.touch_tol * domain.scale):
            raise GrazingAmbiguous(f"xi touches 0 without crossing near s={s:.6g}")

        xi_prev, xi_cur = xi_cur, xi_new
        y = y_new
        s = s + direction * h
        elapsed += h
        if record:
            out.samples.append((s, y.copy()))

    out.s, out.y, out.elapsed = s, y, elapsed
    return out


def _boundary_start(domain: LevelSetDomain, state: PhaseState, direction: int,
                    settings: IntegratorSettings) -> Optional[str]:
    """
    Classify a start on the boundary: 'leaving', 'entering' or None (interior).
    Grazing boundary starts are undefined and raise GrazingAmbiguous.
    """
    if abs(float(domain.xi(state.x))) > domain.boundary_tol:
        return None
    n = outward_normal(domain, state.x)
    rate = direction * float(np.dot(n, state.v))
    if abs(rate) < settings.grazing_tol(state.v):
        raise GrazingAmbiguous(f"boundary start on the grazing set (n.v={rate:.3e})")
    return 'leaving' if rate > 0 else 'entering'


def _exit_record(domain, field, clock, duration, y, direction, settings) -> ExitRecord:
    x_b, v_b = y[:3].copy(), y[3:6].copy()
    nv = float(np.dot(outward_normal(domain, x_b), v_b))
    return ExitRecord(exit_time=float(duration), exit_point=x_b, exit_velocity=v_b,
                      normal_component=nv, grazing=abs(nv) < settings.grazing_tol(v_b),
                      clock=float(clock), direction='backward' if direction < 0 else 'forward')


def _exit(domain: LevelSetDomain, field: FieldSpec, state: PhaseState, direction: int,
          settings: Optional[IntegratorSettings], horizon: Optional[float],
          augment: Optional[Augment] = None, extra0: Optional[np.ndarray] = None):
    settings = settings or DEFAULT_SETTINGS
    horizon = settings.horizon(state.v) if horizon is None else horizon
    y0 = np.concatenate([state.x, state.v] + ([extra0] if extra0 is not None else []))

    start = _boundary_start(domain, state, direction, settings)
    if start == 'leaving':
        return _exit_record(domain, field, state.t, 0.0, y0, direction, settings), y0

    if field.is_zero and augment is None:
        s_hit = domain.line_exit(state.x, direction * state.v)
        if s_hit is not None:
            if s_hit > horizon:
                raise NoExitWithinHorizon(f"no exit within horizon {horizon:.4g}")
            y = np.concatenate([state.x + direction * s_hit * state.v, state.v])
            rec = _exit_record(domain, field, state.t + direction * s_hit, s_hit, y, direction, settings)
            return rec, y
        if not np.any(state.v):
            raise NoExitWithinHorizon("zero velocity in a zero field never exits")

    res = _march(domain, field, state.t, y0, horizon, direction, settings, augment=augment)
    if not res.exited:
        raise NoExitWithinHorizon(f"no exit within horizon {horizon:.4g}")
    return _exit_record(domain, field, res.s, res.elapsed, res.y, direction, settings), res.y


def backward_exit(domain: LevelSetDomain, field: FieldSpec, state: PhaseState,
                  settings: Optional[IntegratorSettings] = None,
                  horizon: Optional[float] = None) -> ExitRecord:
    """
    Backward exit (t_b, x_b, v_b) of the characteristic through state.

    The search is not capped by state.t: t_b > t is returned as measured.

    Raises:
        NoExitWithinHorizon: confined past the horizon
        GrazingAmbiguous: touching without crossing, or grazing boundary start
    """
    return _exit(domain, field, state, -1, settings, horizon)[0]


def forward_exit(domain: LevelSetDomain, field: FieldSpec, state: PhaseState,
                 settings: Optional[IntegratorSettings] = None,
                 horizon: Optional[float] = None) -> ExitRecord:
    """Forward exit (t_f, x_f, v_f)."""
    return _exit(domain, field, state, +1, settings, horizon)[0]


def flow(domain: LevelSetDomain, field: FieldSpec, state: PhaseState, s: float,
         settings: Optional[IntegratorSettings] = None) -> PhaseState:
    """
    (X(s), V(s)) through state.

    Raises:
        ExitedDomain: the path leaves the domain before reaching s
    """
    settings = settings or DEFAULT_SETTINGS
    direction = 1 if s >= state.t else -1
    y0 = np.concatenate([state.x, state.v])
    start = _boundary_start(domain, state, direction, settings)
    if start == 'leaving' and s != state.t:
        rec = _exit_record(domain, field, state.t, 0.0, y0, direction, settings)
        raise ExitedDomain("path leaves the domain immediately", record=rec)
    res = _march(domain, field, state.t, y0, abs(s - state.t), direction, settings)
    if res.exited:
        rec = _exit_record(domain, field, res.s, res.elapsed, res.y, direction, settings)
        raise ExitedDomain(f"path left the domain at s={res.s:.6g}", record=rec)
    return PhaseState(s, res.y[:3], res.y[3:6])


def flow_jacobian(domain: LevelSetDomain, field: FieldSpec, state: PhaseState, s: float,
                  settings: Optional[IntegratorSettings] = None) -> FlowJacobian:
    """Integrate the variational system alongside the flow to time s."""
    settings = settings or DEFAULT_SETTINGS
    direction = 1 if s >= state.t else -1
    y0 = np.concatenate([state.x, state.v, np.eye(6).ravel()])
    res = _march(domain, field, state.t, y0, abs(s - state.t), direction, settings,
                 augment=variational_augment(field))
    if res.exited:
        rec = _exit_record(domain, field, res.s, res.elapsed, res.y, direction, settings)
        raise ExitedDomain(f"path left the domain at s={res.s:.6g}", record=rec)
    return FlowJacobian(res.y[6:].reshape(6, 6))


def fd_flow_jacobian(domain: LevelSetDomain, field: FieldSpec, state: PhaseState, s: float,
                     settings: Optional[IntegratorSettings] = None) -> FlowJacobian:
    """Central-difference Jacobian of the flow map (x, v) -> (X(s), V(s))."""
    settings = settings or DEFAULT_SETTINGS
    h = settings.fd_step(domain)
    z0 = np.concatenate([state.x, state.v])
    J = np.empty((6, 6))
    for j in range(6):
        dz = np.zeros(6)
        dz[j] = h
        plus = flow(domain, field, PhaseState(state.t, *np.split(z0 + dz, 2)), s, settings)
        minus = flow(domain, field, PhaseState(state.t, *np.split(z0 - dz, 2)), s, settings)
        J[:, j] = (np.concatenate([plus.x, plus.v]) - np.concatenate([minus.x, minus.v])) / (2.0 * h)
    return FlowJacobian(J)


def sample_trajectory(domain: LevelSetDomain, field: FieldSpec, state: PhaseState, s_end: float,
                      settings: Optional[IntegratorSettings] = None,
                      stop_at_exit: bool = True) -> pd.DataFrame:
    """
    Per-step table (s, x1..x3, v1..v3, xi) from state to s_end.

    When the path exits first, the last row is the wall hit and the exit
    record is stored in df.attrs['exit'].
    """
    settings = settings or DEFAULT_SETTINGS
    direction = 1 if s_end >= state.t else -1
    y0 = np.concatenate([state.x, state.v])
    start = _boundary_start(domain, state, direction, settings) if stop_at_exit else None
    if start == 'leaving':
        rows = [(state.t, y0)]
        exited, res_s, res_el, res_y = True, state.t, 0.0, y0
    else:
        res = _march(domain, field, state.t, y0, abs(s_end - state.t), direction, settings,
                     record=True, stop_at_exit=stop_at_exit)
        rows = res.samples
        exited, res_s, res_el, res_y = res.exited, res.s, res.elapsed, res.y
    data = np.array([np.concatenate([[s], y[:6]]) for s, y in rows])
    df = pd.DataFrame(data, columns=['s', 'x1', 'x2', 'x3', 'v1', 'v2', 'v3'])
    df['xi'] = domain.xi(data[:, 1:4])
    if exited:
        df.attrs['exit'] = _exit_record(domain, field, res_s, res_el, res_y, direction, settings).to_dict()
    return df


# ---------------------------------------------------------------------------
# Batch marching (used by the grid-mode solver and the cycle evaluator)
# ---------------------------------------------------------------------------

@dataclass
class BatchResult:
    x: np.ndarray
    v: np.ndarray
    extra: np.ndarray
    clock: np.ndarray
    exited: np.ndarray


def march_batch(domain: LevelSetDomain, field: FieldSpec, t0, X: np.ndarray, V: np.ndarray,
                durations: np.ndarray, settings: Optional[IntegratorSettings] = None,
                direction: int = -1, augment: Optional[Augment] = None,
                extra0: Optional[np.ndarray] = None) -> BatchResult:
    """
    March many characteristics at once with a common step.

    Rows stop at their own duration or at their first exit; exit roots are
    located by bisection on the step fraction (60 halvings).

    Args:
        t0: start time(s), scalar or (M,)
        X, V: (M, 3) start states
        durations: (M,) time to integrate for each row
        augment: optional vectorized augment acting on (M, k) extras
        extra0: (M, k) initial extras

    Returns:
        BatchResult with final states, extras, clocks and exit flags
    """
    settings = settings or DEFAULT_SETTINGS
    M = len(X)
    extra0 = np.zeros((M, 0)) if extra0 is None else np.asarray(extra0, dtype=float)
    y = np.concatenate([np.asarray(X, float), np.asarray(V, float), extra0], axis=-1)
    clock = np.broadcast_to(np.asarray(t0, dtype=float), (M,)).copy()
    remaining = np.asarray(durations, dtype=float).copy()
    exited = np.zeros(M, dtype=bool)
    active = remaining > 0.0
    threshold = domain.boundary_tol

    speed = float(np.max(np.linalg.norm(V, axis=-1))) if M else 0.0
    h_base = settings.step
    if speed > 0.0:
        h_base = min(h_base, settings.max_displacement * domain.scale / speed)

    while np.any(active):
        idx = np.flatnonzero(active)
        h = np.minimum(h_base, remaining[idx])
        ya = y[idx]
        sa = clock[idx]
        y_new = _rk4(field, sa, ya, direction * h, augment)
        xi_new = domain.xi(y_new[:, :3])
        cross = xi_new > threshold

        if np.any(cross):
            ci = np.flatnonzero(cross)
            lo = np.zeros(len(ci))
            hi = np.ones(len(ci))
            yc, sc, hc = ya[ci], sa[ci], h[ci]
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                xm = _rk4(field, sc, yc, direction * hc * mid, augment)[:, :3]
                outside = domain.xi(xm) > 0.0
                hi = np.where(outside, mid, hi)
                lo = np.where(outside, lo, mid)
            frac = hi
            y_exit = _rk4(field, sc, yc, direction * hc * frac, augment)
            rows = idx[ci]
            y[rows] = y_exit
            clock[rows] = sc + direction * hc * frac
            exited[rows] = True
            active[rows] = False

        keep = ~cross
        rows = idx[keep]
        y[rows] = y_new[keep]
        clock[rows] = sa[keep] + direction * h[keep]
        remaining[rows] -= h[keep]
        active[rows] = remaining[rows] > 1e-15

    return BatchResult(x=y[:, :3], v=y[:, 3:6], extra=y[:, 6:], clock=clock, exited=exited)


# ---------------------------------------------------------------------------
# Change-of-variable determinants
# ---------------------------------------------------------------------------

@dataclass
class DeterminantCheck:
    numeric: float
    reference: float

    @property
    def relative_error(self) -> float:
        return abs(self.numeric - self.reference) / max(abs(self.reference), 1e-300)

    def to_dict(self) -> Dict:
        return {'numeric': self.numeric, 'reference': self.reference,
                'relative_error': self.relative_error}


def _require_outgoing(domain, x, v, settings) -> float:
    nv = float(np.dot(outward_normal(domain, x), v))
    if abs(nv) < settings.grazing_tol(v):
        raise GrazingAmbiguous(f"state on the grazing set (n.v={nv:.3e})")
    if nv < 0.0:
        raise ValueError(f"(x, v) must be outgoing (n.v > 0), got n.v={nv:.6g}")
    return nv


def verify_boundary_map_det(domain: LevelSetDomain, field: FieldSpec, t: float, x, v, s: float,
                            settings: Optional[IntegratorSettings] = None) -> DeterminantCheck:
    """
    FD determinant of (t, a, b, v) -> (X(s), V(s)) for x = eta(a, b) on the
    boundary, divided by the chart density; reference |n(x).v|.
    """
    settings = settings or DEFAULT_SETTINGS
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    nv = _require_outgoing(domain, x, v, settings)
    chart = boundary_chart(domain, x)
    h = settings.fd_step(domain)

    def image(z):
        p = chart.point(np.array(z[1]), np.array(z[2]))
        out = flow(domain, field, PhaseState(z[0], p, z[3:6]), s, settings)
        return np.concatenate([out.x, out.v])

    z0 = np.concatenate([[t, 0.0, 0.0], v])
    J = np.empty((6, 6))
    for j in range(6):
        dz = np.zeros(6)
        dz[j] = h
        J[:, j] = (image(z0 + dz) - image(z0 - dz)) / (2.0 * h)
    det = abs(np.linalg.det(J)) / float(chart.density(np.array(0.0), np.array(0.0)))
    return DeterminantCheck(numeric=float(det), reference=abs(nv))


@dataclass
class GammaDeterminants:
    boundary_to_boundary: DeterminantCheck
    interior_to_boundary: DeterminantCheck
    record: ExitRecord

    def to_dict(self) -> Dict:
        return {'boundary_to_boundary': self.boundary_to_boundary.to_dict(),
                'interior_to_boundary': self.interior_to_boundary.to_dict(),
                'exit': self.record.to_dict()}


def verify_gamma_to_gamma_det(domain: LevelSetDomain, field: FieldSpec, t: float, x, v,
                              settings: Optional[IntegratorSettings] = None) -> GammaDeterminants:
    """
    FD determinants of
        (t, x, v) on gamma_+  ->  (t - t_b, x_b, v_b) on gamma_-
    against |n(x).v| / |n(x_b).v_b|, and of the interior map
        (x, v)  ->  (T - t_b, x_b, v_b)
    at the midpoint of the backward chord against 1 / |n(x_b).v_b|.
    """
    settings = settings or DEFAULT_SETTINGS
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    nv = _require_outgoing(domain, x, v, settings)
    rec = backward_exit(domain, field, PhaseState(t, x, v), settings)
    if rec.grazing:
        raise GrazingAmbiguous("backward exit is grazing")
    if t < rec.exit_time:
        raise ValueError(f"t={t:.6g} is below t_b={rec.exit_time:.6g}")
    chart_x = boundary_chart(domain, x)
    chart_b = boundary_chart(domain, rec.exit_point)
    h = settings.fd_step(domain)

    def exit_image(state):
        r = backward_exit(domain, field, state, settings)
        a, b = chart_b.coords(r.exit_point)
        return np.concatenate([[r.clock, a, b], r.exit_velocity]), (a, b)

    def boundary_image(z):
        p = chart_x.point(np.array(z[1]), np.array(z[2]))
        return exit_image(PhaseState(z[0], p, z[3:6]))[0]

    z0 = np.concatenate([[t, 0.0, 0.0], v])
    J = np.empty((6, 6))
    for j in range(6):
        dz = np.zeros(6)
        dz[j] = h
        J[:, j] = (boundary_image(z0 + dz) - boundary_image(z0 - dz)) / (2.0 * h)
    a0, b0 = chart_b.coords(rec.exit_point)
    dens_b = float(chart_b.density(np.array(a0), np.array(b0)))
    dens_x = float(chart_x.density(np.array(0.0), np.array(0.0)))
    g_det = abs(np.linalg.det(J)) * dens_b / dens_x
    g_check = DeterminantCheck(numeric=float(g_det), reference=abs(nv) / abs(rec.normal_component))

    s_mid = t - 0.5 * rec.exit_time
    mid = flow(domain, field, PhaseState(t, x, v), s_mid, settings)
    z1 = np.concatenate([mid.x, mid.v])
    J2 = np.empty((6, 6))
    for j in range(6):
        dz = np.zeros(6)
        dz[j] = h
        plus = exit_image(PhaseState(s_mid, (z1 + dz)[:3], (z1 + dz)[3:]))[0]
        minus = exit_image(PhaseState(s_mid, (z1 - dz)[:3], (z1 - dz)[3:]))[0]
        J2[:, j] = (plus - minus) / (2.0 * h)
    i_det = abs(np.linalg.det(J2)) * dens_b
    i_check = DeterminantCheck(numeric=float(i_det), reference=1.0 / abs(rec.normal_component))
    return GammaDeterminants(boundary_to_boundary=g_check, interior_to_boundary=i_check, record=rec)


# ---------------------------------------------------------------------------
# Exit derivatives and the arc-length bound
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ExitDerivatives:
    dtb_dx: np.ndarray
    dtb_dv: np.ndarray
    dxb_dx: np.ndarray
    dxb_dv: np.ndarray
    dvb_dx: np.ndarray
    dvb_dv: np.ndarray
    record: ExitRecord

    def stacked(self) -> np.ndarray:
        """7x6 matrix: rows (t_b, x_b, v_b), columns (x, v)."""
        top = np.concatenate([self.dtb_dx, self.dtb_dv])[None, :]
        mid = np.hstack([self.dxb_dx, self.dxb_dv])
        bot = np.hstack([self.dvb_dx, self.dvb_dv])
        return np.vstack([top, mid, bot])


def exit_derivatives(domain: LevelSetDomain, field: FieldSpec, state: PhaseState,
                     settings: Optional[IntegratorSettings] = None) -> ExitDerivatives:
    """
    Derivatives of (t_b, x_b, v_b) in (x, v).

    The variational system is integrated backward to the wall together with
    the trajectory, giving dX/dz and dV/dz at s = t - t_b; then
        dt_b/dz = n . dX/dz / (n . v_b)
        dx_b/dz = dX/dz - v_b (dt_b/dz)
        dv_b/dz = dV/dz - E(t - t_b, x_b) (dt_b/dz)

    Raises:
        GrazingSingularity: |n(x_b).v_b| below the grazing tolerance
    """
    settings = settings or DEFAULT_SETTINGS
    rec, y = _exit(domain, field, state, -1, settings, None,
                   augment=variational_augment(field), extra0=np.eye(6).ravel())
    if rec.grazing:
        raise GrazingSingularity(f"n(x_b).v_b = {rec.normal_component:.3e} at the exit")
    M = y[6:].reshape(6, 6)
    n = outward_normal(domain, rec.exit_point)
    dtb = n @ M[:3] / rec.normal_component
    E_b = field.value(rec.clock, rec.exit_point)
    dXb = M[:3] - np.outer(rec.exit_velocity, dtb)
    dVb = M[3:] - np.outer(E_b, dtb)
    return ExitDerivatives(dtb_dx=dtb[:3], dtb_dv=dtb[3:], dxb_dx=dXb[:, :3], dxb_dv=dXb[:, 3:],
                           dvb_dx=dVb[:, :3], dvb_dv=dVb[:, 3:], record=rec)


def fd_exit_derivatives(domain: LevelSetDomain, field: FieldSpec, state: PhaseState,
                        settings: Optional[IntegratorSettings] = None) -> np.ndarray:
    """Central-difference 7x6 derivative of (t_b, x_b, v_b) in (x, v)."""
    settings = settings or DEFAULT_SETTINGS
    h = settings.fd_step(domain)
    z0 = np.concatenate([state.x, state.v])
    out = np.empty((7, 6))

    def image(z):
        r = backward_exit(domain, field, PhaseState(state.t, z[:3], z[3:]), settings)
        return np.concatenate([[r.exit_time], r.exit_point, r.exit_velocity])

    for j in range(6):
        dz = np.zeros(6)
        dz[j] = h
        out[:, j] = (image(z0 + dz) - image(z0 - dz)) / (2.0 * h)
    return out


@dataclass
class ArcLengthCheck:
    lhs: float
    rhs: float
    passed: bool

    def to_dict(self) -> Dict:
        return {'lhs': self.lhs, 'rhs': self.rhs, 'passed': self.passed}


def arc_length_bound_check(domain: LevelSetDomain, field: FieldSpec, state: PhaseState,
                           e_sup: Optional[float] = None,
                           settings: Optional[IntegratorSettings] = None) -> ArcLengthCheck:
    """
    lhs = int_{max(0, t - t_b)}^{t} |V(s)| ds,  rhs = 5 t (|E|_inf + D) + 4 D.
    """
    if e_sup is None:
        e_sup = field_norms(domain, field, n_samples=256).e_sup
    df = sample_trajectory(domain, field, state, 0.0, settings)
    speed = np.linalg.norm(df[['v1', 'v2', 'v3']].to_numpy(), axis=-1)
    s = df['s'].to_numpy()[::-1]
    lhs = float(simpson(speed[::-1], x=s)) if len(s) > 2 else float(trapezoid(speed[::-1], x=s)) if len(s) > 1 else 0.0
    D = domain.diameter
    rhs = 5.0 * state.t * (e_sup + D) + 4.0 * D
    return ArcLengthCheck(lhs=lhs, rhs=rhs, passed=lhs < rhs)
