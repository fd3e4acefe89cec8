"""
Quadrature Rules Module

Shared node/weight sets: Gauss-Hermite velocity grids, Gauss-Legendre
intervals, product-Gauss sphere rules and half-space velocity rules in a
frame adapted to a wall normal.

All rules return (nodes, weights) with positive weights such that
sum(weights * h(nodes)) approximates the plain integral of h.
"""

import numpy as np
from numpy.polynomial import hermite_e, legendre
from typing import Optional, Tuple


def frame_from_normal(normal: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Deterministic right-handed tangents for unit normals.

    tau1 projects the coordinate axis least aligned with n (lowest index wins
    ties), tau2 = n x tau1, so tau1 x tau2 = n.

    Args:
        normal: unit normal(s), shape (..., 3)

    Returns:
        (tau1, tau2) with the same leading shape
    """
    n = np.asarray(normal, dtype=float)
    k = np.argmin(np.abs(n), axis=-1)
    axis = np.eye(3)[k]
    tau1 = axis - np.sum(axis * n, axis=-1, keepdims=True) * n
    tau1 = tau1 / np.linalg.norm(tau1, axis=-1, keepdims=True)
    tau2 = np.cross(n, tau1)
    return tau1, tau2


def gauss_legendre(n: int, a: float = -1.0, b: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre rule with n nodes on [a, b]."""
    x, w = legendre.leggauss(n)
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w


def gauss_hermite_velocity(n: int, v_max: Optional[float] = 8.0,
                           center: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Tensor Gauss-Hermite rule on R^3 adapted to a unit-variance Gaussian.

    The probabilists' weight e^{-x^2/2} is folded back into the weights, so the
    rule integrates plain functions: sum(W * h(v)) ~ int h(v) dv. Exact for
    h = Gaussian * polynomial of degree < 2n per axis. Nodes with |v - center|
    above v_max are dropped.

    Args:
        n: nodes per axis
        v_max: velocity cutoff (None keeps all nodes)
        center: optional shift of the grid

    Returns:
        nodes (N, 3), weights (N,)
    """
    x, w = hermite_e.hermegauss(n)
    w = w * np.exp(0.5 * x**2)
    X, Y, Z = np.meshgrid(x, x, x, indexing='ij')
    nodes = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=-1)
    weights = np.einsum('i,j,k->ijk', w, w, w).ravel()
    if v_max is not None:
        keep = np.linalg.norm(nodes, axis=-1) <= v_max
        nodes, weights = nodes[keep], weights[keep]
    if center is not None:
        nodes = nodes + np.asarray(center, dtype=float)
    return nodes, weights


def sphere_rule(n_polar: int, n_azimuth: int,
                axis: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Product-Gauss rule on S^2: Gauss-Legendre in cos(theta), uniform in phi.

    Weights sum to 4*pi. With `axis`, the polar axis is rotated onto it.
    """
    c, wc = gauss_legendre(n_polar)
    phi = 2.0 * np.pi * (np.arange(n_azimuth) + 0.5) / n_azimuth
    wphi = np.full(n_azimuth, 2.0 * np.pi / n_azimuth)
    C, P = np.meshgrid(c, phi, indexing='ij')
    s = np.sqrt(np.clip(1.0 - C**2, 0.0, None))
    local = np.stack([s * np.cos(P), s * np.sin(P), C], axis=-1).reshape(-1, 3)
    weights = np.outer(wc, wphi).ravel()
    if axis is not None:
        n = np.asarray(axis, dtype=float)
        n = n / np.linalg.norm(n)
        t1, t2 = frame_from_normal(n)
        local = local[:, :1] * t1 + local[:, 1:2] * t2 + local[:, 2:] * n
    return local, weights


def half_space_rule(normal: np.ndarray, n_normal: int = 24, n_tangential: int = 12,
                    v_max: float = 8.0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Velocity rule on {n.v > 0}: Gauss-Legendre in v_n on [0, v_max] and
    Gauss-Hermite in the two tangential components.

    Args:
        normal: unit normal n
        n_normal: Legendre nodes for the normal component
        n_tangential: Hermite nodes per tangential axis
        v_max: cutoff of the normal component

    Returns:
        nodes (N, 3), weights (N,)
    """
    n = np.asarray(normal, dtype=float)
    t1, t2 = frame_from_normal(n)
    vn, wn = gauss_legendre(n_normal, 0.0, v_max)
    x, w = hermite_e.hermegauss(n_tangential)
    w = w * np.exp(0.5 * x**2)
    A, B, N = np.meshgrid(x, x, vn, indexing='ij')
    weights = np.einsum('i,j,k->ijk', w, w, wn).ravel()
    nodes = (A.ravel()[:, None] * t1 + B.ravel()[:, None] * t2
             + N.ravel()[:, None] * n)
    return nodes, weights


def capped_half_space_rule(normal: np.ndarray, eps: float, n_normal: int = 24,
                           n_radial: int = 16, n_angle: int = 16) -> Tuple[np.ndarray, np.ndarray]:
    """
    Velocity rule on {n.v >= eps, |v| <= 1/eps}.

    The normal component runs over [eps, 1/eps]; for each v_n the tangential
    disc of radius sqrt(1/eps^2 - v_n^2) is covered in polar coordinates.
    """
    n = np.asarray(normal, dtype=float)
    t1, t2 = frame_from_normal(n)
    cap = 1.0 / eps
    vn, wn = gauss_legendre(n_normal, eps, cap)
    rho_unit, wrho_unit = gauss_legendre(n_radial, 0.0, 1.0)
    ang = 2.0 * np.pi * (np.arange(n_angle) + 0.5) / n_angle
    nodes, weights = [], []
    for a, wa in zip(vn, wn):
        radius = np.sqrt(max(cap**2 - a**2, 0.0))
        rho = radius * rho_unit
        wrho = radius * wrho_unit * rho
        R, T = np.meshgrid(rho, ang, indexing='ij')
        W = np.outer(wrho, np.full(n_angle, 2.0 * np.pi / n_angle)) * wa
        pts = (R * np.cos(T)).ravel()[:, None] * t1 + (R * np.sin(T)).ravel()[:, None] * t2 + a * n
        nodes.append(pts)
        weights.append(W.ravel())
    return np.concatenate(nodes), np.concatenate(weights)
