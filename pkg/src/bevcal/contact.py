"""Hertz-Mindlin pair laws for monodisperse spheres.

These are the readable, per-contact forms of the force model. The compiled
step kernel in :mod:`bevcal.dem` evaluates the same expressions inline over
the whole contact list; the tests check one against the other.

Sign conventions follow the pair ``(i, j)``: the unit normal ``n`` points
from body ``i`` to body ``j`` and the relative velocity is that of ``j``
seen from ``i``. Forces returned by :func:`normal_force` and
:func:`tangential_force` are the forces exerted on ``j``; body ``i``
receives the exact negation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

OMEGA_EPS = 1e-8  # rad/s; below this the rolling-torque direction is undefined


class DegenerateContactError(ValueError):
    """Two sphere centres coincide, so no contact normal exists."""


class ContactContractError(ValueError):
    """A pair law was evaluated outside its domain (e.g. no overlap)."""


@dataclass(frozen=True)
class MaterialParams:
    k_n: float = 1.0e4
    k_t: float = 1.0e4
    gamma_n: float = 1.0e4
    gamma_t: float = 2.0e3
    mu_s: float = 0.9
    mu_r: float = 0.9
    f_c: float = 0.0
    radius: float = 0.005
    density: float = 2650.0

    def __post_init__(self):
        for name in ("k_n", "k_t", "gamma_n", "gamma_t", "mu_s", "mu_r", "f_c"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.radius <= 0 or self.density <= 0:
            raise ValueError("radius and density must be > 0")

    @property
    def mass(self) -> float:
        return 4.0 / 3.0 * math.pi * self.radius**3 * self.density

    @property
    def inertia(self) -> float:
        return 0.4 * self.mass * self.radius**2

    def weight(self, g: float = 9.81) -> float:
        return self.mass * g

    def with_cohesion_ratio(self, ratio: float, g: float = 9.81) -> "MaterialParams":
        """Copy with ``f_c`` set to ``ratio`` times one grain's weight."""
        from dataclasses import replace

        return replace(self, f_c=ratio * self.weight(g))


def overlap(pos_i, pos_j, r_i: float, r_j: float) -> float:
    """Geometric overlap ``r_i + r_j - |pos_j - pos_i|`` (negative when apart)."""
    d = float(np.linalg.norm(np.asarray(pos_j, float) - np.asarray(pos_i, float)))
    if d == 0.0:
        raise DegenerateContactError("coincident sphere centres")
    return r_i + r_j - d


def effective_pair(r_i: float, r_j: float, m_i: float, m_j: float) -> tuple[float, float]:
    """Effective radius and mass; pass ``math.inf`` for a rigid implement."""
    if min(r_i, r_j, m_i, m_j) <= 0:
        raise ValueError("radii and masses must be > 0")
    return 1.0 / (1.0 / r_i + 1.0 / r_j), 1.0 / (1.0 / m_i + 1.0 / m_j)


def relative_velocities(n, v_i, w_i, dr_ij, v_j, w_j, dr_ji):
    """Split the contact-point velocity of ``j`` relative to ``i`` into (v_n, v_t).

    ``dr_ij`` runs from the centre of ``i`` to the contact point, ``dr_ji``
    from the centre of ``j`` to the same point.
    """
    n = np.asarray(n, float)
    v = (np.asarray(v_j, float) + np.cross(w_j, dr_ji)) - (
        np.asarray(v_i, float) + np.cross(w_i, dr_ij)
    )
    v_n = np.dot(v, n) * n
    return v_n, v - v_n


def normal_force(delta: float, r_eff: float, m_eff: float, v_n, n, params: MaterialParams):
    """Hertzian spring-dashpot normal force on ``j``, plus attractive cohesion."""
    if delta <= 0:
        raise ContactContractError(f"normal_force needs overlap > 0, got {delta!r}")
    n = np.asarray(n, float)
    s = math.sqrt(delta / (2.0 * r_eff))
    return s * (params.k_n * delta * n - params.gamma_n * m_eff * np.asarray(v_n, float)) - params.f_c * n


def update_tangential_displacement(u_prev, v_t, n, delta: float, dt: float, params: MaterialParams):
    """Advance the stored tangential spring, re-project it, then apply the Coulomb cap."""
    n = np.asarray(n, float)
    u_hat = np.asarray(u_prev, float) + np.asarray(v_t, float) * dt
    u = u_hat - np.dot(n, u_hat) * n
    mag = float(np.linalg.norm(u))
    if params.k_t > 0 and mag > 0:
        cap = params.mu_s * params.k_n * delta / params.k_t
        if mag > cap:
            u = u * (cap / mag)
    return u


def tangential_force(delta: float, r_eff: float, m_eff: float, v_t, u_t, params: MaterialParams):
    s = math.sqrt(delta / (2.0 * r_eff))
    return s * (-params.k_t * np.asarray(u_t, float) - params.gamma_t * m_eff * np.asarray(v_t, float))


def rolling_torque(w_i, w_j, r_eff: float, f_n, params: MaterialParams):
    """Rolling-resistance torque magnitude laid along ``w_i - w_j``.

    Body ``i`` receives the negation (the torque resists relative spin) and
    ``j`` receives this vector.
    """
    w_rel = np.asarray(w_i, float) - np.asarray(w_j, float)
    mag = float(np.linalg.norm(w_rel))
    if mag < OMEGA_EPS:
        return np.zeros(3)
    return w_rel / mag * params.mu_r * r_eff * float(np.linalg.norm(f_n))


def stable_dt(params: MaterialParams, safety: float = 1.0) -> float:
    """Recommended step, ``0.1 * safety * sqrt(m / k_n)``."""
    return 0.1 * safety * critical_dt(params)


def critical_dt(params: MaterialParams) -> float:
    """Hard upper bound on the step accepted by :func:`bevcal.dem.step`."""
    if params.k_n == 0:
        return math.inf
    return math.sqrt(params.mass / params.k_n)
