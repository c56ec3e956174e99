"""Penalty DEM for monodisperse spheres with rigid implements.

One call to :func:`step` does: grid broad phase and implement narrow
phase, tangential-history lookup in the :class:`ContactLedger`, a compiled
pass over the sorted contact list accumulating Hertz-Mindlin forces,
torques and implement wrenches, then a semi-implicit Euler update of the
particles and implements.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from numba import njit

from .contact import MaterialParams, critical_dt
from .implements import RigidImplement

log = logging.getLogger(__name__)

SNAPSHOT_HEADER = "id,x,y,z,vx,vy,vz,wx,wy,wz"
WRENCH_HEADER = "t,fx,fy,fz,tx,ty,tz"
CONTACTS_HEADER = "key,ux,uy,uz,nx,ny,nz,overlap"


class SimulationError(RuntimeError):
    pass


@dataclass
class ParticleSystem:
    positions: np.ndarray
    velocities: np.ndarray | None = None
    angular_velocities: np.ndarray | None = None
    material: MaterialParams = field(default_factory=MaterialParams)
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    # tangential spring history, carried from one scene to the next so a settled
    # bed stays settled; implement keys assume the same walls come first
    contacts: "ContactLedger | None" = None

    def __post_init__(self):
        self.positions = np.array(self.positions, dtype=float).reshape(-1, 3)
        n = len(self.positions)
        self.velocities = (np.zeros((n, 3)) if self.velocities is None
                           else np.array(self.velocities, dtype=float).reshape(-1, 3))
        self.angular_velocities = (np.zeros((n, 3)) if self.angular_velocities is None
                                   else np.array(self.angular_velocities, dtype=float).reshape(-1, 3))
        self.gravity = np.array(self.gravity, dtype=float)
        if not (len(self.velocities) == len(self.angular_velocities) == n):
            raise ValueError("positions, velocities and angular_velocities differ in length")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def mass(self) -> float:
        return self.material.mass

    @property
    def inertia(self) -> float:
        return self.material.inertia

    @property
    def radius(self) -> float:
        return self.material.radius

    def copy(self) -> "ParticleSystem":
        return ParticleSystem(self.positions.copy(), self.velocities.copy(),
                              self.angular_velocities.copy(), self.material, self.gravity.copy(),
                              None if self.contacts is None else self.contacts.copy())

    def kinetic_energy(self) -> np.ndarray:
        """Per-particle translational + rotational kinetic energy (J)."""
        return 0.5 * self.mass * np.einsum("ij,ij->i", self.velocities, self.velocities) + \
            0.5 * self.inertia * np.einsum("ij,ij->i", self.angular_velocities, self.angular_velocities)

    def mean_kinetic_energy(self) -> float:
        return float(self.kinetic_energy().mean()) if len(self) else 0.0

    def momentum(self) -> np.ndarray:
        return self.mass * self.velocities.sum(axis=0)


class ContactCandidate(NamedTuple):
    kind: str
    i: int
    j: int
    normal: np.ndarray
    overlap: float
    point: np.ndarray


@dataclass
class Contacts:
    """Sorted contact list as parallel arrays.

    ``j`` is a particle index for particle-particle contacts and ``-1``
    otherwise; ``implement``/``feature`` identify the implement side.
    """

    key: np.ndarray
    i: np.ndarray
    j: np.ndarray
    implement: np.ndarray
    feature: np.ndarray
    normal: np.ndarray
    overlap: np.ndarray
    point: np.ndarray
    body_velocity: np.ndarray

    def __len__(self) -> int:
        return len(self.key)

    def __iter__(self) -> Iterator[ContactCandidate]:
        for k in range(len(self)):
            pp = self.implement[k] < 0
            yield ContactCandidate("particle-particle" if pp else "particle-implement",
                                   int(self.i[k]), int(self.j[k] if pp else self.implement[k]),
                                   self.normal[k], float(self.overlap[k]), self.point[k])

    def pairs(self) -> set[tuple[int, int]]:
        pp = self.implement < 0
        return set(zip(self.i[pp].tolist(), self.j[pp].tolist()))


class ContactLedger:
    """Tangential spring history keyed by contact id.

    Keys come from :func:`contact_key_pp` and :func:`contact_key_implement`
    and are kept sorted, which makes lookup a linear merge.
    """

    def __init__(self):
        self.keys = np.zeros(0, np.int64)
        self.u_t = np.zeros((0, 3))
        self.normal = np.zeros((0, 3))
        self.overlap = np.zeros(0)

    def __len__(self) -> int:
        return len(self.keys)

    def copy(self) -> "ContactLedger":
        other = ContactLedger()
        other.replace(self.keys.copy(), self.u_t.copy(), self.normal.copy(), self.overlap.copy())
        return other

    def __contains__(self, key) -> bool:
        k = np.searchsorted(self.keys, key)
        return bool(k < len(self.keys) and self.keys[k] == key)

    def get(self, key, default=None):
        k = np.searchsorted(self.keys, key)
        if k < len(self.keys) and self.keys[k] == key:
            return self.u_t[k]
        return default

    def as_dict(self) -> dict[int, np.ndarray]:
        return {int(k): u for k, u in zip(self.keys, self.u_t)}

    def lookup(self, keys: np.ndarray) -> np.ndarray:
        """Stored displacement for each key (zeros for new contacts)."""
        return _merge_lookup(self.keys, self.u_t, np.ascontiguousarray(keys, np.int64))

    def replace(self, keys, u_t, normal, overlap) -> None:
        # contacts absent from ``keys`` are dropped: no history across separations
        self.keys, self.u_t, self.normal, self.overlap = keys, u_t, normal, overlap


# ---------------------------------------------------------------- broad phase
@njit(cache=True)
def _grid_pairs(pos, cutoff):
    """All pairs closer than ``cutoff``, sorted by (i, j), via a uniform cell grid."""
    n = pos.shape[0]
    if n < 2:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    lo = np.empty(3)
    hi = np.empty(3)
    for d in range(3):
        lo[d] = pos[:, d].min()
        hi[d] = pos[:, d].max()
    h = cutoff
    budget = max(8 * n, 4096)
    nx = int((hi[0] - lo[0]) / h) + 1
    ny = int((hi[1] - lo[1]) / h) + 1
    nz = int((hi[2] - lo[2]) / h) + 1
    while nx * ny * nz > budget:
        h *= 1.5
        nx = int((hi[0] - lo[0]) / h) + 1
        ny = int((hi[1] - lo[1]) / h) + 1
        nz = int((hi[2] - lo[2]) / h) + 1
    ncell = nx * ny * nz
    cell = np.empty(n, np.int64)
    start = np.zeros(ncell + 1, np.int64)
    for i in range(n):
        ix = min(int((pos[i, 0] - lo[0]) / h), nx - 1)
        iy = min(int((pos[i, 1] - lo[1]) / h), ny - 1)
        iz = min(int((pos[i, 2] - lo[2]) / h), nz - 1)
        cell[i] = ix + nx * (iy + ny * iz)
        start[cell[i] + 1] += 1
    for c in range(ncell):
        start[c + 1] += start[c]
    fill = start[:-1].copy()
    order = np.empty(n, np.int64)
    for i in range(n):
        order[fill[cell[i]]] = i
        fill[cell[i]] += 1
    c2 = cutoff * cutoff
    cap = 16 * n
    pi = np.empty(cap, np.int64)
    pj = np.empty(cap, np.int64)
    m = 0
    for i in range(n):
        c = cell[i]
        iz = c // (nx * ny)
        iy = (c // nx) % ny
        ix = c % nx
        for z in range(max(iz - 1, 0), min(iz + 2, nz)):
            for y in range(max(iy - 1, 0), min(iy + 2, ny)):
                for x in range(max(ix - 1, 0), min(ix + 2, nx)):
                    cc = x + nx * (y + ny * z)
                    for s in range(start[cc], start[cc + 1]):
                        j = order[s]
                        if j <= i:
                            continue
                        dx = pos[j, 0] - pos[i, 0]
                        dy = pos[j, 1] - pos[i, 1]
                        dz = pos[j, 2] - pos[i, 2]
                        d2 = dx * dx + dy * dy + dz * dz
                        if d2 < c2:
                            if d2 == 0.0:
                                raise ValueError("coincident particle centres")
                            if m == cap:
                                cap *= 2
                                pi2 = np.empty(cap, np.int64)
                                pj2 = np.empty(cap, np.int64)
                                pi2[:m] = pi[:m]
                                pj2[:m] = pj[:m]
                                pi = pi2
                                pj = pj2
                            pi[m] = i
                            pj[m] = j
                            m += 1
    pi = pi[:m]
    pj = pj[:m]
    # pairs are grouped by i already; order partners within each group
    a = 0
    while a < m:
        b = a
        while b < m and pi[b] == pi[a]:
            b += 1
        for s in range(a + 1, b):
            v = pj[s]
            t = s - 1
            while t >= a and pj[t] > v:
                pj[t + 1] = pj[t]
                t -= 1
            pj[t + 1] = v
        a = b
    return pi, pj


@njit(cache=True)
def _narrow_pairs(pos, ci, cj, radius):
    """Filter candidate pairs to overlapping ones and build their geometry."""
    k = ci.shape[0]
    keep = np.empty(k, np.int64)
    m = 0
    c2 = 4.0 * radius * radius
    for s in range(k):
        i = ci[s]
        j = cj[s]
        dx = pos[j, 0] - pos[i, 0]
        dy = pos[j, 1] - pos[i, 1]
        dz = pos[j, 2] - pos[i, 2]
        d2 = dx * dx + dy * dy + dz * dz
        if d2 < c2:
            if d2 == 0.0:
                raise ValueError("coincident particle centres")
            keep[m] = s
            m += 1
    ii = np.empty(m, np.int64)
    jj = np.empty(m, np.int64)
    nrm = np.empty((m, 3))
    delta = np.empty(m)
    pt = np.empty((m, 3))
    for t in range(m):
        s = keep[t]
        i = ci[s]
        j = cj[s]
        dx = pos[j, 0] - pos[i, 0]
        dy = pos[j, 1] - pos[i, 1]
        dz = pos[j, 2] - pos[i, 2]
        d = math.sqrt(dx * dx + dy * dy + dz * dz)
        ii[t] = i
        jj[t] = j
        nrm[t, 0] = dx / d
        nrm[t, 1] = dy / d
        nrm[t, 2] = dz / d
        delta[t] = 2.0 * radius - d
        a = radius - 0.5 * delta[t]
        pt[t, 0] = pos[i, 0] + a * nrm[t, 0]
        pt[t, 1] = pos[i, 1] + a * nrm[t, 1]
        pt[t, 2] = pos[i, 2] + a * nrm[t, 2]
    return ii, jj, nrm, delta, pt


@njit(cache=True)
def _merge_lookup(old_keys, old_u, new_keys):
    """Stored displacement for each (sorted) new key; zeros when absent."""
    out = np.zeros((new_keys.shape[0], 3))
    a = 0
    na = old_keys.shape[0]
    for s in range(new_keys.shape[0]):
        key = new_keys[s]
        while a < na and old_keys[a] < key:
            a += 1
        if a < na and old_keys[a] == key:
            out[s, 0] = old_u[a, 0]
            out[s, 1] = old_u[a, 1]
            out[s, 2] = old_u[a, 2]
    return out


def _feature_offsets(implements: Sequence[RigidImplement]) -> np.ndarray:
    sizes = [imp.n_features for imp in implements]
    return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)


def contact_key_pp(i, j, n: int):
    return np.asarray(i, np.int64) * n + np.asarray(j, np.int64)


def contact_key_implement(i, feature, implement: int, offsets: np.ndarray, n: int):
    """Implement-contact keys sort after all particle pairs, by (implement, i, feature)."""
    nf = int(offsets[implement + 1] - offsets[implement])
    return (n * n + int(offsets[implement]) * n
            + np.asarray(i, np.int64) * nf + np.asarray(feature, np.int64))


class BroadPhase:
    """Verlet candidate lists with a skin.

    Pairs within ``2r + skin`` and particles within ``skin`` of each
    implement are cached; the cache is rebuilt once the largest particle
    displacement plus the largest implement surface displacement since the
    last build could let an unlisted pair reach contact.
    """

    def __init__(self, skin: float | None = None):
        self.skin = skin
        self.builds = 0
        self._ref = None

    def _stale(self, x, implements) -> bool:
        if self._ref is None or len(self._ref) != len(x) or len(implements) != len(self._imp_ref):
            return True
        disp = np.sqrt(np.max(np.einsum("ij,ij->i", x - self._ref, x - self._ref))) if len(x) else 0.0
        if 2.0 * disp > self._skin:
            return True
        for imp, (p0, r0) in zip(implements, self._imp_ref):
            move = np.linalg.norm(imp.position - p0)
            rot = np.linalg.norm(imp.rotation - r0, 2) * _extent(imp)
            if disp + move + rot > self._skin:
                return True
        return False

    def update(self, system: "ParticleSystem", implements: Sequence[RigidImplement]):
        x = system.positions
        r = system.radius
        self._skin = self.skin if self.skin is not None else 0.2 * r
        if self._stale(x, implements):
            self.cand_i, self.cand_j = _grid_pairs(x, 2.0 * r + self._skin)
            self.imp_cand = []
            for imp in implements:
                idx, *_ = imp.particle_contacts(x, r + self._skin)
                self.imp_cand.append(np.unique(idx))
            self._ref = x.copy()
            self._imp_ref = [(imp.position.copy(), imp.rotation.copy()) for imp in implements]
            self.builds += 1
        return self


def _extent(imp: RigidImplement) -> float:
    shape = imp.shape
    return float(getattr(shape, "bounding_radius", 0.0)) if not hasattr(shape, "normal") else 1e3


def neighbor_pairs(system: ParticleSystem, implements: Sequence[RigidImplement] = (),
                   broad: BroadPhase | None = None) -> Contacts:
    """All overlapping particle pairs and particle-implement contacts.

    Without ``broad`` a fresh cell grid at cutoff ``2r`` is used; with it
    the cached Verlet candidates are filtered instead. Contacts come back
    sorted by key: particle pairs by (i, j), then implement contacts by
    (implement, i, feature).
    """
    x = system.positions
    n = len(x)
    r = system.radius
    offsets = _feature_offsets(implements)
    if broad is None:
        ci, cj = _grid_pairs(x, 2.0 * r)
        imp_sets = [None] * len(implements)
    else:
        broad.update(system, implements)
        ci, cj = broad.cand_i, broad.cand_j
        imp_sets = broad.imp_cand
    ii, jj, nrm, delta, pt = _narrow_pairs(x, ci, cj, r)
    parts = [(contact_key_pp(ii, jj, n), ii, jj, np.full(len(ii), -1, np.int64),
              np.zeros(len(ii), np.int64), nrm, delta, pt, np.zeros((len(ii), 3)))]
    for m, imp in enumerate(implements):
        sub = imp_sets[m]
        if sub is None:
            idx, nn, dl, p, feat = imp.particle_contacts(x, r)
        else:
            if len(sub) == 0:
                continue
            idx, nn, dl, p, feat = imp.particle_contacts(x[sub], r)
            idx = sub[idx]
        if len(idx) == 0:
            continue
        parts.append((contact_key_implement(idx, feat, m, offsets, n), idx, np.full(len(idx), -1, np.int64),
                      np.full(len(idx), m, np.int64), feat, nn, dl, p, imp.surface_velocity(p)))
    if len(parts) == 1:
        return Contacts(*parts[0])
    cols = [np.concatenate([p[c] for p in parts]) for c in range(9)]
    return Contacts(*cols)


# ---------------------------------------------------------------- force pass
@njit(cache=True)
def _force_kernel(pos, vel, angvel, mass, inertia, radius,
                  k_n, k_t, g_n, g_t, mu_s, mu_r, f_c, implement_cohesion, dt, roll_clamp,
                  ci, cj, cimp, cn, cdelta, cpt, cvb, u_prev, ncount,
                  imp_center, imp_omega, force, torque, u_new, imp_wrench):
    ncon = ci.shape[0]
    for k in range(ncon):
        i = ci[k]
        j = cj[k]
        m_idx = cimp[k]
        nx, ny, nz = cn[k, 0], cn[k, 1], cn[k, 2]
        delta = cdelta[k]
        px, py, pz = cpt[k, 0], cpt[k, 1], cpt[k, 2]
        rix = px - pos[i, 0]
        riy = py - pos[i, 1]
        riz = pz - pos[i, 2]
        wix, wiy, wiz = angvel[i, 0], angvel[i, 1], angvel[i, 2]
        vix = vel[i, 0] + wiy * riz - wiz * riy
        viy = vel[i, 1] + wiz * rix - wix * riz
        viz = vel[i, 2] + wix * riy - wiy * rix
        if m_idx < 0:
            rjx = px - pos[j, 0]
            rjy = py - pos[j, 1]
            rjz = pz - pos[j, 2]
            wjx, wjy, wjz = angvel[j, 0], angvel[j, 1], angvel[j, 2]
            vjx = vel[j, 0] + wjy * rjz - wjz * rjy
            vjy = vel[j, 1] + wjz * rjx - wjx * rjz
            vjz = vel[j, 2] + wjx * rjy - wjy * rjx
            r_eff = 0.5 * radius
            m_eff = 0.5 * mass
            i_eff = 0.5 * inertia
            fc = f_c
        else:
            rjx = rjy = rjz = 0.0
            wjx, wjy, wjz = imp_omega[m_idx, 0], imp_omega[m_idx, 1], imp_omega[m_idx, 2]
            vjx, vjy, vjz = cvb[k, 0], cvb[k, 1], cvb[k, 2]
            r_eff = radius
            m_eff = mass
            i_eff = inertia
            fc = f_c if implement_cohesion else 0.0
        vx = vjx - vix
        vy = vjy - viy
        vz = vjz - viz
        vn = vx * nx + vy * ny + vz * nz
        vnx, vny, vnz = vn * nx, vn * ny, vn * nz
        vtx, vty, vtz = vx - vnx, vy - vny, vz - vnz
        s = math.sqrt(delta / (2.0 * r_eff))
        fnx = s * (k_n * delta * nx - g_n * m_eff * vnx) - fc * nx
        fny = s * (k_n * delta * ny - g_n * m_eff * vny) - fc * ny
        fnz = s * (k_n * delta * nz - g_n * m_eff * vnz) - fc * nz
        # tangential spring: accumulate, re-project, Coulomb cap
        ux = u_prev[k, 0] + vtx * dt
        uy = u_prev[k, 1] + vty * dt
        uz = u_prev[k, 2] + vtz * dt
        un = ux * nx + uy * ny + uz * nz
        ux -= un * nx
        uy -= un * ny
        uz -= un * nz
        umag = math.sqrt(ux * ux + uy * uy + uz * uz)
        if k_t > 0.0 and umag > 0.0:
            cap = mu_s * k_n * delta / k_t
            if umag > cap:
                sc = cap / umag
                ux *= sc
                uy *= sc
                uz *= sc
        u_new[k, 0] = ux
        u_new[k, 1] = uy
        u_new[k, 2] = uz
        ftx = s * (-k_t * ux - g_t * m_eff * vtx)
        fty = s * (-k_t * uy - g_t * m_eff * vty)
        ftz = s * (-k_t * uz - g_t * m_eff * vtz)
        fx = fnx + ftx
        fy = fny + fty
        fz = fnz + ftz
        # rolling resistance along w_i - w_j
        wrx = wix - wjx
        wry = wiy - wjy
        wrz = wiz - wjz
        wmag = math.sqrt(wrx * wrx + wry * wry + wrz * wrz)
        mrx = mry = mrz = 0.0
        if wmag >= 1e-8 and mu_r > 0.0:
            mag = mu_r * r_eff * math.sqrt(fnx * fnx + fny * fny + fnz * fnz)
            if roll_clamp:
                # share the stopping torque among all contacts of the busier body
                busy = ncount[i]
                if m_idx < 0 and ncount[j] > busy:
                    busy = ncount[j]
                lim = i_eff * wmag / (dt * busy)
                if mag > lim:
                    mag = lim
            mrx = wrx / wmag * mag
            mry = wry / wmag * mag
            mrz = wrz / wmag * mag
        # body i gets the negation of the force on j
        force[i, 0] -= fx
        force[i, 1] -= fy
        force[i, 2] -= fz
        torque[i, 0] += -(riy * ftz - riz * fty) - mrx
        torque[i, 1] += -(riz * ftx - rix * ftz) - mry
        torque[i, 2] += -(rix * fty - riy * ftx) - mrz
        if m_idx < 0:
            force[j, 0] += fx
            force[j, 1] += fy
            force[j, 2] += fz
            torque[j, 0] += (rjy * ftz - rjz * fty) + mrx
            torque[j, 1] += (rjz * ftx - rjx * ftz) + mry
            torque[j, 2] += (rjx * fty - rjy * ftx) + mrz
        else:
            ax = px - imp_center[m_idx, 0]
            ay = py - imp_center[m_idx, 1]
            az = pz - imp_center[m_idx, 2]
            imp_wrench[m_idx, 0] += fx
            imp_wrench[m_idx, 1] += fy
            imp_wrench[m_idx, 2] += fz
            imp_wrench[m_idx, 3] += ay * fz - az * fy + mrx
            imp_wrench[m_idx, 4] += az * fx - ax * fz + mry
            imp_wrench[m_idx, 5] += ax * fy - ay * fx + mrz


def _contact_counts(c: Contacts, n: int) -> np.ndarray:
    counts = np.bincount(c.i, minlength=n)
    pp = c.j >= 0
    if pp.any():
        counts = counts + np.bincount(c.j[pp], minlength=n)
    return counts.astype(np.int64)


@dataclass
class StepOptions:
    """Knobs outside the pair law itself."""

    rolling_clamp: bool = True
    implement_cohesion: bool = False
    check_finite: bool = True


def contact_forces(system: ParticleSystem, ledger: ContactLedger, implements: Sequence[RigidImplement],
                   dt: float, options: StepOptions | None = None, broad: BroadPhase | None = None):
    """Evaluate all contacts without integrating.

    Returns ``(force, torque, wrenches, contacts, u_new)``; ``wrenches`` is
    ``(n_implements, 6)`` with the force and torque (about the implement
    position) the particles exert on each implement.
    """
    opt = options or StepOptions()
    mat = system.material
    c = neighbor_pairs(system, implements, broad)
    u_prev = ledger.lookup(c.key)
    n = len(system)
    force = np.zeros((n, 3))
    torque = np.zeros((n, 3))
    u_new = np.zeros((len(c), 3))
    wrench = np.zeros((len(implements), 6))
    centers = np.array([imp.position for imp in implements]).reshape(-1, 3)
    omegas = np.array([imp.angular_velocity for imp in implements]).reshape(-1, 3)
    _force_kernel(system.positions, system.velocities, system.angular_velocities,
                  mat.mass, mat.inertia, mat.radius,
                  mat.k_n, mat.k_t, mat.gamma_n, mat.gamma_t, mat.mu_s, mat.mu_r, mat.f_c,
                  opt.implement_cohesion, dt, opt.rolling_clamp,
                  c.i, c.j, c.implement, c.normal, c.overlap, c.point, c.body_velocity, u_prev,
                  _contact_counts(c, n), centers, omegas, force, torque, u_new, wrench)
    return force, torque, wrench, c, u_new


def step(system: ParticleSystem, ledger: ContactLedger, implements: Sequence[RigidImplement],
         dt: float, options: StepOptions | None = None, broad: BroadPhase | None = None) -> np.ndarray:
    """Advance particles and implements by ``dt`` in place.

    Pass a persistent :class:`BroadPhase` to reuse Verlet candidate lists
    across steps; without one every step rebuilds the cell grid. Returns the ``(n_implements, 6)`` wrench array (force, torque about the
    implement position) that the soil applied on each implement during the
    step.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    bound = critical_dt(system.material)
    if dt > bound:
        raise SimulationError(f"dt={dt:g} exceeds the stability bound {bound:g}")
    opt = options or StepOptions()
    force, torque, wrench, c, u_new = contact_forces(system, ledger, implements, dt, opt, broad)
    ledger.replace(c.key, u_new, c.normal, c.overlap)
    mat = system.material
    _integrate(system.positions, system.velocities, system.angular_velocities, force, torque,
               1.0 / mat.mass, 1.0 / mat.inertia, system.gravity, dt)
    for m, imp in enumerate(implements):
        imp.advance(dt, wrench[m, :3], system.gravity)
    if opt.check_finite:
        _check_finite(system)
    return wrench


@njit(cache=True)
def _integrate(x, v, w, f, t, inv_m, inv_i, g, dt):
    # semi-implicit Euler: velocities first, positions from the new velocities
    for i in range(x.shape[0]):
        for d in range(3):
            v[i, d] += dt * (f[i, d] * inv_m + g[d])
            w[i, d] += dt * (t[i, d] * inv_i)
            x[i, d] += dt * v[i, d]


def _check_finite(system: ParticleSystem) -> None:
    if np.isfinite(system.positions.sum() + system.velocities.sum() + system.angular_velocities.sum()):
        return
    bad = ~(np.isfinite(system.positions).all(1) & np.isfinite(system.velocities).all(1)
            & np.isfinite(system.angular_velocities).all(1))
    if bad.any():
        raise SimulationError(f"non-finite state at particle {int(np.flatnonzero(bad)[0])}")


# ---------------------------------------------------------------- packing, IO
def lattice_pack(count: int, lo, hi, radius: float, spacing: float = 2.2, jitter: float = 0.1,
                 seed: int = 0) -> np.ndarray:
    """``count`` centres on a jittered cubic lattice filling the box upward from ``lo``."""
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    a = spacing * radius
    nx = int((hi[0] - lo[0] - 2 * radius) // a) + 1
    ny = int((hi[1] - lo[1] - 2 * radius) // a) + 1
    if nx < 1 or ny < 1:
        raise ValueError("box narrower than one particle")
    layers = -(-count // (nx * ny))
    if lo[2] + radius + (layers - 1) * a > hi[2] - radius:
        raise ValueError(f"{count} particles do not fit: need {layers} layers")
    k = np.arange(count)
    ix, iy, iz = k % nx, (k // nx) % ny, k // (nx * ny)
    pos = lo + radius + np.stack([ix, iy, iz], axis=1) * a
    # centre the lattice footprint in x, y
    pos[:, 0] += 0.5 * ((hi[0] - lo[0] - 2 * radius) - (nx - 1) * a)
    pos[:, 1] += 0.5 * ((hi[1] - lo[1] - 2 * radius) - (ny - 1) * a)
    rng = np.random.default_rng(seed)
    slack = 0.5 * (a - 2 * radius) * jitter / 0.1 if jitter else 0.0
    if slack:
        pos += rng.uniform(-1.0, 1.0, pos.shape) * min(slack, 0.49 * (a - 2 * radius))
    return pos


def box_walls(lo, hi) -> list[RigidImplement]:
    """Floor and four side walls of an open-top bin."""
    from .implements import HalfSpace

    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    specs = [(lo, (0, 0, 1), "floor"), (lo, (1, 0, 0), "wall_x0"), (hi, (-1, 0, 0), "wall_x1"),
             (lo, (0, 1, 0), "wall_y0"), (hi, (0, -1, 0), "wall_y1")]
    return [RigidImplement(HalfSpace(tuple(float(v) for v in nrm)), position=p, name=name)
            for p, nrm, name in specs]


def contacts_path(path: str | Path) -> Path:
    """Sidecar file holding the contact history of a snapshot."""
    path = Path(path)
    return path.with_name(path.stem + "_contacts.csv")


def save_snapshot(system: ParticleSystem, path: str | Path) -> Path | None:
    """Write the particle rows, plus the contact sidecar when there is history.

    Returns the sidecar path if one was written.
    """
    rows = [SNAPSHOT_HEADER]
    data = np.hstack([system.positions, system.velocities, system.angular_velocities])
    for k, row in enumerate(data):
        rows.append(str(k) + "," + ",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(rows) + "\n")
    side = contacts_path(path)
    if system.contacts is None or len(system.contacts) == 0:
        side.unlink(missing_ok=True)
        return None
    c = system.contacts
    rows = [CONTACTS_HEADER]
    for k, u, nrm, d in zip(c.keys, c.u_t, c.normal, c.overlap):
        rows.append(f"{int(k)}," + ",".join(repr(float(v)) for v in (*u, *nrm, d)))
    side.write_text("\n".join(rows) + "\n")
    return side


def load_snapshot(path: str | Path, material: MaterialParams, gravity=(0.0, 0.0, -9.81)) -> ParticleSystem:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != SNAPSHOT_HEADER:
        raise ValueError(f"{path}: expected header {SNAPSHOT_HEADER!r}")
    data = np.array([[float(v) for v in ln.split(",")[1:]] for ln in lines[1:] if ln.strip()]).reshape(-1, 9)
    system = ParticleSystem(data[:, 0:3], data[:, 3:6], data[:, 6:9], material, np.asarray(gravity, float))
    side = contacts_path(path)
    if side.is_file():
        lines = side.read_text().splitlines()
        if not lines or lines[0].strip() != CONTACTS_HEADER:
            raise ValueError(f"{side}: expected header {CONTACTS_HEADER!r}")
        rows = [ln.split(",") for ln in lines[1:] if ln.strip()]
        keys = np.array([int(r[0]) for r in rows], np.int64)
        vals = np.array([[float(v) for v in r[1:]] for r in rows]).reshape(-1, 7)
        system.contacts = ContactLedger()
        system.contacts.replace(keys, vals[:, 0:3], vals[:, 3:6], vals[:, 6])
    return system


class WrenchLog:
    """Collects ``t,fx,fy,fz,tx,ty,tz`` rows for one implement."""

    def __init__(self):
        self.rows: list[tuple[float, ...]] = []

    def record(self, t: float, wrench) -> None:
        self.rows.append((float(t), *map(float, wrench)))

    def array(self) -> np.ndarray:
        return np.array(self.rows).reshape(-1, 7)

    def save(self, path: str | Path) -> None:
        text = [WRENCH_HEADER] + [",".join(repr(v) for v in r) for r in self.rows]
        Path(path).write_text("\n".join(text) + "\n")


class Scene:
    """A particle system, its implements and the per-run solver state."""

    def __init__(self, system: ParticleSystem, implements: Sequence[RigidImplement], dt: float,
                 options: StepOptions | None = None):
        self.system = system
        self.implements = list(implements)
        self.dt = float(dt)
        self.options = options
        if system.contacts is None:
            system.contacts = ContactLedger()
        self.ledger = system.contacts
        self.broad = BroadPhase()
        self.time = 0.0
        self.steps = 0

    def advance(self, steps: int = 1) -> np.ndarray:
        """Run ``steps`` steps; returns the implement wrenches averaged over them."""
        total = np.zeros((len(self.implements), 6))
        for _ in range(steps):
            total += step(self.system, self.ledger, self.implements, self.dt, self.options, self.broad)
            self.steps += 1
            self.time = self.steps * self.dt
        return total / max(steps, 1)
