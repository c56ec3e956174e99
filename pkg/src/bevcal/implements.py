"""Rigid implements: walls, plates, annuli, wheels and triangle meshes.

Every implement carries a pose (world position of its reference point and a
rotation matrix taking local to world coordinates) and simple kinematics:
a prescribed linear/angular velocity, optionally with one free
translational degree of freedom driven by gravity on an attached mass plus
the soil reaction.

Solids of revolution (plate, annulus, cylinder wheel) are all the local-z
revolution of a rectangle ``[rho0, rho1] x [a0, a1]`` in the (radius,
axial) half-plane, so one closest-point routine and one ray caster serve
all three.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_EZ = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class HalfSpace:
    """Solid occupying ``(x - p) . normal <= 0``; ``normal`` is local."""

    normal: tuple = (0.0, 0.0, 1.0)
    n_features = 1


@dataclass(frozen=True)
class _Revolved:
    n_features = 1

    def profile(self) -> tuple[float, float, float, float]:
        raise NotImplementedError

    @property
    def bounding_radius(self) -> float:
        rho0, rho1, a0, a1 = self.profile()
        return float(np.hypot(rho1, max(abs(a0), abs(a1))))


@dataclass(frozen=True)
class Plate(_Revolved):
    """Flat circular plate; its axis (local z) is the plate normal."""

    radius: float
    thickness: float = 0.01

    def __post_init__(self):
        if self.radius <= 0 or self.thickness <= 0:
            raise ValueError("plate dimensions must be > 0")

    def profile(self):
        h = 0.5 * self.thickness
        return 0.0, self.radius, -h, h


@dataclass(frozen=True)
class Annulus(_Revolved):
    r_inner: float
    r_outer: float
    thickness: float = 0.15

    def __post_init__(self):
        if not 0 < self.r_inner < self.r_outer or self.thickness <= 0:
            raise ValueError("annulus needs 0 < r_inner < r_outer and thickness > 0")

    def profile(self):
        h = 0.5 * self.thickness
        return self.r_inner, self.r_outer, -h, h


@dataclass(frozen=True)
class Cylinder(_Revolved):
    """Cylinder wheel; the spin axis is local z."""

    radius: float
    width: float

    def __post_init__(self):
        if self.radius <= 0 or self.width <= 0:
            raise ValueError("cylinder dimensions must be > 0")

    def profile(self):
        h = 0.5 * self.width
        return 0.0, self.radius, -h, h


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float)
        f = np.ascontiguousarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3 or f.ndim != 2 or f.shape[1] != 3:
            raise ValueError("mesh needs (V,3) vertices and (F,3) faces")
        a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
        area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
        if np.any(area <= 0):
            raise ValueError(f"degenerate triangle(s): {np.flatnonzero(area <= 0)[:5].tolist()}")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_features(self) -> int:
        return len(self.faces)

    @property
    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.vertices, axis=1).max())


def load_obj(path: str | Path) -> TriangleMesh:
    """Read the ``v``/``f`` subset of a Wavefront OBJ file (polygons are fanned)."""
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            if len(idx) < 3:
                raise ValueError(f"{path}:{lineno}: face with fewer than 3 vertices")
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    return TriangleMesh(np.array(verts), np.array(faces))


def save_obj(mesh: TriangleMesh, path: str | Path) -> None:
    lines = [f"v {float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def cylinder_mesh(radius: float, width: float, segments: int = 48, grousers: int = 0,
                  grouser_height: float = 0.0) -> TriangleMesh:
    """Closed faceted wheel around local z; optional radial grousers on the tread."""
    th = np.linspace(0.0, 2 * np.pi, segments, endpoint=False)
    rad = np.full(segments, radius)
    if grousers:
        period = segments // grousers
        rad[::period] += grouser_height
    h = 0.5 * width
    ring = np.stack([rad * np.cos(th), rad * np.sin(th)], axis=1)
    verts = np.vstack([
        np.column_stack([ring, np.full(segments, -h)]),
        np.column_stack([ring, np.full(segments, h)]),
        [[0.0, 0.0, -h], [0.0, 0.0, h]],
    ])
    c0, c1 = 2 * segments, 2 * segments + 1
    faces = []
    for k in range(segments):
        k1 = (k + 1) % segments
        faces += [[k, k1, segments + k1], [k, segments + k1, segments + k]]
        faces += [[c0, k1, k], [c1, segments + k, segments + k1]]
    return TriangleMesh(verts, np.array(faces))


def rotation_about(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, float)
    n = np.linalg.norm(axis)
    if n == 0 or angle == 0:
        return np.eye(3)
    k = axis / n
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def axis_to(direction) -> np.ndarray:
    """Rotation taking local z onto ``direction``."""
    d = np.asarray(direction, float)
    d = d / np.linalg.norm(d)
    c = float(np.dot(_EZ, d))
    if c > 1 - 1e-15:
        return np.eye(3)
    if c < -1 + 1e-15:
        return rotation_about([1.0, 0.0, 0.0], np.pi)
    return rotation_about(np.cross(_EZ, d), np.arccos(c))


@dataclass(eq=False)
class RigidImplement:
    shape: object
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    free_axis: np.ndarray | None = None
    load_mass: float = 0.0
    name: str = ""

    def __post_init__(self):
        self.position = np.array(self.position, dtype=float)
        self.rotation = np.array(self.rotation, dtype=float)
        self.velocity = np.array(self.velocity, dtype=float)
        self.angular_velocity = np.array(self.angular_velocity, dtype=float)
        if self.free_axis is not None:
            ax = np.asarray(self.free_axis, float)
            self.free_axis = ax / np.linalg.norm(ax)
            if self.load_mass <= 0:
                raise ValueError("a free degree of freedom needs load_mass > 0")

    @property
    def n_features(self) -> int:
        return self.shape.n_features

    def surface_velocity(self, points: np.ndarray) -> np.ndarray:
        return self.velocity + np.cross(self.angular_velocity, points - self.position)

    def advance(self, dt: float, reaction_force, gravity) -> None:
        """Move one step; a free DOF first integrates load weight + soil reaction."""
        if self.free_axis is not None:
            ax = self.free_axis
            acc = float(np.dot(reaction_force, ax)) / self.load_mass + float(np.dot(gravity, ax))
            self.velocity = self.velocity + acc * dt * ax
        self.position = self.position + self.velocity * dt
        if np.any(self.angular_velocity):
            w = np.linalg.norm(self.angular_velocity)
            self.rotation = rotation_about(self.angular_velocity, w * dt) @ self.rotation

    # ------------------------------------------------------------------ DEM
    def particle_contacts(self, positions: np.ndarray, radius: float):
        """Sphere-vs-implement narrow phase.

        Returns ``(idx, normal, delta, point, feature)`` for every particle
        that overlaps the implement. ``normal`` points from the particle into
        the implement.
        """
        shape = self.shape
        if isinstance(shape, HalfSpace):
            return _halfspace_contacts(self, positions, radius)
        if isinstance(shape, _Revolved):
            return _revolved_contacts(self, positions, radius)
        if isinstance(shape, TriangleMesh):
            return _mesh_contacts(self, positions, radius)
        raise TypeError(f"unsupported implement shape {type(shape).__name__}")

    # ------------------------------------------------------------------ SCM
    def lower_surface(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Height where an upward vertical ray at (x, y) first enters the solid (nan on a miss)."""
        shape = self.shape
        if isinstance(shape, _Revolved):
            return _revolved_raycast(self, x, y)
        if isinstance(shape, TriangleMesh):
            return _mesh_raycast(self, x, y)
        raise TypeError(f"ray casting needs a cylinder or mesh, got {type(shape).__name__}")

    def footprint(self) -> tuple[float, float, float, float]:
        """World-frame xy bounding box of the solid."""
        shape = self.shape
        if isinstance(shape, TriangleMesh):
            v = shape.vertices @ self.rotation.T
            lo, hi = v.min(axis=0), v.max(axis=0)
        elif isinstance(shape, _Revolved):
            rho0, rho1, a0, a1 = shape.profile()
            axis = self.rotation[:, 2]
            centre = 0.5 * (a0 + a1) * axis
            half = 0.5 * (a1 - a0) * np.abs(axis) + rho1 * np.sqrt(np.clip(1.0 - axis**2, 0.0, None))
            lo, hi = centre - half, centre + half
        else:
            r = shape.bounding_radius
            lo, hi = -np.full(3, r), np.full(3, r)
        p = self.position
        return (p[0] + lo[0], p[0] + hi[0], p[1] + lo[1], p[1] + hi[1])


def _empty_contacts():
    return (np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)), np.zeros(0, np.int64))


def _halfspace_contacts(imp: RigidImplement, x: np.ndarray, r: float):
    m = imp.rotation @ np.asarray(imp.shape.normal, float)
    m = m / np.linalg.norm(m)
    d = (x - imp.position) @ m
    idx = np.flatnonzero(d < r)
    if len(idx) == 0:
        return _empty_contacts()
    delta = r - d[idx]
    n = np.broadcast_to(-m, (len(idx), 3)).copy()
    point = x[idx] + (r - 0.5 * delta)[:, None] * n
    return idx, n, delta, point, np.zeros(len(idx), np.int64)


def _revolved_contacts(imp: RigidImplement, x: np.ndarray, r: float):
    rho0, rho1, a0, a1 = imp.shape.profile()
    rel = x - imp.position
    near = np.flatnonzero(np.einsum("ij,ij->i", rel, rel) < (imp.shape.bounding_radius + r) ** 2)
    if len(near) == 0:
        return _empty_contacts()
    q = rel[near] @ imp.rotation  # local coordinates
    a = q[:, 2]
    rho = np.hypot(q[:, 0], q[:, 1])
    e = np.zeros_like(q)
    safe = rho > 0
    e[safe, 0] = q[safe, 0] / rho[safe]
    e[safe, 1] = q[safe, 1] / rho[safe]
    e[~safe, 0] = 1.0
    c_rho = np.clip(rho, rho0, rho1)
    c_a = np.clip(a, a0, a1)
    d_rho = rho - c_rho
    d_a = a - c_a
    dist = np.hypot(d_rho, d_a)
    outside = dist > 0
    # outward direction (body -> particle) in the (rho, a) half-plane
    m_rho = np.zeros_like(dist)
    m_a = np.zeros_like(dist)
    m_rho[outside] = d_rho[outside] / dist[outside]
    m_a[outside] = d_a[outside] / dist[outside]
    depth = -dist
    if np.any(~outside):
        ins = np.flatnonzero(~outside)
        faces = np.stack([
            rho[ins] - rho0 if rho0 > 0 else np.full(len(ins), np.inf),
            rho1 - rho[ins],
            a[ins] - a0,
            a1 - a[ins],
        ])
        k = np.argmin(faces, axis=0)
        depth[ins] = faces[k, np.arange(len(ins))]
        m_rho[ins] = np.select([k == 0, k == 1], [-1.0, 1.0], 0.0)
        m_a[ins] = np.select([k == 2, k == 3], [-1.0, 1.0], 0.0)
    delta = r + depth
    hit = delta > 0
    if not np.any(hit):
        return _empty_contacts()
    m_loc = m_rho[hit, None] * e[hit] + m_a[hit, None] * _EZ
    n = -(m_loc @ imp.rotation.T)
    n /= np.linalg.norm(n, axis=1)[:, None]
    idx = near[hit]
    delta = delta[hit]
    point = x[idx] + (r - 0.5 * delta)[:, None] * n
    return idx, n, delta, point, np.zeros(len(idx), np.int64)


def _closest_on_triangles(p, a, b, c):
    """Closest point on each triangle (a,b,c) to each p; all arrays (K,3)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    out = np.empty_like(p)
    done = np.zeros(len(p), bool)

    def put(mask, value):
        nonlocal done
        m = mask & ~done
        if np.any(m):
            out[m] = value[m] if value.ndim == 2 else value
        done |= m

    with np.errstate(divide="ignore", invalid="ignore"):
        put((d1 <= 0) & (d2 <= 0), a)
        put((d3 >= 0) & (d4 <= d3), b)
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        put((d6 >= 0) & (d5 <= d6), c)
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        put(np.ones(len(p), bool), a + v[:, None] * ab + w[:, None] * ac)
    return out


def _world_triangles(imp: RigidImplement):
    v = imp.shape.vertices @ imp.rotation.T + imp.position
    f = imp.shape.faces
    return v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]


def _mesh_contacts(imp: RigidImplement, x: np.ndarray, r: float):
    rel = x - imp.position
    near = np.flatnonzero(np.einsum("ij,ij->i", rel, rel) < (imp.shape.bounding_radius + r) ** 2)
    if len(near) == 0:
        return _empty_contacts()
    A, B, C = _world_triangles(imp)
    lo = np.minimum(np.minimum(A, B), C) - r
    hi = np.maximum(np.maximum(A, B), C) + r
    p = x[near]
    cand = np.all((p[:, None, :] >= lo[None]) & (p[:, None, :] <= hi[None]), axis=2)
    pi, ti = np.nonzero(cand)
    if len(pi) == 0:
        return _empty_contacts()
    q = _closest_on_triangles(p[pi], A[ti], B[ti], C[ti])
    fn = np.cross(B[ti] - A[ti], C[ti] - A[ti])
    fn /= np.linalg.norm(fn, axis=1)[:, None]
    diff = p[pi] - q
    dist = np.linalg.norm(diff, axis=1)
    side = np.einsum("ij,ij->i", diff, fn)
    behind = side < 0
    delta = np.where(behind, r + dist, r - dist)
    # a centre behind a face counts only near that face, not through a distant coplanar neighbour
    ok = dist < r
    if not np.any(ok):
        return _empty_contacts()
    pi, ti, q, fn, diff, dist, behind, delta = (
        pi[ok], ti[ok], q[ok], fn[ok], diff[ok], dist[ok], behind[ok], delta[ok]
    )
    # keep the deepest triangle per particle
    order = np.lexsort((-delta, pi))
    first = np.ones(len(order), bool)
    first[1:] = pi[order][1:] != pi[order][:-1]
    sel = order[first]
    pi, ti, q, fn, diff, dist, behind, delta = (
        pi[sel], ti[sel], q[sel], fn[sel], diff[sel], dist[sel], behind[sel], delta[sel]
    )
    n = np.where((behind | (dist < 1e-14))[:, None], -fn, -diff / np.maximum(dist, 1e-300)[:, None])
    idx = near[pi]
    point = x[idx] + (r - 0.5 * delta)[:, None] * n
    return idx, n, delta, point, ti.astype(np.int64)


def _revolved_raycast(imp: RigidImplement, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    rho0, rho1, a0, a1 = imp.shape.profile()
    R = imp.rotation
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    shp = np.broadcast(x, y).shape
    o = np.stack(np.broadcast_arrays(x - imp.position[0], y - imp.position[1], np.zeros(shp)), -1).reshape(-1, 3)
    q0 = o @ R  # local origin of the ray (world z = position z at t = 0)
    d = R[2]  # local direction of world +z
    hits = []
    # caps a = a0, a1
    if abs(d[2]) > 1e-14:
        for ac in (a0, a1):
            t = (ac - q0[:, 2]) / d[2]
            px = q0[:, 0] + t * d[0]
            py = q0[:, 1] + t * d[1]
            rr = px * px + py * py
            ok = (rr <= rho1 * rho1) & (rr >= rho0 * rho0)
            hits.append(np.where(ok, t, np.nan))
    # curved surfaces rho = rho0, rho1
    A = d[0] ** 2 + d[1] ** 2
    if A > 1e-14:
        Bq = 2 * (q0[:, 0] * d[0] + q0[:, 1] * d[1])
        for rr in (rho0, rho1):
            if rr <= 0:
                continue
            Cq = q0[:, 0] ** 2 + q0[:, 1] ** 2 - rr * rr
            disc = Bq * Bq - 4 * A * Cq
            sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
            for sgn in (-1.0, 1.0):
                t = (-Bq + sgn * sq) / (2 * A)
                az = q0[:, 2] + t * d[2]
                hits.append(np.where((az >= a0) & (az <= a1), t, np.nan))
    if not hits:
        return np.full(shp, np.nan)
    H = np.stack(hits)
    allnan = np.all(np.isnan(H), axis=0)
    t = np.where(allnan, np.nan, np.nanmin(np.where(np.isnan(H), np.inf, H), axis=0))
    return (t + imp.position[2]).reshape(shp)


def _mesh_raycast(imp: RigidImplement, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    shp = np.broadcast(x, y).shape
    xs, ys = (a.ravel() for a in np.broadcast_arrays(x, y))
    A, B, C = _world_triangles(imp)
    out = np.full(len(xs), np.inf)
    lo = np.minimum(np.minimum(A, B), C)
    hi = np.maximum(np.maximum(A, B), C)
    e1, e2 = B - A, C - A
    # Moller-Trumbore with direction +z: pvec = d x e2
    pvec = np.stack([-e2[:, 1], e2[:, 0], np.zeros(len(e2))], axis=1)
    det = np.einsum("ij,ij->i", e1, pvec)
    for k in np.flatnonzero(np.abs(det) > 1e-18):
        m = (xs >= lo[k, 0]) & (xs <= hi[k, 0]) & (ys >= lo[k, 1]) & (ys <= hi[k, 1])
        if not np.any(m):
            continue
        tvec = np.stack([xs[m] - A[k, 0], ys[m] - A[k, 1], -A[k, 2] * np.ones(m.sum())], axis=1)
        u = tvec @ pvec[k] / det[k]
        qvec = np.cross(tvec, e1[k])
        v = qvec[:, 2] / det[k]
        t = qvec @ e2[k] / det[k]
        ok = (u >= 0) & (v >= 0) & (u + v <= 1)
        idx = np.flatnonzero(m)[ok]
        out[idx] = np.minimum(out[idx], t[ok])
    out[np.isinf(out)] = np.nan
    return out.reshape(shp)
