"""Soil Contact Model on a height-field terrain.

The terrain is a regular grid of vertical columns. Each step, vertical rays
from the grid nodes find where a wheel dips below the current surface; those
nodes form the contact patch. Pressure follows the Bekker form using the
patch's characteristic length ``b = 2A/L`` and the node's total sinkage below
the undeformed surface. Shear follows the Janosi-Hanamoto form driven by a
per-node accumulated slip. Deformation is plastic and vertical only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, read_kv, to_float, write_kv
from .implements import RigidImplement

PARAM_KEYS = ("Kc", "Kphi", "n", "c", "phi_deg", "Ks")
FIELD_HEADER = "ix,iy,x,y,z,sinkage,Js"


class NegativeModulusError(ValueError):
    """``Kc/b + Kphi`` is not positive for the patch at hand."""


@dataclass(frozen=True)
class ScmParams:
    kc: float  # cohesive modulus, N/m^(n+1)
    kphi: float  # frictional modulus, N/m^(n+2)
    exponent: float
    cohesion: float  # Pa
    friction_deg: float
    janosi_k: float  # shear deformation modulus, m

    def __post_init__(self):
        if not self.exponent > 0:
            raise ValueError("sinkage exponent must be > 0")
        if not self.janosi_k > 0:
            raise ValueError("Janosi shear modulus must be > 0")
        if not 0 < self.friction_deg < 90:
            raise ValueError("friction angle must lie in (0, 90) degrees")

    def modulus(self, b):
        return self.kc / b + self.kphi

    def as_file_values(self) -> dict:
        return dict(zip(PARAM_KEYS, (self.kc, self.kphi, self.exponent, self.cohesion,
                                     self.friction_deg, self.janosi_k)))

    @classmethod
    def from_file_values(cls, values: dict) -> "ScmParams":
        missing = [k for k in PARAM_KEYS if k not in values]
        if missing:
            raise ConfigError(f"parameter file lacks {', '.join(missing)}")
        return cls(*(to_float(values, k) for k in PARAM_KEYS))


def load_params(path: str | Path) -> ScmParams:
    return ScmParams.from_file_values(read_kv(path))


def save_params(params: ScmParams, path: str | Path, header: str | None = None) -> None:
    write_kv(path, params.as_file_values(), header)


def bekker_pressure(z, b, params: ScmParams, clamp: bool = False):
    """Normal pressure ``(Kc/b + Kphi) z^n``.

    A non-positive modulus raises unless ``clamp`` is set, in which case
    those entries get zero pressure.
    """
    z = np.asarray(z, float)
    b = np.asarray(b, float)
    if np.any(z < 0):
        raise ValueError("sinkage must be >= 0")
    if np.any(b <= 0):
        raise ValueError("characteristic length must be > 0")
    k = params.modulus(b)
    bad = k <= 0
    if np.any(bad):
        if not clamp:
            raise NegativeModulusError(
                f"Kc/b + Kphi = {float(np.min(k)):.6g} <= 0 at b = {float(np.min(b)):.6g} m")
        k = np.where(bad, 0.0, k)
    p = k * z ** params.exponent
    return float(p) if p.ndim == 0 else p


def shear_strength(p, params: ScmParams):
    return params.cohesion + np.asarray(p, float) * math.tan(math.radians(params.friction_deg))


def janosi_shear(p, js, params: ScmParams):
    """Mobilised shear stress ``tau_max (1 - exp(-J/Ks))``."""
    p = np.asarray(p, float)
    js = np.asarray(js, float)
    if np.any(p < 0) or np.any(js < 0):
        raise ValueError("pressure and shear displacement must be >= 0")
    tau = shear_strength(p, params) * -np.expm1(-js / params.janosi_k)
    return float(tau) if tau.ndim == 0 else tau


@dataclass(eq=False)
class HeightField:
    """Cell-centred terrain grid; node ``(ix, iy)`` sits at ``origin + (ix + 1/2, iy + 1/2) * resolution``."""

    nx: int
    ny: int
    resolution: float
    origin: tuple = (0.0, 0.0)
    height: float = 0.0
    elevation: np.ndarray = field(default=None)
    initial: np.ndarray = field(default=None)
    js: np.ndarray = field(default=None)
    in_contact: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid needs at least one node per direction")
        if not self.resolution > 0:
            raise ValueError("resolution must be > 0")
        shape = (self.nx, self.ny)
        if self.elevation is None:
            self.elevation = np.full(shape, float(self.height))
        self.elevation = np.array(self.elevation, float)
        if self.elevation.shape != shape or not np.all(np.isfinite(self.elevation)):
            raise ValueError("elevation must be a finite (nx, ny) array")
        self.initial = self.elevation.copy() if self.initial is None else np.array(self.initial, float)
        self.js = np.zeros(shape) if self.js is None else np.array(self.js, float)
        self.in_contact = np.zeros(shape, bool) if self.in_contact is None else np.array(self.in_contact, bool)

    @classmethod
    def flat(cls, size_x: float, size_y: float, resolution: float, origin=(0.0, 0.0),
             height: float = 0.0) -> "HeightField":
        nx = int(round(size_x / resolution))
        ny = int(round(size_y / resolution))
        return cls(nx, ny, resolution, tuple(float(o) for o in origin), height)

    @property
    def sinkage(self) -> np.ndarray:
        return self.initial - self.elevation

    def node_x(self, ix):
        return self.origin[0] + (np.asarray(ix) + 0.5) * self.resolution

    def node_y(self, iy):
        return self.origin[1] + (np.asarray(iy) + 0.5) * self.resolution

    def extent(self) -> tuple[float, float, float, float]:
        x0, y0 = self.origin
        return x0, x0 + self.nx * self.resolution, y0, y0 + self.ny * self.resolution

    def index_range(self, lo: float, hi: float, axis: int) -> tuple[int, int]:
        """Half-open node index range whose centres lie in ``[lo, hi]``."""
        n = self.nx if axis == 0 else self.ny
        o = self.origin[axis]
        a = max(0, math.ceil((lo - o) / self.resolution - 0.5))
        b = min(n, math.floor((hi - o) / self.resolution - 0.5) + 1)
        return a, max(a, b)

    def save_csv(self, path: str | Path) -> None:
        ix, iy = np.meshgrid(np.arange(self.nx), np.arange(self.ny), indexing="ij")
        rows = [FIELD_HEADER]
        sink = self.sinkage
        for a, b in zip(ix.ravel(), iy.ravel()):
            rows.append(f"{a},{b},{float(self.node_x(a))!r},{float(self.node_y(b))!r},"
                        f"{float(self.elevation[a, b])!r},{float(sink[a, b])!r},{float(self.js[a, b])!r}")
        Path(path).write_text("\n".join(rows) + "\n")


@dataclass
class ContactPatch:
    ix: np.ndarray
    iy: np.ndarray
    surface: np.ndarray  # wheel lower-surface height at each node
    sinkage: np.ndarray  # depth of the wheel surface below the undeformed terrain
    penetration: np.ndarray  # depth below the current terrain (>= 0)
    slip: np.ndarray  # (k, 2) horizontal wheel-surface velocity over the node
    area: float
    perimeter: float
    b: float

    def __len__(self) -> int:
        return len(self.ix)

    @property
    def empty(self) -> bool:
        return len(self.ix) == 0


def _boundary_edges(mask: np.ndarray) -> int:
    """Grid edges separating an active node from an inactive (or outside) one."""
    m = np.pad(mask, 1).astype(np.int8)
    return int(np.abs(np.diff(m, axis=0)).sum() + np.abs(np.diff(m, axis=1)).sum())


def raycast_patch(terrain: HeightField, wheel: RigidImplement) -> ContactPatch:
    res = terrain.resolution
    x_lo, x_hi, y_lo, y_hi = wheel.footprint()
    ax, bx = terrain.index_range(x_lo, x_hi, 0)
    ay, by = terrain.index_range(y_lo, y_hi, 1)
    lowest = wheel.position[2] - wheel.shape.bounding_radius
    if bx <= ax or by <= ay or lowest > terrain.elevation[ax:bx, ay:by].max(initial=-np.inf):
        return _empty_patch(res)
    X, Y = np.meshgrid(terrain.node_x(np.arange(ax, bx)), terrain.node_y(np.arange(ay, by)), indexing="ij")
    surf = wheel.lower_surface(X, Y)
    elev = terrain.elevation[ax:bx, ay:by]
    with np.errstate(invalid="ignore"):
        active = np.isfinite(surf) & (surf <= elev)
    if not active.any():
        return _empty_patch(res)
    li, lj = np.nonzero(active)
    s = surf[li, lj]
    gi, gj = li + ax, lj + ay
    count = len(li)
    area = count * res * res
    perimeter = _boundary_edges(active) * res
    pts = np.stack([X[li, lj], Y[li, lj], s], axis=1)
    slip = wheel.surface_velocity(pts)[:, :2]
    sinkage = np.maximum(terrain.initial[gi, gj] - s, 0.0)
    return ContactPatch(gi, gj, s, sinkage, elev[li, lj] - s, slip, area, perimeter,
                        2.0 * area / perimeter)


def _empty_patch(res: float) -> ContactPatch:
    z = np.zeros(0)
    return ContactPatch(np.zeros(0, np.int64), np.zeros(0, np.int64), z, z, z, np.zeros((0, 2)),
                        0.0, 0.0, 0.5 * res)


def scm_step(terrain: HeightField, wheel: RigidImplement, params: ScmParams, dt: float,
             clamp_modulus: bool = False):
    """One SCM update. Mutates ``terrain`` in place.

    Returns ``(wrench, patch)``: ``wrench`` holds the soil force on the wheel
    and its moment about ``wheel.position``.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    patch = raycast_patch(terrain, wheel)
    wrench = np.zeros(6)
    previously = terrain.in_contact
    if patch.empty:
        if previously.any():
            terrain.js[previously] = 0.0
            terrain.in_contact = np.zeros_like(previously)
        return wrench, patch
    gi, gj = patch.ix, patch.iy
    area = terrain.resolution ** 2
    p = bekker_pressure(patch.sinkage, patch.b, params, clamp=clamp_modulus)
    speed = np.hypot(patch.slip[:, 0], patch.slip[:, 1])
    js = terrain.js[gi, gj] + speed * dt
    tau = janosi_shear(p, js, params)
    with np.errstate(invalid="ignore", divide="ignore"):
        direction = np.where(speed[:, None] > 0, patch.slip / speed[:, None], 0.0)
    f = np.zeros((len(gi), 3))
    f[:, :2] = -tau[:, None] * area * direction
    f[:, 2] = p * area
    pts = np.stack([terrain.node_x(gi), terrain.node_y(gj), patch.surface], axis=1)
    wrench[:3] = f.sum(axis=0)
    wrench[3:] = np.cross(pts - wheel.position, f).sum(axis=0)

    now = np.zeros_like(previously)
    now[gi, gj] = True
    terrain.js[previously & ~now] = 0.0
    terrain.js[gi, gj] = js
    terrain.in_contact = now
    terrain.elevation[gi, gj] = np.minimum(terrain.elevation[gi, gj], patch.surface)
    return wrench, patch
