"""Virtual bevameter: DEM plate-sinkage and annulus-shear rigs, plus the
closed-form SCM predictions of the same two tests.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.ndimage import uniform_filter1d

from .config import ConfigError, to_bool, to_float, to_floats
from .contact import MaterialParams, stable_dt
from .dem import ParticleSystem, Scene, box_walls, lattice_pack
from .implements import Annulus, Plate, RigidImplement
from .scm import NegativeModulusError, ScmParams

log = logging.getLogger(__name__)

GAUSS_NODES = 256


class RigError(ValueError):
    pass


# ------------------------------------------------------------------ configuration
@dataclass
class RigConfig:
    """Bin, grains and test matrix for the virtual bevameter.

    The defaults are the full-size experiment definitions; :meth:`desk`
    returns the reduced geometry that runs on a workstation in minutes.
    """

    bin_size: tuple = (2.0, 2.0, 0.6)
    particle_count: int = 2_760_000
    radius: float = 0.005
    density: float = 2650.0
    friction: float = 0.9
    rolling_friction: float = 0.9
    normal_damping: float = 1.0e4
    tangential_damping: float = 2.0e3
    normal_stiffness: float = 1.0e4
    tangential_stiffness: float = 1.0e4
    cohesion_ratio: float = 0.5  # cohesion force in units of one grain's weight
    gravity: float = 9.81
    dt: float = 0.0  # 0 selects stable_dt(material, dt_safety)
    dt_safety: float = 2.5
    seed: int = 0
    settle_time: float = 15.0
    ke_threshold: float = 1.0e-8
    settle_check_every: int = 200
    settle_hold: int = 100  # checks; 100 x 200 steps = 2e4 quiet steps
    plate_radii: tuple = (0.2, 0.3)
    plate_thickness: float = 0.01
    press_speeds: tuple = (0.01, 0.005, 0.0025)
    sink_depths: tuple = (0.025, 0.05, 0.075, 0.1, 0.125, 0.15, 0.175, 0.2)
    annulus_inner: float = 0.45
    annulus_outer: float = 0.6
    annulus_thickness: float = 0.15
    angular_speed: float = math.radians(1.0)
    loads: tuple = (25.0, 50.0, 75.0, 100.0, 125.0, 150.0, 175.0, 200.0)
    shear_duration: float = 12.0
    transient_times: tuple = (1.0, 2.0, 3.0)
    steady_time: float = 5.0
    smoothing_window: float = 0.2
    sample_stride: int = 20
    approach_gap: float = 0.002

    def __post_init__(self):
        self.bin_size = tuple(float(v) for v in self.bin_size)
        for name in ("plate_radii", "press_speeds", "sink_depths", "loads", "transient_times"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        if len(self.bin_size) != 3 or min(self.bin_size) <= 0:
            raise ConfigError("bin_size needs three positive lengths")
        if self.particle_count < 0:
            raise ConfigError("particle_count must be >= 0")
        if self.dt < 0 or self.dt_safety <= 0:
            raise ConfigError("dt must be >= 0 and dt_safety > 0")
        if self.sample_stride < 1:
            raise ConfigError("sample_stride must be >= 1")
        self.material  # validates grain constants

    @classmethod
    def desk(cls, **overrides) -> "RigConfig":
        desk = dict(
            bin_size=(0.25, 0.25, 0.4), particle_count=10_000, settle_time=12.0,
            plate_radii=(0.05, 0.075), press_speeds=(0.04, 0.02),
            sink_depths=tuple(0.00375 * k for k in range(1, 9)),
            annulus_inner=0.06, annulus_outer=0.08, annulus_thickness=0.03,
            angular_speed=0.25, loads=(1.0, 2.0), shear_duration=2.0,
            transient_times=(0.25, 0.5, 0.75), steady_time=1.5, smoothing_window=0.1,
        )
        desk.update(overrides)
        return cls(**desk)

    @property
    def material(self) -> MaterialParams:
        base = MaterialParams(k_n=self.normal_stiffness, k_t=self.tangential_stiffness,
                              gamma_n=self.normal_damping, gamma_t=self.tangential_damping,
                              mu_s=self.friction, mu_r=self.rolling_friction,
                              radius=self.radius, density=self.density)
        return base.with_cohesion_ratio(self.cohesion_ratio, self.gravity)

    @property
    def gravity_vector(self) -> np.ndarray:
        return np.array([0.0, 0.0, -self.gravity])

    @property
    def time_step(self) -> float:
        return self.dt if self.dt > 0 else stable_dt(self.material, self.dt_safety)

    @property
    def bin_centre(self) -> tuple[float, float]:
        return 0.5 * self.bin_size[0], 0.5 * self.bin_size[1]

    def walls(self) -> list[RigidImplement]:
        return box_walls((0.0, 0.0, 0.0), self.bin_size)

    def check_clearance(self, outer_radius: float) -> None:
        need = outer_radius + 4 * 2 * self.radius
        if need > 0.5 * min(self.bin_size[:2]):
            raise RigError(f"implement radius {outer_radius} m leaves less than four grain diameters "
                           f"to the walls of a {self.bin_size[0]} x {self.bin_size[1]} m bin")

    # ---- key = value files
    @classmethod
    def from_values(cls, values: dict[str, str]) -> "RigConfig":
        known = {f.name: f for f in fields(cls)}
        base = cls.desk() if to_bool(values, "desk_scale", False) else cls()
        kw = {}
        for key in values:
            if key == "desk_scale":
                continue
            if key not in known:
                raise ConfigError(f"unknown rig key {key!r}")
            default = getattr(base, key)
            if isinstance(default, tuple):
                kw[key] = tuple(to_floats(values, key))
            elif isinstance(default, bool):
                kw[key] = to_bool(values, key)
            elif isinstance(default, int):
                kw[key] = int(to_float(values, key))
            else:
                kw[key] = to_float(values, key)
        return replace(base, **kw)

    def as_values(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ------------------------------------------------------------------ settling
@dataclass
class SettleResult:
    system: ParticleSystem
    kinetic_energy: float
    converged: bool
    time: float
    history: np.ndarray  # (k, 2) rows of (t, mean KE per particle)


def settle(config: RigConfig, progress: Callable[[float, float], None] | None = None) -> SettleResult:
    """Pour grains on a jittered lattice and let them come to rest under gravity.

    Stops once the mean kinetic energy per particle has stayed below
    ``ke_threshold`` for ``settle_hold`` consecutive checks, or at
    ``settle_time``. Not converging is a warning, not an error.
    """
    mat = config.material
    g = config.gravity_vector
    if config.particle_count == 0:
        return SettleResult(ParticleSystem(np.zeros((0, 3)), material=mat, gravity=g), 0.0, True, 0.0,
                            np.zeros((0, 2)))
    pos = lattice_pack(config.particle_count, (0.0, 0.0, 0.0), config.bin_size, mat.radius, seed=config.seed)
    scene = Scene(ParticleSystem(pos, material=mat, gravity=g), config.walls(), config.time_step)
    history = []
    below = 0
    ke = scene.system.mean_kinetic_energy()
    while scene.time < config.settle_time - 0.5 * scene.dt:
        scene.advance(config.settle_check_every)
        ke = scene.system.mean_kinetic_energy()
        history.append((scene.time, ke))
        if progress:
            progress(scene.time, ke)
        below = below + 1 if ke < config.ke_threshold else 0
        if below >= config.settle_hold:
            break
    converged = below >= config.settle_hold
    if not converged:
        warnings.warn(f"bed did not settle: mean KE {ke:.3g} J after {scene.time:.3g} s", RuntimeWarning)
    return SettleResult(scene.system, ke, converged, scene.time, np.array(history).reshape(-1, 2))


def bed_surface(system: ParticleSystem, centre, radius: float, highest: bool = False) -> float:
    """Mean height of the grain tops over a disc, from per-column maxima.

    With ``highest`` the single highest grain top is returned instead.
    """
    x = system.positions
    r = system.radius
    d = np.hypot(x[:, 0] - centre[0], x[:, 1] - centre[1])
    inside = d < radius
    if not inside.any():
        raise RigError("no grains under the implement footprint")
    cell = 2 * r
    cols = np.floor(x[inside, :2] / cell).astype(np.int64)
    key = cols[:, 0] * 1_000_003 + cols[:, 1]
    top = x[inside, 2] + r
    if highest:
        return float(top.max())
    order = np.argsort(key, kind="stable")
    key, top = key[order], top[order]
    starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
    return float(np.maximum.reduceat(top, starts).mean())


# ------------------------------------------------------------------ rigs
@dataclass
class PlateSeries:
    radius: float
    speed: float
    t: np.ndarray
    z: np.ndarray  # sinkage below the initial bed surface (m)
    force: np.ndarray  # upward soil reaction on the plate (N)


@dataclass
class ShearSeries:
    load: float
    angular_speed: float
    t: np.ndarray
    torque: np.ndarray  # torque resisting the spin (N m), positive
    sinkage: np.ndarray


def plate_sinkage_test(bed: ParticleSystem, config: RigConfig, radius: float, speed: float,
                       target_depth: float | None = None,
                       progress: Callable[[float, float], None] | None = None) -> PlateSeries:
    if speed <= 0:
        raise RigError("press speed must be > 0")
    config.check_clearance(radius)
    target = max(config.sink_depths) if target_depth is None else target_depth
    centre = config.bin_centre
    surface = bed_surface(bed, centre, radius)
    start = bed_surface(bed, centre, radius + 2 * bed.radius, highest=True) + config.approach_gap
    half = 0.5 * config.plate_thickness
    plate = RigidImplement(Plate(radius, config.plate_thickness),
                           position=(centre[0], centre[1], start + half),
                           velocity=(0.0, 0.0, -speed), name="plate")
    scene = Scene(bed.copy(), config.walls() + [plate], config.time_step)
    ts, zs, fs = [0.0], [surface - start], [0.0]
    while zs[-1] < target:
        w = scene.advance(config.sample_stride)
        ts.append(scene.time)
        zs.append(surface - (plate.position[2] - half))
        fs.append(w[-1, 2])
        if progress:
            progress(zs[-1], fs[-1])
    return PlateSeries(radius, speed, np.array(ts), np.array(zs), np.array(fs))


def annulus_shear_test(bed: ParticleSystem, config: RigConfig, load: float, angular_speed: float | None = None,
                       duration: float | None = None,
                       progress: Callable[[float, float], None] | None = None) -> ShearSeries:
    """Spin a loaded annulus that is free to sink; record the resisting torque."""
    omega = config.angular_speed if angular_speed is None else angular_speed
    if load <= 0 or omega <= 0:
        raise RigError("annulus load and angular speed must be > 0")
    config.check_clearance(config.annulus_outer)
    duration = config.shear_duration if duration is None else duration
    centre = config.bin_centre
    surface = bed_surface(bed, centre, config.annulus_outer)
    half = 0.5 * config.annulus_thickness
    z0 = surface + half
    ring = RigidImplement(Annulus(config.annulus_inner, config.annulus_outer, config.annulus_thickness),
                          position=(centre[0], centre[1], z0), angular_velocity=(0.0, 0.0, omega),
                          free_axis=(0.0, 0.0, 1.0), load_mass=load, name="annulus")
    scene = Scene(bed.copy(), config.walls() + [ring], config.time_step)
    ts, torque, sink = [0.0], [0.0], [0.0]
    while scene.time < duration - 0.5 * scene.dt:
        w = scene.advance(config.sample_stride)
        ts.append(scene.time)
        torque.append(-w[-1, 5])
        sink.append(z0 - ring.position[2])
        if progress:
            progress(ts[-1], torque[-1])
    return ShearSeries(load, omega, np.array(ts), np.array(torque), np.array(sink))


# ------------------------------------------------------------------ ground truth
@dataclass
class GroundTruthSet:
    """Sampled bevameter responses.

    ``sinkage`` rows are ``(plate_r, z, F)``, ``steady`` rows ``(load, T)``
    and ``transient`` rows ``(load, t, T)``; ``meta`` carries the gravity
    and annulus geometry the torques refer to.
    """

    sinkage: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    steady: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    transient: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sinkage = np.asarray(self.sinkage, float).reshape(-1, 3)
        self.steady = np.asarray(self.steady, float).reshape(-1, 2)
        self.transient = np.asarray(self.transient, float).reshape(-1, 3)
        self.meta = {k: float(v) for k, v in self.meta.items()}
        for table in (self.sinkage, self.steady, self.transient):
            if not np.all(np.isfinite(table)):
                raise ValueError("ground truth contains non-finite values")
        for r in self.plate_radii:
            z = self.sinkage[self.sinkage[:, 0] == r, 1]
            if np.any(np.diff(z) <= 0):
                raise ValueError(f"sinkage depths for plate {r} m are not strictly increasing")
        if np.any(np.diff(self.steady[:, 0]) <= 0):
            raise ValueError("steady-state loads are not strictly increasing")
        for load in np.unique(self.transient[:, 0]):
            t = self.transient[self.transient[:, 0] == load, 1]
            if np.any(np.diff(t) <= 0):
                raise ValueError(f"transient times for load {load} are not strictly increasing")

    @property
    def plate_radii(self) -> list[float]:
        return sorted(set(self.sinkage[:, 0].tolist()))

    def annulus(self) -> tuple[float, float, float, float]:
        """``(r_inner, r_outer, angular_speed, gravity)``."""
        try:
            m = self.meta
            return m["r_inner"], m["r_outer"], m["angular_speed"], m.get("gravity", 9.81)
        except KeyError as exc:
            raise ValueError(f"ground truth lacks annulus metadata {exc.args[0]!r}") from None

    def require(self, *sections: str) -> None:
        for name in sections:
            if len(getattr(self, name)) == 0:
                raise ValueError(f"ground truth has no [{name}] section")

    def save(self, path: str | Path) -> None:
        Path(path).write_text(format_ground_truth(self))

    @classmethod
    def load(cls, path: str | Path) -> "GroundTruthSet":
        return parse_ground_truth(Path(path).read_text(), str(path))


_SECTIONS = {"meta": "key,value", "sinkage": "plate_r,z,F", "steady": "load,T", "transient": "load,t,T"}


def format_ground_truth(truth: GroundTruthSet) -> str:
    out = ["[meta]", _SECTIONS["meta"]]
    out += [f"{k},{v!r}" for k, v in truth.meta.items()]
    for name in ("sinkage", "steady", "transient"):
        table = getattr(truth, name)
        if len(table) == 0:
            continue
        out += [f"[{name}]", _SECTIONS[name]]
        out += [",".join(repr(float(v)) for v in row) for row in table]
    return "\n".join(out) + "\n"


def parse_ground_truth(text: str, source: str = "<string>") -> GroundTruthSet:
    tables: dict[str, list] = {k: [] for k in _SECTIONS}
    current = None
    expect_header = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in _SECTIONS:
                raise ConfigError(f"{source}:{lineno}: unknown section [{current}]")
            expect_header = True
            continue
        if current is None:
            raise ConfigError(f"{source}:{lineno}: data before any [section]")
        cells = [c.strip() for c in line.split(",")]
        if expect_header:
            if ",".join(cells) != _SECTIONS[current]:
                raise ConfigError(f"{source}:{lineno}: expected header {_SECTIONS[current]!r}")
            expect_header = False
            continue
        if current == "meta":
            if len(cells) != 2:
                raise ConfigError(f"{source}:{lineno}: expected key,value")
            tables["meta"].append((cells[0], cells[1]))
            continue
        width = len(_SECTIONS[current].split(","))
        try:
            row = [float(c) for c in cells]
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: non-numeric value in {raw.strip()!r}") from None
        if len(row) != width:
            raise ConfigError(f"{source}:{lineno}: expected {width} columns")
        tables[current].append(row)
    try:
        meta = {k: float(v) for k, v in tables["meta"]}
    except ValueError:
        raise ConfigError(f"{source}: non-numeric metadata value") from None
    return GroundTruthSet(tables["sinkage"], tables["steady"], tables["transient"], meta)


def smooth(t: np.ndarray, y: np.ndarray, window: float) -> np.ndarray:
    """Centred moving average over ``window`` seconds of a uniformly sampled series."""
    if window <= 0 or len(y) < 3:
        return np.asarray(y, float).copy()
    spacing = float(np.median(np.diff(t)))
    size = max(1, int(round(window / spacing)))
    if size % 2 == 0:
        size += 1
    return uniform_filter1d(np.asarray(y, float), size=size, mode="nearest")


def smooth_by_sinkage(z: np.ndarray, force: np.ndarray, window: float) -> np.ndarray:
    """Moving average over a sinkage window (for series sampled at constant speed)."""
    return smooth(z, force, window)


def _interp_strict(x_new, x, y, what: str) -> np.ndarray:
    x_new = np.asarray(x_new, float)
    if np.any(x_new < x[0]) or np.any(x_new > x[-1]):
        raise ValueError(f"requested {what} outside the recorded range [{x[0]:.6g}, {x[-1]:.6g}]")
    return np.interp(x_new, x, y)


def sample_ground_truth(plates: list[PlateSeries], shears: list[ShearSeries], depths, times,
                        steady_time: float | None, window: float = 0.2, meta: dict | None = None) -> GroundTruthSet:
    """Smooth each series in time, interpolate at the requested abscissae and
    average plate replicates (same radius, different speeds)."""
    sink_rows = []
    for r in sorted({p.radius for p in plates}):
        reps = [p for p in plates if p.radius == r]
        vals = [_interp_strict(depths, p.z, smooth(p.t, p.force, window), "sinkage") for p in reps]
        mean = np.mean(vals, axis=0)
        sink_rows += [(r, z, f) for z, f in zip(depths, mean)]
    steady_rows, trans_rows = [], []
    for s in sorted(shears, key=lambda s: s.load):
        sm = smooth(s.t, s.torque, window)
        if steady_time is not None:
            steady_rows.append((s.load, float(_interp_strict([steady_time], s.t, sm, "time")[0])))
        for t, v in zip(times, _interp_strict(times, s.t, sm, "time")):
            trans_rows.append((s.load, t, v))
    return GroundTruthSet(sink_rows, steady_rows, trans_rows, meta or {})


# ------------------------------------------------------------------ SCM forward models
def plate_force(z, plate_r, kc, kphi, n):
    """Vectorised ``(Kc/r + Kphi) z^n pi r^2``; no validation."""
    plate_r = np.asarray(plate_r, float)
    return (kc / plate_r + kphi) * np.asarray(z, float) ** n * math.pi * plate_r**2


def predicted_plate_force(z, plate_r, params: ScmParams):
    """Bekker force on a flat disc, whose characteristic length is its radius."""
    z = np.asarray(z, float)
    plate_r = np.asarray(plate_r, float)
    if np.any(z < 0):
        raise ValueError("sinkage must be >= 0")
    if np.any(params.modulus(plate_r) <= 0):
        raise NegativeModulusError(f"Kc/r + Kphi <= 0 for plate radius {float(np.min(plate_r))} m")
    f = plate_force(z, plate_r, params.kc, params.kphi, params.exponent)
    return float(f) if f.ndim == 0 else f


def annulus_pressure(load, r_inner: float, r_outer: float, gravity: float = 9.81):
    return np.asarray(load, float) * gravity / (math.pi * (r_outer**2 - r_inner**2))


_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gauss_legendre(n: int):
    if n not in _GL_CACHE:
        _GL_CACHE[n] = np.polynomial.legendre.leggauss(n)
    return _GL_CACHE[n]


def annulus_torque(load, r_inner, r_outer, omega, t, cohesion, friction_deg, janosi_k,
                   gravity: float = 9.81, nodes: int = GAUSS_NODES):
    """Vectorised torque; ``t=None`` is the fully mobilised (steady) value.

    ``load`` and ``t`` broadcast against each other.
    """
    tau_max = cohesion + annulus_pressure(load, r_inner, r_outer, gravity) * math.tan(math.radians(friction_deg))
    if t is None:
        return tau_max * (2.0 * math.pi / 3.0) * (r_outer**3 - r_inner**3)
    x, w = _gauss_legendre(nodes)
    r = 0.5 * (r_outer - r_inner) * x + 0.5 * (r_outer + r_inner)
    w = 0.5 * (r_outer - r_inner) * w
    tau_max, t = np.broadcast_arrays(np.asarray(tau_max, float), np.asarray(t, float))
    mobilised = -np.expm1(-(r * omega) * t[..., None] / janosi_k)
    return tau_max * (mobilised * (2.0 * math.pi * r**2 * w)).sum(axis=-1)


def predicted_annulus_torque(load, r_inner: float, r_outer: float, omega: float, t, params: ScmParams,
                             gravity: float = 9.81, nodes: int = GAUSS_NODES):
    """Torque to turn a loaded annulus at ``omega`` after ``t`` seconds.

    ``t=None`` (or ``"steady"``) gives the closed form for full shear
    mobilisation; otherwise the radial integral is done by Gauss-Legendre
    quadrature with the shear displacement growing as ``r * omega * t``.
    """
    if np.any(np.asarray(load, float) <= 0):
        raise ValueError("load must be > 0")
    if not 0 < r_inner < r_outer:
        raise ValueError("annulus needs 0 < r_inner < r_outer")
    if isinstance(t, str):
        if t != "steady":
            raise ValueError(f"t must be a time or 'steady', got {t!r}")
        t = None
    if t is not None and np.any(np.asarray(t, float) < 0):
        raise ValueError("t must be >= 0")
    out = annulus_torque(load, r_inner, r_outer, omega, t, params.cohesion, params.friction_deg,
                         params.janosi_k, gravity, nodes)
    out = np.asarray(out, float)
    return float(out) if out.ndim == 0 else out
