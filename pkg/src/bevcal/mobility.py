"""Single-wheel slip tests on SCM terrain or on a DEM bed.

The wheel moves forward at a fixed speed and spins at the rate that
produces the requested slip, while sinking freely under the assembly
weight. Drawbar pull is the horizontal soil force on the wheel in the
travel direction: positive means net thrust.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .bevameter import RigConfig, RigError, bed_surface
from .dem import ParticleSystem, Scene
from .implements import Cylinder, RigidImplement, TriangleMesh, axis_to
from .scm import HeightField, ScmParams, scm_step

CURVE_HEADER = "slip,dbp_N,slope_deg,runtime_s,backend"


def slip_to_omega(v: float, r: float, s: float) -> float:
    """Spin rate giving slip ``s = 1 - v/(omega r)``."""
    if not 0 <= s < 1:
        raise ValueError(f"slip must lie in [0, 1), got {s}")
    if r <= 0:
        raise ValueError("wheel radius must be > 0")
    return v / (r * (1.0 - s))


def omega_to_slip(v: float, r: float, omega: float) -> float:
    return 1.0 - v / (omega * r)


@dataclass(frozen=True)
class WheelRig:
    radius: float = 0.47
    width: float = 0.3
    mass: float = 20.0
    speed: float = 1.0
    slip: float = 0.0
    duration: float = 15.0
    gravity: float = 9.81
    mesh: TriangleMesh | None = None  # spin axis along local z, like the cylinder
    tail_fraction: float = 0.3

    def __post_init__(self):
        if self.radius <= 0 or self.width <= 0 or self.mass <= 0:
            raise ValueError("wheel radius, width and mass must be > 0")
        if not 0 <= self.slip < 1:
            raise ValueError("slip must lie in [0, 1)")
        if self.duration <= 0 or not 0 < self.tail_fraction < 1:
            raise ValueError("need duration > 0 and 0 < tail_fraction < 1")

    @classmethod
    def desk_dem(cls, **overrides) -> "WheelRig":
        base = dict(radius=0.1, width=0.06, mass=2.0, speed=0.2, duration=3.5)
        base.update(overrides)
        return cls(**base)

    @property
    def omega(self) -> float:
        return slip_to_omega(self.speed, self.radius, self.slip)

    @property
    def load(self) -> float:
        return self.mass * self.gravity

    def implement(self, position) -> RigidImplement:
        shape = self.mesh if self.mesh is not None else Cylinder(self.radius, self.width)
        # local z (spin axis) along world y; spinning about +y rolls the wheel toward +x
        return RigidImplement(shape, position=position, rotation=axis_to((0.0, 1.0, 0.0)),
                              velocity=(self.speed, 0.0, 0.0), angular_velocity=(0.0, self.omega, 0.0),
                              free_axis=(0.0, 0.0, 1.0), load_mass=self.mass, name="wheel")


@dataclass
class RunResult:
    slip: float
    backend: str
    t: np.ndarray
    dbp: np.ndarray
    sinkage: np.ndarray
    steady_dbp: float
    slope_deg: float
    runtime: float
    load: float

    def oscillation(self) -> float:
        """Standard deviation of drawbar pull over the steady window."""
        return float(np.std(self.dbp[self.t >= self.t[-1] * 0.7]))


def traction_slope(dbp: float, load: float) -> float:
    return math.degrees(math.atan(dbp / load))


def _finish(rig: WheelRig, backend: str, ts, dbp, sink, started: float) -> RunResult:
    t = np.asarray(ts)
    d = np.asarray(dbp)
    tail = t >= (1.0 - rig.tail_fraction) * t[-1]
    steady = float(d[tail].mean())
    return RunResult(rig.slip, backend, t, d, np.asarray(sink), steady, traction_slope(steady, rig.load),
                     time.perf_counter() - started, rig.load)


@dataclass(frozen=True)
class ScmTerrain:
    resolution: float = 0.01
    dt: float = 1.0e-3
    width: float = 1.0
    length: float = 0.0  # 0 sizes the strip to the run
    start_x: float = 0.0
    clamp_modulus: bool = True  # zero pressure where Kc/b + Kphi <= 0 (tiny patches)


def run_scm_wheel(rig: WheelRig, params: ScmParams, terrain: ScmTerrain | None = None,
                  progress: Callable[[float, float], None] | None = None) -> RunResult:
    terrain = terrain or ScmTerrain()
    started = time.perf_counter()
    need = terrain.start_x + rig.speed * rig.duration + 2 * rig.radius
    length = terrain.length if terrain.length > 0 else need + 2 * rig.radius
    field_ = HeightField.flat(length + 2 * rig.radius, terrain.width, terrain.resolution,
                              origin=(terrain.start_x - 2 * rig.radius, -0.5 * terrain.width))
    x_end = field_.extent()[1]
    wheel = rig.implement((terrain.start_x, 0.0, rig.radius))
    g = np.array([0.0, 0.0, -rig.gravity])
    steps = int(round(rig.duration / terrain.dt))
    ts, dbp, sink = [], [], []
    for k in range(steps):
        wrench, _ = scm_step(field_, wheel, params, terrain.dt, clamp_modulus=terrain.clamp_modulus)
        wheel.advance(terrain.dt, wrench[:3], g)
        if wheel.position[0] + rig.radius > x_end:
            raise RigError("wheel left the terrain strip")
        ts.append((k + 1) * terrain.dt)
        dbp.append(wrench[0])
        sink.append(rig.radius - wheel.position[2])
        if progress and k % 100 == 0:
            progress(ts[-1], dbp[-1])
    return _finish(rig, "SCM", ts, dbp, sink, started)


def run_dem_wheel(rig: WheelRig, bed: ParticleSystem, bed_config: RigConfig, start_x: float | None = None,
                  stride: int = 20, progress: Callable[[float, float], None] | None = None) -> RunResult:
    started = time.perf_counter()
    lx, ly, _ = bed_config.bin_size
    x0 = rig.radius + 2 * bed_config.radius if start_x is None else start_x
    if x0 - rig.radius < 0 or x0 + rig.radius + rig.speed * rig.duration > lx:
        raise RigError(f"wheel track of {rig.speed * rig.duration:.3g} m does not fit in the {lx} m bin")
    if rig.width > ly:
        raise RigError("wheel wider than the bin")
    yc = 0.5 * ly
    x = bed.positions
    strip = (np.abs(x[:, 0] - x0) < rig.radius) & (np.abs(x[:, 1] - yc) < 0.5 * rig.width + bed.radius)
    if not strip.any():
        raise RigError("no grains under the wheel start position")
    bottom = float(x[strip, 2].max()) + bed.radius + bed_config.approach_gap
    surface = bed_surface(bed, (x0, yc), 0.5 * rig.width)
    wheel = rig.implement((x0, yc, bottom + rig.radius))
    scene = Scene(bed.copy(), bed_config.walls() + [wheel], bed_config.time_step)
    ts, dbp, sink = [], [], []
    while scene.time < rig.duration - 0.5 * scene.dt:
        w = scene.advance(stride)
        ts.append(scene.time)
        dbp.append(w[-1, 0])
        sink.append(surface - (wheel.position[2] - rig.radius))
        if progress:
            progress(ts[-1], dbp[-1])
    return _finish(rig, "DEM", ts, dbp, sink, started)


# ------------------------------------------------------------------ sweeps
@dataclass
class SlipCurve:
    backend: str
    slip: np.ndarray
    dbp: np.ndarray
    slope_deg: np.ndarray
    runtime: np.ndarray
    runs: list = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        rows = [CURVE_HEADER]
        for s, d, a, rt in zip(self.slip, self.dbp, self.slope_deg, self.runtime):
            rows.append(f"{float(s)!r},{float(d)!r},{float(a)!r},{float(rt)!r},{self.backend}")
        Path(path).write_text("\n".join(rows) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SlipCurve":
        lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
        if not lines or lines[0].strip() != CURVE_HEADER:
            raise ValueError(f"{path}: expected header {CURVE_HEADER!r}")
        cols = list(zip(*(ln.split(",") for ln in lines[1:])))
        if not cols:
            raise ValueError(f"{path}: empty curve")
        backends = set(cols[4])
        if len(backends) != 1:
            raise ValueError(f"{path}: mixed backends {sorted(backends)}")
        return cls(cols[4][0], *(np.array(c, float) for c in cols[:4]))


def slip_sweep(template: WheelRig, slips: Sequence[float], backend: str = "SCM", params: ScmParams | None = None,
               terrain: ScmTerrain | None = None, bed: ParticleSystem | None = None,
               bed_config: RigConfig | None = None, progress: Callable[[RunResult], None] | None = None,
               workers: int = 1) -> SlipCurve:
    """One run per slip. With ``workers > 1`` the runs go to a process pool;
    each run is independent, so results do not depend on the worker count."""
    slips = [float(s) for s in slips]
    if not slips:
        raise ValueError("no slips requested")
    if any(b <= a for a, b in zip(slips, slips[1:])) or not all(0 <= s < 1 for s in slips):
        raise ValueError("slips must be strictly increasing within [0, 1)")
    backend = backend.upper()
    if backend == "SCM":
        if params is None:
            raise ValueError("SCM sweep needs parameters")
        job, extra = run_scm_wheel, (params, terrain)
    elif backend == "DEM":
        if bed is None or bed_config is None:
            raise ValueError("DEM sweep needs a settled bed and its config")
        job, extra = run_dem_wheel, (bed, bed_config)
    else:
        raise ValueError(f"unknown backend {backend!r} (SCM or DEM)")
    rigs = [replace(template, slip=s) for s in slips]
    runs = []
    if workers > 1 and len(rigs) > 1:
        with ProcessPoolExecutor(min(workers, len(rigs))) as pool:
            futures = [pool.submit(job, rig, *extra) for rig in rigs]
            for fut in futures:
                runs.append(fut.result())
                if progress:
                    progress(runs[-1])
    else:
        for rig in rigs:
            runs.append(job(rig, *extra))
            if progress:
                progress(runs[-1])
    return SlipCurve(backend, np.array(slips), np.array([r.steady_dbp for r in runs]),
                     np.array([r.slope_deg for r in runs]), np.array([r.runtime for r in runs]), runs)


@dataclass
class Comparison:
    slip: np.ndarray
    d_dbp: np.ndarray  # a - b
    d_slope: np.ndarray
    max_relative: float  # max |d_dbp| over max |dbp| of either curve
    same_sign: bool
    monotone_a: bool
    monotone_b: bool

    def report(self, names=("a", "b")) -> str:
        lines = ["slip,d_dbp_N,d_slope_deg"]
        lines += [f"{s!r},{d!r},{a!r}" for s, d, a in zip(self.slip.tolist(), self.d_dbp.tolist(),
                                                           self.d_slope.tolist())]
        lines += [f"# max relative deviation: {self.max_relative:.6g}",
                  f"# same sign at every slip: {str(self.same_sign).lower()}",
                  f"# {names[0]} nondecreasing: {str(self.monotone_a).lower()}",
                  f"# {names[1]} nondecreasing: {str(self.monotone_b).lower()}"]
        return "\n".join(lines) + "\n"


def compare(a: SlipCurve, b: SlipCurve) -> Comparison:
    if len(a.slip) != len(b.slip) or not np.array_equal(a.slip, b.slip):
        raise ValueError("curves are on different slip grids")
    d = a.dbp - b.dbp
    scale = max(np.max(np.abs(a.dbp)), np.max(np.abs(b.dbp)))
    rel = float(np.max(np.abs(d)) / scale) if scale > 0 else 0.0
    return Comparison(a.slip.copy(), d, a.slope_deg - b.slope_deg, rel,
                      bool(np.all(np.sign(a.dbp) == np.sign(b.dbp))),
                      bool(np.all(np.diff(a.dbp) >= 0)), bool(np.all(np.diff(b.dbp) >= 0)))
