"""Command-line front end: ``bevcal <subcommand> [options]``.

Every run writes ``manifest_<subcommand>.json`` into the output directory,
also when the run fails. Exit status is 0 only when every artifact was
written; configuration problems exit with 2, run failures with 1.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
import warnings
from dataclasses import fields, replace
from pathlib import Path

from . import __version__, data_path
from .bevameter import (GroundTruthSet, RigConfig, annulus_shear_test, plate_sinkage_test,
                        sample_ground_truth, settle)
from .calib import (ChainConfig, PriorSpec, calibrate_pressure, calibrate_shear, to_scm_params,
                    write_chains, write_kde)
from .config import ConfigError, format_kv, read_kv, to_bool, to_float, to_floats
from .dem import contacts_path, load_snapshot, save_snapshot
from .implements import load_obj
from .mobility import ScmTerrain, SlipCurve, WheelRig, compare, slip_sweep
from .scm import load_params, save_params

log = logging.getLogger("bevcal")

DEFAULT_SLIPS = tuple(round(0.1 * k, 1) for k in range(9))


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class RunManifest:
    def __init__(self, subcommand: str, out_dir: Path, seed: int | None):
        self.subcommand = subcommand
        self.out_dir = out_dir
        self.seed = seed
        self.config: dict = {}
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []
        self.started = time.perf_counter()
        self.error: str | None = None

    @property
    def path(self) -> Path:
        return self.out_dir / f"manifest_{self.subcommand}.json"

    def output(self, name: str) -> Path:
        p = self.out_dir / name
        self.outputs.append(p)
        return p

    def as_dict(self) -> dict:
        def digests(paths):
            return {str(p): sha256(p) if p.is_file() else None for p in paths}

        return {
            "subcommand": self.subcommand,
            "version": __version__,
            "seed": self.seed,
            "config": {k: _plain(v) for k, v in self.config.items()},
            "inputs": digests(self.inputs),
            "outputs": digests(self.outputs),
            "wall_clock_s": time.perf_counter() - self.started,
            "status": "error" if self.error else "ok",
            "error": self.error,
        }

    def write(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.as_dict(), indent=2) + "\n")


def _plain(v):
    if isinstance(v, (tuple, list)):
        return ", ".join(repr(float(x)) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, bool):
        return str(v).lower()
    return str(v)


def manifest_config(path: str | Path) -> str:
    """The resolved config of a manifest as ``key = value`` text, ready for ``--config``."""
    data = json.loads(Path(path).read_text())
    return format_kv(data["config"])


# ------------------------------------------------------------------ config helpers
def _read_config(args, manifest: RunManifest) -> dict[str, str]:
    if args.config is None:
        return {}
    path = Path(args.config)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    manifest.inputs.append(path)
    return read_kv(path)


def _rig_config(values: dict[str, str], seed: int | None) -> RigConfig:
    cfg = RigConfig.from_values(values)
    return replace(cfg, seed=seed) if seed is not None else cfg


def _input(manifest: RunManifest, path: str | None, what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what} path required")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    manifest.inputs.append(p)
    return p


def _merge_truth(path: Path, update: GroundTruthSet) -> GroundTruthSet:
    """Replace the sections present in ``update``; keep the others from an existing file."""
    if not path.is_file():
        return update
    old = GroundTruthSet.load(path)
    return GroundTruthSet(update.sinkage if len(update.sinkage) else old.sinkage,
                          update.steady if len(update.steady) else old.steady,
                          update.transient if len(update.transient) else old.transient,
                          {**old.meta, **update.meta})


def _save_series(path: Path, header: str, cols) -> None:
    rows = [header] + [",".join(repr(float(v)) for v in r) for r in zip(*cols)]
    path.write_text("\n".join(rows) + "\n")


# ------------------------------------------------------------------ subcommands
def cmd_settle(args, manifest: RunManifest) -> None:
    cfg = _rig_config(_read_config(args, manifest), args.seed)
    manifest.config = cfg.as_values()
    manifest.seed = cfg.seed
    res = settle(cfg, progress=_progress(args, "settle", "t={:.3f} s  KE/particle={:.3g} J"))
    side = save_snapshot(res.system, manifest.output("bed.csv"))
    if side is not None:
        manifest.outputs.append(side)
    _save_series(manifest.output("settle_ke.csv"), "t,ke_per_particle_J", res.history.T)


def _bed(args, manifest: RunManifest, cfg: RigConfig):
    path = _input(manifest, args.bed, "bed snapshot")
    if contacts_path(path).is_file():
        manifest.inputs.append(contacts_path(path))
    return load_snapshot(path, cfg.material, cfg.gravity_vector)


def cmd_sink(args, manifest: RunManifest) -> None:
    cfg = _rig_config(_read_config(args, manifest), args.seed)
    manifest.config = cfg.as_values()
    if not cfg.plate_radii or not cfg.press_speeds or not cfg.sink_depths:
        raise ConfigError("empty experiment matrix")
    bed = _bed(args, manifest, cfg)
    plates = []
    for r in cfg.plate_radii:
        for v in cfg.press_speeds:
            log.info("plate r=%g m at %g m/s", r, v)
            series = plate_sinkage_test(bed, cfg, r, v)
            _save_series(manifest.output(f"plate_r{r:g}_v{v:g}.csv"), "t,z,force_N",
                         (series.t, series.z, series.force))
            plates.append(series)
    truth = sample_ground_truth(plates, [], cfg.sink_depths, (), None, cfg.smoothing_window,
                                meta=_annulus_meta(cfg))
    out = manifest.output("ground_truth.csv")
    _merge_truth(out, truth).save(out)


def _annulus_meta(cfg: RigConfig) -> dict:
    return {"gravity": cfg.gravity, "r_inner": cfg.annulus_inner, "r_outer": cfg.annulus_outer,
            "angular_speed": cfg.angular_speed}


def cmd_shear(args, manifest: RunManifest) -> None:
    cfg = _rig_config(_read_config(args, manifest), args.seed)
    manifest.config = cfg.as_values()
    if not cfg.loads:
        raise ConfigError("empty experiment matrix")
    bed = _bed(args, manifest, cfg)
    shears = []
    for load in cfg.loads:
        log.info("annulus load %g kg", load)
        series = annulus_shear_test(bed, cfg, load)
        _save_series(manifest.output(f"shear_{load:g}kg.csv"), "t,torque_Nm,sinkage_m",
                     (series.t, series.torque, series.sinkage))
        shears.append(series)
    truth = sample_ground_truth([], shears, (), cfg.transient_times, cfg.steady_time, cfg.smoothing_window,
                                meta=_annulus_meta(cfg))
    out = manifest.output("ground_truth.csv")
    _merge_truth(out, truth).save(out)


_CHAIN_KEYS = {f.name for f in fields(ChainConfig)}


def _chain_config(values: dict[str, str], args) -> tuple[ChainConfig, dict]:
    kw, priors = {}, {}
    for key, raw in values.items():
        if key.startswith("prior_"):
            bounds = to_floats(values, key)
            if len(bounds) != 2:
                raise ConfigError(f"{key}: expected 'low, high'")
            priors[key[len("prior_"):]] = bounds
        elif key not in _CHAIN_KEYS:
            raise ConfigError(f"unknown calibration key {key!r}")
        elif key == "residual_mode":
            kw[key] = raw
        elif key == "adapt":
            kw[key] = to_bool(values, key)
        elif key in ("iterations", "seed", "chains", "adapt_interval"):
            kw[key] = int(to_float(values, key))
        else:
            kw[key] = to_float(values, key)
    for flag, key in ((args.chains, "chains"), (args.iters, "iterations"), (args.seed, "seed")):
        if flag is not None:
            kw[key] = flag
    try:
        return ChainConfig(**kw), priors
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _prior(base: PriorSpec, overrides: dict) -> PriorSpec:
    lower, upper = list(base.lower), list(base.upper)
    for k, name in enumerate(base.names):
        if name in overrides:
            lower[k], upper[k] = overrides[name]
    return PriorSpec(base.names, tuple(lower), tuple(upper))


def cmd_calibrate(args, manifest: RunManifest) -> None:
    values = _read_config(args, manifest)
    chain_cfg, prior_bounds = _chain_config(values, args)
    known = {n for p in (PriorSpec.pressure(), PriorSpec.shear_strength(), PriorSpec.janosi()) for n in p.names}
    unknown = set(prior_bounds) - known
    if unknown:
        raise ConfigError(f"prior for unknown parameter(s) {sorted(unknown)}")
    manifest.config = {**{f.name: getattr(chain_cfg, f.name) for f in fields(ChainConfig)},
                       **{f"prior_{k}": tuple(v) for k, v in prior_bounds.items()}}
    manifest.seed = chain_cfg.seed
    truth_path = _input(manifest, args.truth or str(data_path("reference_tables.csv")), "ground truth")
    truth = GroundTruthSet.load(truth_path)
    truth.require("sinkage", "steady", "transient")

    pressure = calibrate_pressure(truth, _prior(PriorSpec.pressure(), prior_bounds), chain_cfg)
    shear = calibrate_shear(truth, (_prior(PriorSpec.shear_strength(), prior_bounds),
                                    _prior(PriorSpec.janosi(), prior_bounds)), chain_cfg)
    params = to_scm_params(pressure, shear)
    save_params(params, manifest.output("scm_params.txt"), "posterior means")
    save_params(to_scm_params(pressure, shear, "map"), manifest.output("scm_params_map.txt"),
                "highest-posterior samples")
    write_chains(pressure.chains, manifest.output("chains_pressure.csv"))
    write_chains(shear.stages[0].chains, manifest.output("chains_shear_strength.csv"))
    write_chains(shear.stages[1].chains, manifest.output("chains_janosi.csv"))
    write_kde(pressure, manifest.output("kde_pressure.csv"))
    write_kde(shear, manifest.output("kde_shear.csv"))
    summary = "\n\n".join(["pressure-sinkage", pressure.report(), "shear", shear.report()]) + "\n"
    manifest.output("summary.txt").write_text(summary)
    print(summary, end="")
    for w in pressure.warnings + shear.warnings:
        log.warning(w)


_WHEEL_KEYS = {"radius", "width", "mass", "speed", "duration", "gravity", "tail_fraction"}
_TERRAIN_KEYS = {"resolution": "resolution", "scm_dt": "dt", "terrain_width": "width",
                 "terrain_length": "length", "clamp_modulus": "clamp_modulus"}


def _wheel_setup(values: dict[str, str], manifest: RunManifest, backend: str):
    base = WheelRig.desk_dem() if backend == "DEM" else WheelRig()
    kw, terrain, slips, mesh = {}, {}, DEFAULT_SLIPS, None
    for key in values:
        if key in _WHEEL_KEYS:
            kw[key] = to_float(values, key)
        elif key in _TERRAIN_KEYS:
            terrain[_TERRAIN_KEYS[key]] = (to_bool(values, key) if key == "clamp_modulus"
                                           else to_float(values, key))
        elif key == "slips":
            slips = tuple(to_floats(values, key))
        elif key == "mesh":
            mesh = _input(manifest, values[key], "wheel mesh")
        else:
            raise ConfigError(f"unknown wheel key {key!r}")
    if not slips:
        raise ConfigError("empty experiment matrix")
    try:
        rig = replace(base, mesh=load_obj(mesh) if mesh else None, **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return rig, ScmTerrain(**terrain), slips


def cmd_wheel(args, manifest: RunManifest) -> None:
    backend = args.backend.upper()
    values = _read_config(args, manifest)
    rig, terrain, slips = _wheel_setup(values, manifest, backend)
    manifest.config = {**{k: getattr(rig, k) for k in sorted(_WHEEL_KEYS)},
                       **{k: getattr(terrain, v) for k, v in _TERRAIN_KEYS.items()},
                       "slips": slips, "backend": backend}
    if "mesh" in values:
        manifest.config["mesh"] = values["mesh"]
    report = lambda r: log.info("slip %.2f: DBP %.4g N, slope %.3g deg, %.1f s",  # noqa: E731
                                r.slip, r.steady_dbp, r.slope_deg, r.runtime)
    if backend == "SCM":
        params = load_params(_input(manifest, args.params or str(data_path("reference_params.txt")), "params"))
        curve = slip_sweep(rig, slips, "SCM", params=params, terrain=terrain, progress=report,
                           workers=_workers(args))
    else:
        bed_values = {}
        if args.bed_config:
            bed_values = read_kv(_input(manifest, args.bed_config, "bed config"))
        bed_cfg = _rig_config(bed_values, args.seed)
        bed = _bed(args, manifest, bed_cfg)
        curve = slip_sweep(rig, slips, "DEM", bed=bed, bed_config=bed_cfg, progress=report,
                           workers=_workers(args))
    for run in curve.runs:
        _save_series(manifest.output(f"wheel_{backend.lower()}_s{run.slip:g}.csv"), "t,dbp_N,sinkage_m",
                     (run.t, run.dbp, run.sinkage))
    curve.save(manifest.output(f"curve_{backend.lower()}.csv"))


def _workers(args) -> int:
    return args.threads if args.threads is not None else (os.cpu_count() or 1)


def cmd_compare(args, manifest: RunManifest) -> None:
    a = SlipCurve.load(_input(manifest, args.curve_a, "curve"))
    b = SlipCurve.load(_input(manifest, args.curve_b, "curve"))
    manifest.config = {"curve_a": args.curve_a, "curve_b": args.curve_b}
    text = compare(a, b).report((a.backend, b.backend))
    manifest.output("compare.txt").write_text(text)
    print(text, end="")


# ------------------------------------------------------------------ plumbing
def _progress(args, label: str, fmt: str):
    if not args.verbose:
        return None
    last = [0.0]

    def show(*vals):
        now = time.perf_counter()
        if now - last[0] > 5.0:
            last[0] = now
            log.info("%s: " + fmt, label, *vals)

    return show


def _backend(text: str) -> str:
    if text.upper() not in ("SCM", "DEM"):
        raise argparse.ArgumentTypeError(f"unknown backend {text!r} (choose SCM or DEM)")
    return text.upper()


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value settings file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--threads", type=int, help="concurrent sweep points (default: all cores)")
    common.add_argument("--out-dir", default=".", help="directory for outputs and the manifest")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="bevcal", description="Virtual bevameter, SCM calibration and wheel tests.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("settle", parents=[common], help="settle a granular bed")
    for name, text in (("sink", "plate sinkage tests"), ("shear", "annulus shear tests")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--bed", required=True, help="bed snapshot from 'settle'")
    sp = sub.add_parser("calibrate", parents=[common], help="fit SCM parameters to ground truth")
    sp.add_argument("--truth", help="ground-truth CSV (default: bundled tables)")
    sp.add_argument("--chains", type=int)
    sp.add_argument("--iters", type=int)
    sp = sub.add_parser("wheel", parents=[common], help="single-wheel slip sweep")
    sp.add_argument("--backend", type=_backend, default="SCM")
    sp.add_argument("--params", help="SCM parameter file (default: bundled calibrated set)")
    sp.add_argument("--bed", help="bed snapshot for the DEM backend")
    sp.add_argument("--bed-config", help="rig config that produced the bed")
    sp = sub.add_parser("compare", parents=[common], help="compare two slip curves")
    sp.add_argument("curve_a")
    sp.add_argument("curve_b")
    return p


COMMANDS = {"settle": cmd_settle, "sink": cmd_sink, "shear": cmd_shear, "calibrate": cmd_calibrate,
            "wheel": cmd_wheel, "compare": cmd_compare}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    logging.captureWarnings(True)
    out_dir = Path(args.out_dir)
    manifest = RunManifest(args.command, out_dir, args.seed)
    status = 0
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            COMMANDS[args.command](args, manifest)
        missing = [str(p) for p in manifest.outputs if not p.is_file()]
        if missing:
            raise RuntimeError(f"outputs not written: {', '.join(missing)}")
    except ConfigError as exc:
        manifest.error = f"{type(exc).__name__}: {exc}"
        print(f"bevcal {args.command}: error: {exc}", file=sys.stderr)
        status = 2
    except Exception as exc:  # record any failure in the manifest
        manifest.error = f"{type(exc).__name__}: {exc}"
        print(f"bevcal {args.command}: error: {exc}", file=sys.stderr)
        status = 1
    try:
        manifest.write()
    except OSError as exc:
        print(f"bevcal: could not write manifest: {exc}", file=sys.stderr)
        status = status or 1
    logging.captureWarnings(False)
    return status


if __name__ == "__main__":
    sys.exit(main())
