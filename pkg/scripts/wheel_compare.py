"""Desk-scale single-wheel slip sweep on both terrains, then a side-by-side comparison.

Settles a narrow DEM bed, runs the same wheel over it and over SCM terrain
with the bundled parameters, and prints the curves and their differences.
Roughly ten minutes on one core with the defaults.

    python3 scripts/wheel_compare.py --slips 0 0.2 0.4 0.6 --out runs/wheel
"""
import argparse
import time
from pathlib import Path

from bevcal import data_path
from bevcal.bevameter import RigConfig, settle
from bevcal.mobility import ScmTerrain, WheelRig, compare, slip_sweep
from bevcal.scm import load_params


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/wheel")
    ap.add_argument("--slips", type=float, nargs="+", default=[0.0, 0.2, 0.4, 0.6])
    ap.add_argument("--duration", type=float, default=1.0)
    ap.add_argument("--particles", type=int, default=5000)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    cfg = RigConfig.desk(bin_size=(0.5, 0.12, 0.2), particle_count=args.particles, settle_time=12.0)
    t0 = time.perf_counter()
    bed = settle(cfg)
    print(f"bed: {len(bed.system)} grains, KE/particle {bed.kinetic_energy:.2e} J "
          f"({time.perf_counter() - t0:.0f} s wall)", flush=True)

    rig = WheelRig.desk_dem(duration=args.duration)
    show = lambda r: print(f"  {r.backend} slip {r.slip:.2f}: DBP {r.steady_dbp:8.3f} N, "  # noqa: E731
                           f"oscillation {r.oscillation():.3f} N, {r.runtime:.1f} s", flush=True)
    scm = slip_sweep(rig, args.slips, "SCM", params=load_params(data_path("reference_params.txt")),
                     terrain=ScmTerrain(resolution=0.005), progress=show)
    dem = slip_sweep(rig, args.slips, "DEM", bed=bed.system, bed_config=cfg, progress=show)
    scm.save(out / "curve_scm.csv")
    dem.save(out / "curve_dem.csv")
    text = compare(scm, dem).report(("SCM", "DEM"))
    (out / "compare.txt").write_text(text)
    print(text)
    print(f"total wall clock: SCM {scm.runtime.sum():.1f} s, DEM {dem.runtime.sum():.1f} s")


if __name__ == "__main__":
    main()
