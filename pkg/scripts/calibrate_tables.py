"""Calibrate SCM parameters on the bundled bevameter tables and report the fit.

    python3 scripts/calibrate_tables.py --iters 50000 --chains 4
"""
import argparse
import time

import numpy as np

from bevcal import data_path
from bevcal.bevameter import GroundTruthSet, annulus_torque, plate_force
from bevcal.calib import ChainConfig, calibrate_pressure, calibrate_shear, to_scm_params
from bevcal.scm import load_params


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iters", type=int, default=50_000)
    ap.add_argument("--chains", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    truth = GroundTruthSet.load(data_path("reference_tables.csv"))
    cfg = ChainConfig(iterations=args.iters, chains=args.chains, seed=args.seed)

    t0 = time.perf_counter()
    pressure = calibrate_pressure(truth, config=cfg)
    t1 = time.perf_counter()
    shear = calibrate_shear(truth, config=cfg)
    t2 = time.perf_counter()
    print(pressure.report())
    print(shear.report())
    print(f"pressure stage {t1 - t0:.1f} s, shear stages {t2 - t1:.1f} s")

    fitted = to_scm_params(pressure, shear)
    reference = load_params(data_path("reference_params.txt"))
    r_in, r_out, omega, g = truth.annulus()
    sink, steady, trans = truth.sinkage, truth.steady, truth.transient
    print(f"\n{'':>10} {'max |dF|/max F':>15} {'max |dT|/max T':>15} {'worst transient t':>18}")
    for name, p in (("fitted", fitted), ("reference", reference)):
        f = plate_force(sink[:, 1], sink[:, 0], p.kc, p.kphi, p.exponent)
        ts = annulus_torque(steady[:, 0], r_in, r_out, omega, None, p.cohesion, p.friction_deg, 1.0, g)
        tt = annulus_torque(trans[:, 0], r_in, r_out, omega, trans[:, 1], p.cohesion, p.friction_deg,
                            p.janosi_k, g)
        res = np.abs(tt - trans[:, 2])
        worst = trans[np.argmax(res), 1]
        print(f"{name:>10} {np.max(np.abs(f - sink[:, 2])) / sink[:, 2].max():>15.4f} "
              f"{np.max(np.abs(ts - steady[:, 1])) / steady[:, 1].max():>15.4f} {worst:>18g}")


if __name__ == "__main__":
    main()
