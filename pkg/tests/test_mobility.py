import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bevcal.bevameter import RigConfig, RigError
from bevcal.dem import ParticleSystem
from bevcal.mobility import (CURVE_HEADER, ScmTerrain, SlipCurve, WheelRig, compare, omega_to_slip, run_dem_wheel,
                             run_scm_wheel, slip_sweep, slip_to_omega, traction_slope)


def test_slip_to_omega_examples():
    assert slip_to_omega(1.0, 0.25, 0.0) == 4.0
    assert slip_to_omega(1.0, 0.25, 0.5) == 8.0
    assert slip_to_omega(1.0, 0.47, 0.8) == pytest.approx(10.638, abs=1e-3)
    for bad in ((1.0, 0.25, 1.0), (1.0, 0.25, -0.1), (1.0, 0.0, 0.2)):
        with pytest.raises(ValueError):
            slip_to_omega(*bad)


@given(st.floats(0.01, 10.0), st.floats(0.01, 2.0), st.floats(0.0, 0.99))
def test_slip_roundtrip(v, r, s):
    assert omega_to_slip(v, r, slip_to_omega(v, r, s)) == pytest.approx(s, abs=1e-12)


@given(st.floats(-1e3, 1e3), st.floats(1.0, 1e3))
def test_slope_is_the_arctangent_of_pull_over_load(dbp, load):
    assert math.tan(math.radians(traction_slope(dbp, load))) == pytest.approx(dbp / load, rel=1e-12, abs=1e-15)


def test_wheel_rig_validation_and_implement():
    rig = WheelRig(slip=0.5)
    assert rig.omega == pytest.approx(1.0 / (0.47 * 0.5)) and rig.load == pytest.approx(196.2)
    wheel = rig.implement((0.0, 0.0, 0.47))
    # contact point at the bottom moves at v - omega r, backward under positive slip
    assert wheel.surface_velocity(np.array([[0.0, 0.0, 0.0]]))[0, 0] == pytest.approx(1.0 - rig.omega * 0.47)
    for bad in (dict(radius=0.0), dict(slip=1.0), dict(duration=0.0), dict(tail_fraction=1.0)):
        with pytest.raises(ValueError):
            WheelRig(**bad)


# ------------------------------------------------------------------ SCM runs
def test_free_rolling_wheel_develops_no_thrust(ref_params):
    run = run_scm_wheel(WheelRig(slip=0.0, duration=2.0), ref_params)
    assert run.steady_dbp <= 0.05 * run.load
    assert run.sinkage[-1] > 0 and np.all(np.isfinite(run.dbp))
    assert run.slope_deg == pytest.approx(traction_slope(run.steady_dbp, run.load), abs=1e-12)


def test_scm_pull_grows_with_slip(ref_params):
    curve = slip_sweep(WheelRig(duration=2.0), [0.0, 0.3, 0.6], "SCM", ref_params)
    assert np.all(np.diff(curve.dbp) > 0)


def test_wheel_leaving_the_strip_is_an_error(ref_params):
    with pytest.raises(RigError, match="left the terrain"):
        run_scm_wheel(WheelRig(duration=1.0), ref_params, ScmTerrain(length=0.3))


def test_process_pool_matches_serial(ref_params):
    rig = WheelRig(duration=0.3)
    serial = slip_sweep(rig, [0.1, 0.4], "SCM", ref_params)
    pooled = slip_sweep(rig, [0.1, 0.4], "SCM", ref_params, workers=2)
    assert np.array_equal(serial.dbp, pooled.dbp) and np.array_equal(serial.slope_deg, pooled.slope_deg)


def test_sweep_argument_errors(ref_params):
    for slips in ([], [0.3, 0.1], [0.2, 0.2], [0.5, 1.0]):
        with pytest.raises(ValueError):
            slip_sweep(WheelRig(), slips, "SCM", ref_params)
    with pytest.raises(ValueError, match="unknown backend"):
        slip_sweep(WheelRig(), [0.0], "FEM", ref_params)
    with pytest.raises(ValueError, match="settled bed"):
        slip_sweep(WheelRig(), [0.0], "DEM")


def test_single_slip_gives_single_point_curve(ref_params):
    curve = slip_sweep(WheelRig(duration=0.2), [0.0], "SCM", ref_params)
    assert curve.slip.tolist() == [0.0] and len(curve.dbp) == 1


# ------------------------------------------------------------------ curves
def _curve(dbp, backend="SCM"):
    s = np.linspace(0, 0.8, len(dbp))
    d = np.asarray(dbp, float)
    return SlipCurve(backend, s, d, np.degrees(np.arctan(d / 196.2)), np.ones(len(d)))


def test_curve_file_roundtrip(tmp_path):
    curve = _curve([-3.0, 10.0, 42.5])
    curve.save(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == CURVE_HEADER and len(lines) == 4
    back = SlipCurve.load(tmp_path / "c.csv")
    assert back.backend == "SCM" and np.array_equal(back.dbp, curve.dbp) and np.array_equal(back.slip, curve.slip)
    (tmp_path / "mixed.csv").write_text(CURVE_HEADER + "\n0,1,1,1,SCM\n0.1,1,1,1,DEM\n")
    with pytest.raises(ValueError, match="mixed"):
        SlipCurve.load(tmp_path / "mixed.csv")
    (tmp_path / "bad.csv").write_text("slip,dbp\n0,1\n")
    with pytest.raises(ValueError, match="header"):
        SlipCurve.load(tmp_path / "bad.csv")


def test_compare_with_itself_is_all_zero():
    c = _curve([-3.0, 10.0, 42.5])
    cmp = compare(c, c)
    assert not cmp.d_dbp.any() and not cmp.d_slope.any() and cmp.max_relative == 0
    assert cmp.same_sign and cmp.monotone_a


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=9), st.data())
def test_compare_is_antisymmetric(a, data):
    b = data.draw(st.lists(st.floats(-100, 100), min_size=len(a), max_size=len(a)))
    ab, ba = compare(_curve(a), _curve(b)), compare(_curve(b), _curve(a))
    assert np.array_equal(ab.d_dbp, -ba.d_dbp) and ab.max_relative == ba.max_relative


def test_compare_needs_matching_grids():
    with pytest.raises(ValueError, match="different slip grids"):
        compare(_curve([1.0, 2.0]), _curve([1.0, 2.0, 3.0]))


def test_comparison_report_lines():
    text = compare(_curve([1.0, 2.0]), _curve([1.0, -1.0], "DEM")).report(("SCM", "DEM"))
    assert "# same sign at every slip: false" in text and "# DEM nondecreasing: false" in text


# ------------------------------------------------------------------ DEM runs
@pytest.mark.slow
def test_dem_wheel_free_rolling_and_oscillation(wheel_bed):
    cfg, bed, _ = wheel_bed
    free = run_dem_wheel(WheelRig.desk_dem(slip=0.0, duration=1.0), bed.system, cfg)
    slipping = run_dem_wheel(WheelRig.desk_dem(slip=0.5, duration=1.0), bed.system, cfg)
    # no net thrust without slip; rolling resistance may make it negative
    assert free.steady_dbp <= 0.1 * free.load
    assert slipping.oscillation() > free.oscillation()


@pytest.mark.slow
def test_dem_wheel_replays_bit_for_bit(wheel_bed):
    cfg, bed, _ = wheel_bed
    rig = WheelRig.desk_dem(slip=0.3, duration=0.1)
    a, b = run_dem_wheel(rig, bed.system, cfg), run_dem_wheel(rig, bed.system, cfg)
    assert np.array_equal(a.dbp, b.dbp) and np.array_equal(a.sinkage, b.sinkage)


def test_dem_track_must_fit():
    cfg = RigConfig.desk(bin_size=(0.5, 0.12, 0.2))
    bed = ParticleSystem(np.array([[0.25, 0.06, 0.005]]), material=cfg.material)
    with pytest.raises(RigError, match="does not fit"):
        run_dem_wheel(WheelRig.desk_dem(duration=3.5), bed, cfg)
    with pytest.raises(RigError, match="wider"):
        run_dem_wheel(WheelRig.desk_dem(width=0.2, duration=0.5), bed, cfg)
