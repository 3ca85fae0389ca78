from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foveascan.geometry import Rig, RgbCamera, RobotPose
from foveascan.perception import (CaptureGate, Detection, DetectorNoiseModel, GateReason, GridMismatchError,
                                  ResonanceParams, ResonanceReport, TrackStatus, UnacceptedReportError,
                                  VerifiedTarget, approach_angle_deg, capture_gate, detect_resonance,
                                  match_resonance, pooled_centroid_variance, read_detection_log,
                                  reflectance_correct, simulate_detections, true_bboxes, verify_track,
                                  write_detection_log)
from foveascan.scene import LeafSensorModel, Plant, Scene, attach_sensor
from foveascan.spectral import Spectrum, default_grid, make_grid

GRID = default_grid()


# --- detections ---------------------------------------------------------------------


def _scene_with_sensor(distance=0.914, x=0.0, z=0.56):
    plant = Plant("p", (x, distance + 0.005, 0.5))
    return Scene(rows=((plant,),), sensors=(attach_sensor(plant, "s", z, 0.0),))


def test_noiseless_detection_matches_projection():
    scene = _scene_with_sensor()
    pose, rgb, rig = RobotPose(), RgbCamera(), Rig()
    dets = simulate_detections(scene, pose, rgb, DetectorNoiseModel(), 0, rig)
    assert len(dets) == 1
    d = dets[0]
    assert d.truth_link == "s"
    assert (d.u, d.v, d.w, d.h) == pytest.approx(true_bboxes(scene, pose, rgb, rig)["s"], abs=1e-12)
    # co-planar square at 914 mm: 2000 px x 25.4 mm / 914 mm
    assert d.h == pytest.approx(2000 * 25.4 / 914, rel=1e-12)
    assert d.u == pytest.approx(640.0)


def test_miss_rate_one_detects_nothing():
    scene = _scene_with_sensor()
    assert simulate_detections(scene, RobotPose(), RgbCamera(), DetectorNoiseModel(miss_rate=1.0), 3) == []


def test_detection_stream_deterministic_per_frame():
    scene = _scene_with_sensor()
    noise = DetectorNoiseModel(0.2, 0.3, 2.0, 0.05, seed=9)
    a = [simulate_detections(scene, RobotPose(), RgbCamera(), noise, f) for f in range(20)]
    b = [simulate_detections(scene, RobotPose(), RgbCamera(), noise, f) for f in reversed(range(20))][::-1]
    assert a == b


def test_sensor_behind_camera_or_hidden_not_detected():
    plant = Plant("p", (0.0, 0.919, 0.5))
    s = attach_sensor(plant, "s", 0.5)
    blocker = Plant("b", (0.0, 0.5, 0.5))
    scene = Scene(rows=((plant, blocker),), sensors=(s,))
    assert true_bboxes(scene, RobotPose(), RgbCamera(), Rig()) == {}
    # robot facing the other way sees only the empty side
    assert true_bboxes(_scene_with_sensor(), RobotPose(heading=np.pi), RgbCamera(), Rig()) == {}


def test_detection_log_roundtrip(tmp_path):
    dets = [Detection(2, 600.5, 480.25, 55.0, 55.5, 0.9), Detection(0, 1.0, 2.0, 3.0, 4.0, 0.5)]
    write_detection_log(dets, tmp_path / "d.csv")
    back = read_detection_log(tmp_path / "d.csv")
    assert [d.frame_id for d in back] == [0, 2]
    assert back[1] == dets[0]


def test_detection_log_missing_column(tmp_path):
    (tmp_path / "d.csv").write_text("frame_id,u,v,w\n0,1,2,3\n")
    with pytest.raises(ValueError):
        read_detection_log(tmp_path / "d.csv")


def test_detection_validation():
    with pytest.raises(ValueError):
        Detection(0, 1, 1, 0, 1)
    with pytest.raises(ValueError):
        DetectorNoiseModel(miss_rate=1.5)


# --- verification ----------------------------------------------------------------------


def _stream(centroids, start=0, size=55.0):
    return [Detection(start + i, u, v, size, size) for i, (u, v) in enumerate(centroids)]


def test_three_identical_verify():
    r = verify_track(_stream([(600, 500)] * 3))
    assert r.status is TrackStatus.VERIFIED
    assert r.target.bbox == (600.0, 500.0, 55.0, 55.0)
    assert r.variance_px2 == 0.0


def test_two_detections_not_yet():
    assert verify_track(_stream([(600, 500)] * 2)).status is TrackStatus.NOT_YET


def test_fifty_pixel_spread_rejected():
    r = verify_track(_stream([(600, 500), (650, 500), (700, 500)]))
    assert r.status is TrackStatus.REJECTED
    # u deviations -50, 0, 50: 5000 / (2 * 2)
    assert r.variance_px2 == pytest.approx(1250.0)


def test_frame_gap_resets_streak():
    dets = [Detection(0, 600, 500, 55, 55), Detection(1, 600, 500, 55, 55), Detection(3, 600, 500, 55, 55)]
    assert verify_track(dets).status is TrackStatus.NOT_YET
    assert verify_track(_stream([(600, 500)] * 3), current_frame=5).status is TrackStatus.NOT_YET


def test_pooled_variance_by_hand():
    # u: 0, 3, 6 -> ss 18; v: 0, 0, 3 -> ss 6; pooled (18 + 6) / 4
    assert pooled_centroid_variance(_stream([(0, 0), (3, 0), (6, 3)])) == pytest.approx(6.0)


def test_threshold_boundary_verifies():
    # u: -a, 0, a with v fixed gives variance a^2 / 2; a = sqrt(18) sits exactly on 9 px^2
    a = 18 ** 0.5
    dets = _stream([(100 - a, 100), (100, 100), (100 + a, 100)])
    var = pooled_centroid_variance(dets)
    r = verify_track(dets, centroid_var_thresh_px2=var)
    assert r.status is TrackStatus.VERIFIED
    assert verify_track(dets, centroid_var_thresh_px2=np.nextafter(var, 0)).status is TrackStatus.REJECTED


def test_scripted_fixture_set_exhaustive():
    offsets = [(0, 0), (1, 0), (0, 2), (3, 3), (5, 0), (0, -6), (10, 10)]
    for length in (1, 2, 3, 4):
        for combo in itertools.product(offsets, repeat=length):
            dets = _stream([(500 + du, 400 + dv) for du, dv in combo])
            r = verify_track(dets)
            if length < 3:
                assert r.status is TrackStatus.NOT_YET
                continue
            var = pooled_centroid_variance(dets[-3:])
            expected = TrackStatus.VERIFIED if var <= 9.0 else TrackStatus.REJECTED
            assert r.status is expected


@settings(max_examples=100)
@given(st.lists(st.tuples(st.floats(-20, 20), st.floats(-20, 20)), min_size=3, max_size=6),
       st.floats(-500, 500), st.floats(-500, 500))
def test_verify_translation_invariant(cents, du, dv):
    base = verify_track(_stream([(600 + u, 500 + v) for u, v in cents]))
    moved = verify_track(_stream([(600 + u + du, 500 + v + dv) for u, v in cents]))
    assert base.status == moved.status or abs(base.variance_px2 - 9.0) < 1e-6


def test_truth_link_majority():
    dets = [Detection(i, 600, 500, 55, 55, truth_link=l) for i, l in enumerate(["a", None, "a"])]
    assert verify_track(dets).target.truth_link == "a"


# --- capture gate --------------------------------------------------------------------------


def _target(h, u=640.0, v=None, gate=CaptureGate()):
    d = gate.rgb_focal_px * gate.sensor_size_mm / h
    if v is None:
        v = gate.principal_point[1] + gate.rgb_focal_px * gate.axis_offset_up_mm / d
    return VerifiedTarget(u, v, h, h, 0.0)


def test_gate_nominal_height_passes():
    r = capture_gate(CaptureGate(), _target(55.58))
    assert 889 <= r.est_distance_mm <= 939
    assert r.est_distance_mm == pytest.approx(914.0, abs=0.1)
    assert r.passed and r.reason is GateReason.PASS


def test_gate_fifty_pixels_fails_distance():
    r = capture_gate(CaptureGate(), _target(50.0))
    assert r.est_distance_mm == pytest.approx(1016.0)
    assert not r.passed and r.reason is GateReason.DISTANCE


def test_gate_angle_failure():
    r = capture_gate(CaptureGate(), _target(55.58), approach_angle=5.0)
    assert not r.passed and r.reason is GateReason.ANGLE
    assert capture_gate(CaptureGate(), _target(55.58), approach_angle=4.0).passed


def test_gate_lateral_failure():
    # 40 mm along the row at 914 mm is outside the 76 mm zone
    u = 640 + 2000 * 40 / 914
    r = capture_gate(CaptureGate(), _target(55.58, u=u))
    assert not r.passed and r.reason is GateReason.LATERAL
    assert r.lateral_mm[0] == pytest.approx(40.0, abs=0.1)


def test_gate_reports_all_failures():
    r = capture_gate(CaptureGate(), _target(50.0, u=1200), approach_angle=9.0)
    assert set(r.failures) == {GateReason.DISTANCE, GateReason.LATERAL, GateReason.ANGLE}


def test_approach_angle_from_normal():
    pose = RobotPose()
    assert approach_angle_deg(pose, (0, -1, 0)) == pytest.approx(0.0)
    n = (np.sin(np.radians(3)), -np.cos(np.radians(3)), 0.0)
    assert approach_angle_deg(pose, n) == pytest.approx(3.0)


def test_gate_distance_exact_for_pinhole():
    rng = np.random.default_rng(0)
    rgb, rig, gate = RgbCamera(), Rig(), CaptureGate()
    for _ in range(100):
        pose = RobotPose(float(rng.uniform(-1, 1)), float(rng.uniform(-0.1, 0.1)), 0.0)
        dist = float(rng.uniform(0.889, 0.939))
        s = LeafSensorModel("s", (pose.x + rng.uniform(-0.03, 0.03), pose.y + dist, 0.56), (0.0, -1.0, 0.0))
        box = true_bboxes(Scene(sensors=(s,), ground=False), pose, rgb, rig)["s"]
        r = capture_gate(gate, VerifiedTarget(*box, 0.0))
        assert r.est_distance_mm == pytest.approx(dist * 1000, abs=0.1)


def test_gate_rejects_zero_height():
    with pytest.raises(ValueError):
        capture_gate(CaptureGate(), VerifiedTarget(640, 512, 10, 0, 0))


# --- spectra --------------------------------------------------------------------------------


def _spec(values, grid=GRID):
    return Spectrum(grid, np.asarray(values, dtype=np.float64))


def test_reflectance_identities():
    rng = np.random.default_rng(0)
    dark = _spec(rng.uniform(0, 0.1, GRID.bands))
    white = _spec(dark.values + rng.uniform(0.5, 1.0, GRID.bands))
    assert np.allclose(reflectance_correct(white, white, dark).values, 1.0)
    assert np.allclose(reflectance_correct(dark, white, dark).values, 0.0)
    half = _spec(0.5 * (white.values - dark.values) + dark.values)
    assert np.allclose(reflectance_correct(half, white, dark).values, 0.5)


def test_reflectance_grid_mismatch():
    other = make_grid(400, 1000, 10)
    with pytest.raises(GridMismatchError):
        reflectance_correct(_spec(np.ones(10), other), _spec(np.ones(GRID.bands)), _spec(np.zeros(GRID.bands)))


def test_reflectance_invalid_bands():
    white = np.ones(GRID.bands)
    white[:5] = 0.0
    out = reflectance_correct(_spec(np.ones(GRID.bands)), _spec(white), _spec(np.zeros(GRID.bands)))
    assert not out.valid_mask[:5].any() and out.valid_mask[5:].all()
    white[:50] = 0.0
    with pytest.raises(ValueError):
        reflectance_correct(_spec(np.ones(GRID.bands)), _spec(white), _spec(np.zeros(GRID.bands)))


def _synthetic(sigma, seed=0, centre=650.0):
    lam = GRID.centers
    s = 12.0 / (2 * np.sqrt(2 * np.log(2)))
    clean = 0.08 + 0.6 * np.exp(-0.5 * ((lam - centre) / s) ** 2)
    return _spec(clean + np.random.default_rng(seed).normal(0, sigma, GRID.bands))


@pytest.mark.parametrize("seed", range(5))
def test_peak_detected_at_650(seed):
    r = detect_resonance(_synthetic(0.01, seed))
    assert r.accepted
    assert abs(r.best.wavelength_nm - 650.0) <= GRID.band_spacing()
    assert r.best.snr > 10


def test_flat_spectrum_has_no_peak():
    r = detect_resonance(_spec(np.full(GRID.bands, 0.3)))
    assert r.peaks == () and not r.accepted


@pytest.mark.parametrize("seed", range(5))
def test_heavy_noise_not_accepted(seed):
    assert not detect_resonance(_synthetic(0.5, seed)).accepted


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 100), st.floats(-10, 10), st.integers(0, 100))
def test_affine_invariance(a, b, seed):
    spec = _synthetic(0.01, seed)
    base = detect_resonance(spec)
    scaled = detect_resonance(_spec(a * spec.values + b))
    assert scaled.best.band == base.best.band
    assert scaled.best.snr == pytest.approx(base.best.snr, abs=1e-9 * max(1.0, base.best.snr))


def test_search_range_excludes_far_peaks():
    r = detect_resonance(_synthetic(0.001, centre=850.0))
    assert not r.accepted


def test_report_json_roundtrip():
    import json
    r = detect_resonance(_synthetic(0.01))
    d = json.loads(r.to_json())
    assert d["accepted"] is True and d["peaks"][0]["band"] == r.peaks[0].band


def _report(*wl):
    from foveascan.perception import Peak
    return ResonanceReport(tuple(Peak(w, 0.5, 10.0, 0) for w in wl), True)


def test_match_examples():
    m = match_resonance(_report(662.0), [650.0])
    assert m.matched and m.offset_nm == pytest.approx(12.0)
    m = match_resonance(_report(675.0), [650.0])
    assert not m.matched and m.offset_nm == pytest.approx(25.0)
    m = match_resonance(_report(662.0), [])
    assert m.matched and m.offset_nm == 0.0


def test_match_requires_accepted_report():
    with pytest.raises(UnacceptedReportError):
        match_resonance(ResonanceReport((), False), [650.0])


def test_custom_threshold():
    spec = _synthetic(0.05, 1)
    snr = detect_resonance(spec).best.snr
    assert detect_resonance(spec, ResonanceParams(snr_threshold=snr)).accepted
    assert not detect_resonance(spec, ResonanceParams(snr_threshold=snr + 1e-6)).accepted
