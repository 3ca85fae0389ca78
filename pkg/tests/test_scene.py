from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from foveascan.geometry import Rig, RgbCamera, RobotPose, angle_between_deg, rotate_about, unit
from foveascan.scene import (SKY_FRACTION, Illuminant, IlluminantKind, LeafSensorModel, Panel, Plant, Scene,
                             attach_sensor, collection_window, foliage_reflectance, halogen_spectrum,
                             illuminant_spectrum, radiance, radiance_rays, sensor_reflectance, solar_spectrum,
                             trace_ray, trace_rays)
from foveascan.spectral import default_grid, nearest_band

SENSOR = LeafSensorModel("s", (0.0, 0.914, 0.5), (0.0, -1.0, 0.0))


# --- reflectance models ---------------------------------------------------------


def test_sensor_peak_at_normal_incidence():
    assert sensor_reflectance(SENSOR, 650.0, 0.0) == pytest.approx(0.68, abs=1e-12)


def test_sensor_peak_shifted_at_ten_degrees():
    assert sensor_reflectance(SENSOR, 650.0, 10.0) < SENSOR.baseline_reflectance + 1e-3
    # the peak itself has moved to 670 nm and is tiny because of the window
    lam = np.linspace(600, 720, 12001)
    r = sensor_reflectance(SENSOR, lam, 10.0)
    assert lam[np.argmax(r)] == pytest.approx(670.0, abs=0.01)


def test_sensor_attenuated_at_eight_degrees():
    assert sensor_reflectance(SENSOR, 666.0, 8.0) - SENSOR.baseline_reflectance <= 0.05 * 0.6


def test_window_shape():
    assert collection_window(0.0) == 1.0
    assert collection_window(2.0) == 1.0
    assert collection_window(4.0) >= 0.5
    assert collection_window(6.0) <= 0.05
    th = np.linspace(0, 12, 1201)
    assert np.all(np.diff(collection_window(th)) <= 0)


def test_negative_angle_rejected():
    with pytest.raises(ValueError):
        sensor_reflectance(SENSOR, 650.0, -1.0)


def test_sensor_argmax_tracks_shift():
    g = default_grid()
    for theta in range(0, 11, 2):
        r = sensor_reflectance(SENSOR, g.centers, float(theta)) - SENSOR.baseline_reflectance
        assert abs(g.centers[np.argmax(r)] - (650 + 2.0 * theta)) <= g.band_spacing()


def test_beyond_six_degrees_small():
    lam = np.linspace(400, 1000, 6001)
    for theta in (6.01, 7.0, 9.0, 15.0):
        assert np.max(sensor_reflectance(SENSOR, lam, theta) - 0.08) <= 0.05 * 0.6


def test_reflectance_continuity():
    # finite-difference slopes stay below an analytic bound for the Gaussian line
    sigma = 12.0 / (2 * math.sqrt(2 * math.log(2)))
    lam_bound = 0.6 / sigma * math.exp(-0.5) + 1e-3
    lam = np.arange(600, 720, 0.01)
    for theta in (0.0, 3.0, 5.0):
        dr = np.abs(np.diff(sensor_reflectance(SENSOR, lam, theta))) / 0.01
        assert dr.max() <= lam_bound
    th = np.arange(0, 10, 0.01)
    # d/dtheta: window slope (pi/(4 ramp)) * amp plus shift term amp * 2/sigma * e^-1/2
    th_bound = 0.6 * (math.pi / 8 + 2.0 / sigma * math.exp(-0.5)) + 1e-3
    for lam0 in (650.0, 656.0, 660.0):
        dr = np.abs(np.diff(sensor_reflectance(SENSOR, lam0, th))) / 0.01
        assert dr.max() <= th_bound


@given(st.floats(400, 1000), st.floats(0, 30))
def test_reflectance_bounds(lam, theta):
    r = sensor_reflectance(SENSOR, lam, theta)
    assert 0 <= r <= 1.05
    f = foliage_reflectance(lam)
    assert 0 <= f <= 1


def test_foliage_examples():
    assert foliage_reflectance(535.0) == pytest.approx(0.25, abs=0.01)
    assert foliage_reflectance(900.0) == pytest.approx(0.5, abs=1e-6)
    assert foliage_reflectance(450.0) == pytest.approx(0.05, abs=0.01)
    edge = foliage_reflectance(np.linspace(700, 740, 401))
    assert np.all(np.diff(edge) >= 0)


# --- illumination ------------------------------------------------------------------


def test_solar_dips():
    ratio = solar_spectrum(760.0) / solar_spectrum(740.0)
    # undipped blackbody ratio times the 0.7 dip
    bb = solar_spectrum(760.0, depth=0.0) / solar_spectrum(740.0, depth=0.0)
    assert ratio == pytest.approx(0.7 * bb, rel=1e-3)
    assert ratio == pytest.approx(0.7, abs=0.03)


def test_halogen_smooth_positive():
    lam = np.linspace(400, 1000, 601)
    h = halogen_spectrum(lam)
    assert np.all(h > 0)
    # single smooth maximum at the Wien wavelength of a 3200 K source: no dips
    k = int(np.argmax(h))
    assert lam[k] == pytest.approx(2.8978e6 / 3200, abs=1.0)
    assert np.all(np.diff(h[:k + 1]) > 0) and np.all(np.diff(h[k:]) < 0)


def test_combined_without_lamp_equals_solar():
    lam = default_grid().centers
    solar = illuminant_spectrum(Illuminant(IlluminantKind.SOLAR), lam)
    comb = illuminant_spectrum(Illuminant(IlluminantKind.COMBINED, halogen_on=False), lam)
    assert np.array_equal(solar, comb)
    on = illuminant_spectrum(Illuminant(IlluminantKind.COMBINED, halogen_on=True), lam)
    assert np.allclose(on, solar + halogen_spectrum(lam))


def test_halogen_only_dark_when_off():
    lam = default_grid().centers
    assert not illuminant_spectrum(Illuminant(IlluminantKind.HALOGEN), lam).any()
    assert np.allclose(illuminant_spectrum(Illuminant(IlluminantKind.HALOGEN, halogen_on=True), lam),
                       halogen_spectrum(lam))


# --- ray casting ------------------------------------------------------------------------


def _sensor_scene(**kw):
    return Scene(sensors=(SENSOR,), ground=False, **kw)


def test_trace_along_normal():
    hit = trace_ray(_sensor_scene(), (0.0, 0.0, 0.5), (0.0, 1.0, 0.0))
    assert hit.surface_id == "s"
    assert hit.distance_m == pytest.approx(0.914, abs=1e-12)
    assert hit.incidence_deg == pytest.approx(0.0, abs=1e-9)


def test_trace_miss_sky():
    assert trace_ray(_sensor_scene(), (0.0, 0.0, 0.5), (0.0, -1.0, 0.0)) is None
    assert trace_ray(_sensor_scene(), (0.0, 0.0, 0.5), (0.0, 0.0, 1.0)) is None


@pytest.mark.parametrize("deg", [0.5, 1.0, 5.0])
def test_trace_oblique_incidence(deg):
    # aim at the sensor centre from a point rotated deg about the vertical through the centre
    c = np.array(SENSOR.center)
    off = rotate_about(np.array([0.0, -0.914, 0.0]), (0, 0, 1), math.radians(deg))
    origin = c + off
    hit = trace_ray(_sensor_scene(), origin, unit(c - origin))
    assert hit.surface_id == "s"
    assert hit.incidence_deg == pytest.approx(deg, abs=1e-9)


def test_trace_requires_unit_direction():
    with pytest.raises(ValueError):
        trace_ray(_sensor_scene(), (0, 0, 0.5), (0, 2.0, 0))


def test_trace_rays_brute_force():
    # independent oracle: solve each ray-quad intersection with a 3x3 linear system
    rng = np.random.default_rng(3)
    plants = tuple(Plant(f"p{i}", (0.45 * i, 0.919 + 0.1 * (i % 2), 0.5)) for i in range(4))
    sensors = (attach_sensor(plants[1], "s1", 0.5, 0.05, yaw_deg=10), attach_sensor(plants[2], "s2", 0.6))
    scene = Scene(rows=(plants,), sensors=sensors, ground=True)
    origin = np.array([0.6, 0.0, 0.5])
    dirs = unit(np.column_stack([rng.uniform(-0.8, 0.8, 400), np.ones(400), rng.uniform(-0.8, 0.6, 400)]))
    idx, dist, _ = trace_rays(scene, origin, dirs)
    quads = [(s.id, np.array(s.center), np.array(s.normal), s.extent) for s in sensors] + \
            [(p.id, np.array(p.center), np.array(p.normal), (p.width, p.height)) for p in plants]
    from foveascan.scene import quad_axes
    for d, i, t in zip(dirs, idx, dist):
        best = (math.inf, None)
        for qid, c, n, (w, h) in quads:
            a, b = quad_axes(n)
            M = np.column_stack([d, -a, -b])
            tt, pa, pb = np.linalg.solve(M, c - origin)
            if tt > 0 and abs(pa) <= w / 2 and abs(pb) <= h / 2 and tt < best[0]:
                best = (tt, qid)
        if d[2] < 0:
            tg = -origin[2] / d[2]
            if tg < best[0]:
                best = (tg, "ground")
        got = None if i < 0 else scene.surface_ids[i]
        assert got == best[1]
        if got is not None:
            assert t == pytest.approx(best[0], abs=1e-12)


def test_occlusion_nearest_wins():
    front = Panel("front", (0.0, 0.5, 0.5), (0, -1, 0), 0.1, 0.1, 0.5)
    scene = Scene(sensors=(SENSOR,), panels=(front,), ground=False)
    assert trace_ray(scene, (0, 0, 0.5), (0, 1, 0)).surface_id == "front"


# --- radiance -------------------------------------------------------------------------------


def test_radiance_sensor_under_halogen_peaks_at_650():
    g = default_grid()
    ill = Illuminant(IlluminantKind.HALOGEN, halogen_on=True)
    s = radiance(_sensor_scene(illuminant=ill), (0, 0, 0.5), (0, 1, 0), g)
    refl = s.values / illuminant_spectrum(ill, g.centers)
    assert nearest_band(g, 650.0) == int(np.argmax(refl))
    assert np.allclose(s.values, sensor_reflectance(SENSOR, g.centers, 0.0) * halogen_spectrum(g.centers))


def test_radiance_foliage_has_red_edge_no_peak():
    g = default_grid()
    plant = Plant("p", (0.0, 0.919, 0.5))
    ill = Illuminant(IlluminantKind.HALOGEN, halogen_on=True)
    s = radiance(Scene(rows=((plant,),), illuminant=ill, ground=False), (0, 0, 0.5), (0, 1, 0), g)
    refl = s.values / illuminant_spectrum(ill, g.centers)
    assert np.allclose(refl, foliage_reflectance(g.centers))
    band = slice(nearest_band(g, 600), nearest_band(g, 690))
    assert np.all(np.diff(refl[band]) <= 1e-12) or refl[band].max() < 0.1
    assert refl[nearest_band(g, 760)] > 3 * refl[nearest_band(g, 680)]


def test_radiance_miss_is_sky():
    g = default_grid()
    s = radiance(_sensor_scene(), (0, 0, 0.5), (0, 0, 1), g)
    assert np.allclose(s.values, SKY_FRACTION * solar_spectrum(g.centers))


def test_radiance_non_negative_and_deterministic():
    g = default_grid()
    rng = np.random.default_rng(0)
    plants = tuple(Plant(f"p{i}", (0.45 * i, 0.919, 0.5)) for i in range(3))
    scene = Scene(rows=(plants,), sensors=(attach_sensor(plants[1], "s", 0.5),),
                  illuminant=Illuminant(IlluminantKind.COMBINED, halogen_on=True))
    dirs = unit(rng.normal(size=(300, 3)))
    a, *_ = radiance_rays(scene, (0.4, 0, 0.5), dirs, g)
    b, *_ = radiance_rays(scene, (0.4, 0, 0.5), dirs, g)
    assert np.all(a >= 0)
    assert a.tobytes() == b.tobytes()


# --- scene construction ---------------------------------------------------------------------


def test_sensor_must_reference_plant():
    with pytest.raises(ValueError):
        Scene(sensors=(LeafSensorModel("s", (0, 1, 0.5), (0, -1, 0), plant_id="nope"),))


def test_attach_sensor_on_foliage():
    p = Plant("p", (1.0, 0.919, 0.5))
    s = attach_sensor(p, "s", 0.55, 0.1, yaw_deg=6.0)
    assert s.center[1] == pytest.approx(0.914)
    assert s.center[2] == 0.55
    assert angle_between_deg(s.normal, p.normal) == pytest.approx(6.0)
    with pytest.raises(ValueError):
        attach_sensor(p, "t", 0.95)


def test_duplicate_ids_rejected():
    p = Plant("x", (0, 1, 0.5))
    with pytest.raises(ValueError):
        Scene(rows=((p,),), panels=(Panel("x", (0, 1, 0.5), (0, -1, 0), 1, 1, 0.5),))


# --- RGB camera ------------------------------------------------------------------------------


def test_rgb_projection_roundtrip():
    rgb, rig, pose = RgbCamera(), Rig(), RobotPose(0.3, -0.1, 0.2)
    rng = np.random.default_rng(0)
    for _ in range(50):
        uv = np.array([rng.uniform(0, 1280), rng.uniform(0, 1024)])
        d = rgb.ray(uv, pose)
        X = rig.rgb_origin(pose) + d * rng.uniform(0.5, 2.0)
        back, depth = rgb.project(X, pose, rig)
        assert np.allclose(back[0], uv, atol=1e-9)
        assert depth[0] > 0


def test_rgb_axes_look_left():
    fwd, right, up = RgbCamera().axes(RobotPose())
    assert np.allclose(fwd, (0, 1, 0)) and np.allclose(right, (1, 0, 0)) and np.allclose(up, (0, 0, 1))
