import math

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from raypos.scene import BaseStation, Scene, SceneGenConfig, generate_clutter_scene
from raypos.sampling import (
    Angle,
    GroundTruthOpts,
    MeasurementModel,
    UnreachableUEError,
    angle_density,
    fold_azimuth,
    fold_polar,
    ground_truth_aoa,
    launch_map,
    make_rng,
    sample_aod,
    sample_aods,
)
from raypos.raytrace import trace_reverse


def test_fold_azimuth_wraps():
    assert fold_azimuth(2 * math.pi + 0.3) == pytest.approx(0.3)
    assert fold_azimuth(-0.3) == pytest.approx(2 * math.pi - 0.3)
    assert fold_azimuth(0.0) == 0.0


def test_fold_polar_reflects():
    assert fold_polar(-0.1) == pytest.approx(0.1)
    assert fold_polar(math.pi + 0.1) == pytest.approx(math.pi - 0.1)
    assert fold_polar(1.0) == pytest.approx(1.0)


def test_angle_validation():
    with pytest.raises(ValueError):
        Angle(-0.1, 1.0)
    with pytest.raises(ValueError):
        Angle(0.0, 3.2)


def test_vector_round_trip(rng):
    for _ in range(1000):
        a = Angle(rng.uniform(0, 2 * math.pi), rng.uniform(1e-3, math.pi - 1e-3))
        b = Angle.from_vector(a.to_vector())
        assert b.azimuth == pytest.approx(a.azimuth, abs=1e-9)
        assert b.polar == pytest.approx(a.polar, abs=1e-9)
        assert np.linalg.norm(a.to_vector()) == pytest.approx(1.0, abs=1e-12)


def test_measurement_model_units():
    m = MeasurementModel.from_variance_deg2(1.0)
    assert m.sigma == pytest.approx(math.radians(1.0))
    assert MeasurementModel.from_variance_deg2(0.25).sigma == pytest.approx(
        math.radians(0.5)
    )


def test_sample_aods_moments():
    # [DERIVED] CLT bound: mean within 4 sigma/sqrt(n), std within 5%
    y = Angle(1.0, 1.2)
    m = MeasurementModel.from_variance_deg2(1.0)
    az, pol = sample_aods(y, m, make_rng(99), 200_000)
    se = m.sigma / math.sqrt(len(az))
    assert np.mean(az) == pytest.approx(y.azimuth, abs=4 * se)
    assert np.mean(pol) == pytest.approx(y.polar, abs=4 * se)
    assert np.std(az) == pytest.approx(m.sigma, rel=0.05)
    assert np.std(pol) == pytest.approx(m.sigma, rel=0.05)


def test_sample_aods_stratified_and_deterministic():
    # [DERIVED] stratification: one azimuth draw per normal-CDF stratum of
    # width 1/n, so stratum indices of the sorted sample are 0..n-1 exactly
    y = Angle(0.5, 1.0)
    m = MeasurementModel.from_variance_deg2(1.0)
    n = 256
    az, pol = sample_aods(y, m, make_rng(7), n)
    for comp, center in ((az, y.azimuth), (pol, y.polar)):
        u = norm.cdf(np.sort(comp - center), scale=m.sigma)
        assert np.array_equal(np.floor(u * n).astype(int), np.arange(n))
    az2, pol2 = sample_aods(y, m, make_rng(7), n)
    assert np.array_equal(az, az2) and np.array_equal(pol, pol2)


def test_angle_density_normalizes():
    # [DERIVED] quadrature over the (azimuth, polar) box equals 1 +/- 1e-3
    y = Angle(0.3, math.pi / 2)
    m = MeasurementModel.from_variance_deg2(4.0)
    val, _ = integrate.dblquad(
        lambda pol, az: angle_density(Angle(az, pol), y, m),
        0.0, 2 * math.pi, math.pi / 2 - 0.5, math.pi / 2 + 0.5,
    )
    assert val == pytest.approx(1.0, abs=1e-3)


def test_angle_density_azimuth_wrap_symmetry():
    # a measurement near 0 gives equal density just below 2pi and just above 0
    m = MeasurementModel.from_variance_deg2(1.0)
    y = Angle(0.0, math.pi / 2)
    d = math.radians(0.5)
    lo = angle_density(Angle(2 * math.pi - d, math.pi / 2), y, m)
    hi = angle_density(Angle(d, math.pi / 2), y, m)
    assert lo == pytest.approx(hi, rel=1e-12)


def test_angle_density_zero_sigma_raises():
    y = Angle(0.0, 1.0)
    with pytest.raises(ValueError):
        angle_density(y, y, MeasurementModel(0.0))


def test_launch_map_deterministic(empty_room):
    st = empty_room.stations[0]
    y = Angle(0.8, 2.0)
    m = MeasurementModel.from_variance_deg2(1.0)
    a = launch_map(empty_room, st, y, m, 2000, make_rng(0xA0, 1))
    b = launch_map(empty_room, st, y, m, 2000, make_rng(0xA0, 1))
    np.testing.assert_array_equal(a.points, b.points)
    np.testing.assert_array_equal(a.weights, b.weights)
    assert a.n_discarded == b.n_discarded


def test_launch_map_points_in_bounds(clutter_room):
    st = clutter_room.stations[2]
    m = MeasurementModel.from_variance_deg2(1.0)
    pmap = launch_map(clutter_room, st, Angle(4.0, 2.2), m, 5000, make_rng(3))
    lo, hi = clutter_room.bounds[0, :2], clutter_room.bounds[1, :2]
    assert np.all(pmap.points >= lo) and np.all(pmap.points <= hi)
    assert np.all(pmap.weights > 0)
    assert pmap.total_weight <= pmap.n_rays + 1e-9


def test_ground_truth_los_matches_closed_form(empty_room):
    # [DERIVED] LoS geometry: angle of the straight station->UE segment
    st = empty_room.stations[0]
    ue = np.array([4.0, 9.0])
    got = ground_truth_aoa(empty_room, st, ue, GroundTruthOpts(n_directions=20_000))
    v = np.array([ue[0], ue[1], empty_room.ue_plane_z]) - st.position
    want = Angle.from_vector(v)
    assert got.azimuth == pytest.approx(want.azimuth, abs=1e-9)
    assert got.polar == pytest.approx(want.polar, abs=1e-9)


def test_ground_truth_retraces_to_ue(clutter_room):
    # property: launching a ray along the returned AoA passes within eps_hit
    st = clutter_room.stations[0]
    opts = GroundTruthOpts(n_directions=100_000, eps_hit=0.05)
    for ue in (np.array([6.5, 3.0]), np.array([4.0, 10.5])):
        a = ground_truth_aoa(clutter_room, st, ue, opts)
        crossings = trace_reverse(clutter_room, st, a.to_vector(), opts.max_bounces)
        dmin = min(np.linalg.norm(c.xy - ue) for c in crossings)
        assert dmin <= opts.eps_hit


def test_ground_truth_unreachable_raises(empty_room):
    # UE sealed inside a clutter box: no ray can approach it
    boxed = generate_clutter_scene(SceneGenConfig(clutter_count=0, seed=0))
    s = 1.0
    cx, cy = 4.0, 9.0
    box = np.array([cx - s, cy - s, 0.0]), np.array([cx + s, cy + s, 1.0])
    from raypos.scene import _box_triangles

    tris = np.concatenate([boxed.triangles, _box_triangles(box[0], box[1])])
    scene = Scene(triangles=tris, stations=boxed.stations, bounds=boxed.bounds,
                  ue_plane_z=0.0)
    st = scene.stations[0]
    with pytest.raises(UnreachableUEError):
        ground_truth_aoa(scene, st, np.array([cx, cy]),
                         GroundTruthOpts(n_directions=5000, max_bounces=2))
