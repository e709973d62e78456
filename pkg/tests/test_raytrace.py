import numpy as np
import pytest

from raypos.scene import BaseStation, Scene, SceneGenConfig, generate_clutter_scene
from raypos.raytrace import (
    DegenerateReflection,
    Ray,
    intersect_ray_triangle,
    nearest_hit,
    reflect,
    trace_directions,
    trace_reverse,
)


def oracle_intersect(tri, o, d):
    """Plane intersection followed by a barycentric inside test; independent
    of the production Moeller-Trumbore path."""
    v0, v1, v2 = tri
    n = np.cross(v1 - v0, v2 - v0)
    denom = float(n @ d)
    if abs(denom) < 1e-14:
        return None
    t = float(n @ (v0 - o)) / denom
    if t <= 1e-6:
        return None
    p = o + t * d
    # barycentric coordinates via the 2x2 Gram system
    a, b = v1 - v0, v2 - v0
    w = p - v0
    g11, g12, g22 = a @ a, a @ b, b @ b
    det = g11 * g22 - g12 * g12
    u = (g22 * (w @ a) - g12 * (w @ b)) / det
    v = (g11 * (w @ b) - g12 * (w @ a)) / det
    if u < 0 or v < 0 or u + v > 1:
        return None
    return t


def test_mt_against_plane_barycentric_oracle(rng):
    # [DERIVED] 1e5 random ray/triangle pairs; predicates agree except within
    # a tiny band around the triangle boundary, where either answer is fine.
    agree = 0
    boundary = 0
    for _ in range(100_000):
        tri = rng.uniform(-1, 1, (3, 3))
        o = rng.uniform(-2, 2, 3)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        got = intersect_ray_triangle(Ray(o, d), tri)
        want = oracle_intersect(tri, o, d)
        if (got is None) == (want is None):
            agree += 1
            if got is not None:
                assert got.t == pytest.approx(want, abs=1e-9)
        else:
            boundary += 1
    assert boundary <= 5  # floating-point edge disagreements only
    assert agree >= 99_995


def test_hit_point_on_triangle_plane(rng):
    tri = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    hit = intersect_ray_triangle(Ray(np.array([0.5, 0.5, 3.0]), np.array([0.0, 0.0, -1.0])), tri)
    assert hit.t == pytest.approx(3.0, abs=1e-12)
    np.testing.assert_allclose(hit.point, [0.5, 0.5, 0.0], atol=1e-12)
    # normal is oriented against the incoming ray
    assert hit.normal @ np.array([0.0, 0.0, -1.0]) < 0


def test_two_sided_intersection():
    tri = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    up = intersect_ray_triangle(Ray(np.array([0.5, 0.5, -1.0]), np.array([0.0, 0.0, 1.0])), tri)
    assert up is not None and up.t == pytest.approx(1.0)
    assert up.normal @ np.array([0.0, 0.0, 1.0]) < 0


def test_nearest_hit_grid_matches_brute(rng, clutter_room):
    center = clutter_room.bounds.mean(axis=0)
    for _ in range(400):
        o = center + rng.uniform(-1, 1, 3)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        ray = Ray(o, d)
        a = nearest_hit(clutter_room, ray, accel=True)
        b = nearest_hit(clutter_room, ray, accel=False)
        assert (a is None) == (b is None)
        if a is not None:
            assert a.triangle_index == b.triangle_index
            assert a.t == b.t  # exact selection rule, bitwise equal


def test_reflect_properties(rng):
    for _ in range(500):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        if abs(d @ n) < 1e-6:
            continue
        r = reflect(d, n)
        assert np.linalg.norm(r) == pytest.approx(1.0, abs=1e-12)
        assert r @ n == pytest.approx(-(d @ n), abs=1e-9)  # angle preserved
        # d, n, r coplanar
        assert np.cross(d, n) @ r == pytest.approx(np.cross(d, n) @ d, abs=1e-9)


def test_reflect_grazing_raises():
    with pytest.raises(DegenerateReflection):
        reflect(np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0]))


def test_direct_crossing_empty_room(empty_room):
    # [DERIVED] closed form: from (1, 1, 2) straight down at 45 deg in the
    # xz-plane, the ray meets z=0 at x=3 before hitting any wall.
    station = BaseStation(0, np.array([1.0, 1.0, 2.0]))
    d = np.array([1.0, 0.0, -1.0]) / np.sqrt(2.0)
    crossings = trace_reverse(empty_room, station, d, max_bounces=0)
    assert len(crossings) == 1
    c = crossings[0]
    np.testing.assert_allclose(c.xy, [3.0, 1.0], atol=1e-9)
    assert c.weight == 1.0
    assert c.bounce_count == 0
    assert c.path_length == pytest.approx(2.0 * np.sqrt(2.0), abs=1e-9)


def test_two_crossings_share_weight():
    # raised UE plane: the down-going segment crosses it, the floor bounce
    # crosses it again on the way up -> two crossings of weight 1/2.
    base = generate_clutter_scene(SceneGenConfig(clutter_count=0, seed=0))
    scene = Scene(triangles=base.triangles, stations=base.stations,
                  bounds=base.bounds, ue_plane_z=1.0)
    station = BaseStation(0, np.array([1.0, 1.0, 2.0]))
    d = np.array([1.0, 0.0, -1.0]) / np.sqrt(2.0)
    crossings = trace_reverse(scene, station, d, max_bounces=1)
    assert len(crossings) == 2
    assert [c.weight for c in crossings] == [0.5, 0.5]
    np.testing.assert_allclose(crossings[0].xy, [2.0, 1.0], atol=1e-9)
    np.testing.assert_allclose(crossings[1].xy, [4.0, 1.0], atol=1e-9)
    assert crossings[0].bounce_count == 0 and crossings[1].bounce_count == 1
    assert crossings[0].path_length < crossings[1].path_length


def test_weights_sum_to_one_per_ray(rng, clutter_room):
    station = clutter_room.stations[0]
    dirs = rng.normal(size=(5000, 3))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    xy, bounce, plen, counts = trace_directions(
        clutter_room, station.position, dirs, max_bounces=5
    )
    assert counts.max() <= 6  # at most one crossing per segment
    for c in counts:
        if c:
            assert abs(c * (1.0 / c) - 1.0) <= 1e-12
    assert counts.sum() > 0


def test_trace_batch_grid_equals_brute(rng, clutter_room):
    station = clutter_room.stations[1]
    dirs = rng.normal(size=(2000, 3))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    a = trace_directions(clutter_room, station.position, dirs, 5, accel=True)
    b = trace_directions(clutter_room, station.position, dirs, 5, accel=False)
    np.testing.assert_array_equal(a[3], b[3])  # counts
    for i, c in enumerate(a[3]):
        np.testing.assert_array_equal(a[0][i, :c], b[0][i, :c])
        np.testing.assert_array_equal(a[1][i, :c], b[1][i, :c])
        np.testing.assert_array_equal(a[2][i, :c], b[2][i, :c])


def test_max_bounces_zero_means_single_segment(empty_room, rng):
    station = empty_room.stations[0]
    dirs = rng.normal(size=(500, 3))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    xy, bounce, plen, counts = trace_directions(empty_room, station.position, dirs, 0)
    assert counts.max() <= 1
    for i, c in enumerate(counts):
        assert np.all(bounce[i, :c] == 0)


def test_ray_requires_unit_direction():
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([0.0, 0.0, 2.0]))
