import json

import numpy as np
import pytest

from raypos.scene import (
    BaseStation,
    Scene,
    SceneError,
    SceneGenConfig,
    generate_clutter_scene,
    load_scene,
    save_scene,
    triangle_normals,
    validate_scene,
)


def test_empty_room_triangle_count(empty_room):
    # shoebox shell = 12 triangles
    assert empty_room.n_triangles == 12


def test_clutter_adds_12_triangles_each():
    for c in (1, 5, 20):
        sc = generate_clutter_scene(SceneGenConfig(clutter_count=c, seed=3))
        assert sc.n_triangles == 12 + 12 * c


def test_room_normals_point_outward(empty_room):
    center = empty_room.bounds.mean(axis=0)
    normals = triangle_normals(empty_room.triangles[:12])
    centroids = empty_room.triangles[:12].mean(axis=1)
    # outward winding: normal agrees with center -> centroid direction
    assert np.all(np.einsum("ij,ij->i", normals, centroids - center) > 0)


def test_normals_unit_length(clutter_room):
    normals = triangle_normals(clutter_room.triangles)
    np.testing.assert_allclose(np.linalg.norm(normals, axis=1), 1.0, atol=1e-12)


def test_stations_at_inset_top_corners(empty_room):
    lo, hi = empty_room.bounds
    assert len(empty_room.stations) == 4
    assert sorted(s.id for s in empty_room.stations) == [0, 1, 2, 3]
    for s in empty_room.stations:
        assert s.position[2] == pytest.approx(hi[2] - 0.1)
        assert min(abs(s.position[0] - lo[0]), abs(s.position[0] - hi[0])) == pytest.approx(0.1)
        assert min(abs(s.position[1] - lo[1]), abs(s.position[1] - hi[1])) == pytest.approx(0.1)


def test_generation_deterministic():
    a = generate_clutter_scene(SceneGenConfig(clutter_count=10, seed=42))
    b = generate_clutter_scene(SceneGenConfig(clutter_count=10, seed=42))
    np.testing.assert_array_equal(a.triangles, b.triangles)
    assert a.hash() == b.hash()
    c = generate_clutter_scene(SceneGenConfig(clutter_count=10, seed=43))
    assert a.hash() != c.hash()


def test_clutter_boxes_disjoint_and_in_bounds():
    sc = generate_clutter_scene(SceneGenConfig(clutter_count=20, seed=7))
    lo, hi = sc.bounds
    boxes = []
    for i in range(20):
        tris = sc.triangles[12 + 12 * i : 24 + 12 * i]
        pts = tris.reshape(-1, 3)
        bmin, bmax = pts.min(axis=0), pts.max(axis=0)
        assert np.all(bmin >= lo - 1e-9) and np.all(bmax <= hi + 1e-9)
        assert bmin[2] == pytest.approx(lo[2])  # floor-seated
        boxes.append((bmin, bmax))
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            (amin, amax), (bmin, bmax) = boxes[i], boxes[j]
            overlap = np.all(amin[:2] < bmax[:2]) and np.all(bmin[:2] < amax[:2])
            assert not overlap


def test_validate_flags_degenerate_triangle(empty_room):
    tris = empty_room.triangles.copy()
    tris[0, 1] = tris[0, 0]  # collapse an edge
    bad = Scene(triangles=tris, stations=empty_room.stations,
                bounds=empty_room.bounds, ue_plane_z=0.0)
    assert any("degenerate" in v for v in validate_scene(bad))


def test_validate_flags_station_outside_bounds(empty_room):
    stations = list(empty_room.stations) + [BaseStation(9, np.array([100.0, 0.0, 1.0]))]
    bad = Scene(triangles=empty_room.triangles, stations=stations,
                bounds=empty_room.bounds, ue_plane_z=0.0)
    assert validate_scene(bad)


def test_save_load_round_trip(tmp_path, clutter_room):
    p = tmp_path / "scene.json"
    save_scene(clutter_room, str(p))
    back = load_scene(str(p))
    np.testing.assert_array_equal(back.triangles, clutter_room.triangles)
    assert back.hash() == clutter_room.hash()
    assert back.ue_plane_z == clutter_room.ue_plane_z
    assert [s.id for s in back.stations] == [s.id for s in clutter_room.stations]


def test_load_rejects_malformed_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{\n  \"format\": 1,\n  oops\n}")
    with pytest.raises(SceneError, match="line"):
        load_scene(str(p))


def test_load_rejects_unknown_format(tmp_path, empty_room):
    p = tmp_path / "scene.json"
    save_scene(empty_room, str(p))
    doc = json.loads(p.read_text())
    doc["format"] = 99
    p.write_text(json.dumps(doc))
    with pytest.raises(SceneError):
        load_scene(str(p))
