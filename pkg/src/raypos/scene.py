"""Digital-twin geometry: triangle meshes, base stations, scene I/O and
parameterized clutter generation.

Conventions: units are meters, right-handed coordinates with z up, floor at
z=0.  Triangles are stored as an (t, 3, 3) float64 array (vertex-major).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

DEGENERATE_CROSS_NORM = 1e-12
BS_INSET = 0.1  # m, keeps launched rays off the walls/ceiling

SCENE_FORMAT_VERSION = 1


class SceneError(Exception):
    """Scene loading, validation or generation failure."""


@dataclass(frozen=True)
class BaseStation:
    id: int
    position: np.ndarray  # (3,) m

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))


@dataclass
class Scene:
    """Immutable after construction; safe for shared concurrent reads."""

    triangles: np.ndarray  # (t, 3, 3) m
    stations: list[BaseStation]
    bounds: np.ndarray  # (2, 3) [min, max] m
    ue_plane_z: float = 0.0
    normals: np.ndarray = field(init=False)  # (t, 3) unit, derived from winding

    def __post_init__(self):
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.float64)
        self.bounds = np.asarray(self.bounds, dtype=np.float64)
        self.normals = triangle_normals(self.triangles)

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def station_by_id(self, station_id: int) -> BaseStation:
        for bs in self.stations:
            if bs.id == station_id:
                return bs
        raise KeyError(f"no station with id {station_id}")

    def hash(self) -> bytes:
        """SHA-256 of the canonical serialized form (32 bytes)."""
        return hashlib.sha256(_canonical_json(self).encode("utf-8")).digest()


@dataclass
class SceneGenConfig:
    width: float = 8.0
    length: float = 18.0
    height: float = 2.5
    clutter_count: int = 0
    clutter_size_min: float = 0.4  # footprint edge, m
    clutter_size_max: float = 1.5
    clutter_height_min: float = 0.5
    clutter_height_max: float = 2.2
    seed: int = 0
    ue_plane_z: float = 0.0

    def validate(self) -> None:
        if min(self.width, self.length, self.height) <= 0:
            raise SceneError("room dimensions must be positive")
        if self.clutter_count < 0:
            raise SceneError("clutter_count must be >= 0")
        if not (0 < self.clutter_size_min <= self.clutter_size_max):
            raise SceneError("invalid clutter size range")
        if self.clutter_size_max >= min(self.width, self.length):
            raise SceneError("clutter boxes do not fit inside the room")
        if self.clutter_height_max >= self.height:
            raise SceneError("clutter height exceeds room height")
        if not (0.0 <= self.ue_plane_z <= self.height):
            raise SceneError("ue_plane_z outside room")


def triangle_normals(triangles: np.ndarray) -> np.ndarray:
    """Unit normals from vertex winding: normalize((v1-v0) x (v2-v0))."""
    e1 = triangles[:, 1] - triangles[:, 0]
    e2 = triangles[:, 2] - triangles[:, 0]
    n = np.cross(e1, e2)
    norms = np.linalg.norm(n, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return n / safe[:, None]


def _box_triangles(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """12 triangles of an axis-aligned box, outward winding."""
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    # 8 corners
    c = np.array(
        [
            [x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
            [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1],
        ]
    )
    quads = [
        (0, 3, 2, 1),  # floor (z=z0), outward -z
        (4, 5, 6, 7),  # ceiling, outward +z
        (0, 1, 5, 4),  # y=y0
        (2, 3, 7, 6),  # y=y1
        (0, 4, 7, 3),  # x=x0
        (1, 2, 6, 5),  # x=x1
    ]
    tris = []
    for a, b, cc, d in quads:
        tris.append([c[a], c[b], c[cc]])
        tris.append([c[a], c[cc], c[d]])
    return np.array(tris, dtype=np.float64)


def generate_clutter_scene(config: SceneGenConfig) -> Scene:
    """Room shell plus non-overlapping axis-aligned box clutter.

    Deterministic given the config seed; BS are placed at the four top
    corners, inset by ``BS_INSET``.  Raises SceneError if the requested
    clutter count cannot be placed after bounded retries.
    """
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([0x5CE17E, config.seed]))
    w, l, h = config.width, config.length, config.height
    tris = [_box_triangles(np.zeros(3), np.array([w, l, h]))]

    stations = [
        BaseStation(0, np.array([BS_INSET, BS_INSET, h - BS_INSET])),
        BaseStation(1, np.array([w - BS_INSET, BS_INSET, h - BS_INSET])),
        BaseStation(2, np.array([w - BS_INSET, l - BS_INSET, h - BS_INSET])),
        BaseStation(3, np.array([BS_INSET, l - BS_INSET, h - BS_INSET])),
    ]
    bs_xyz = np.array([s.position for s in stations])

    placed: list[tuple[np.ndarray, np.ndarray]] = []
    margin = 0.05
    for i in range(config.clutter_count):
        ok = False
        for _ in range(200):
            sx = rng.uniform(config.clutter_size_min, config.clutter_size_max)
            sy = rng.uniform(config.clutter_size_min, config.clutter_size_max)
            sz = rng.uniform(config.clutter_height_min, config.clutter_height_max)
            x0 = rng.uniform(margin, w - sx - margin)
            y0 = rng.uniform(margin, l - sy - margin)
            lo = np.array([x0, y0, 0.0])
            hi = np.array([x0 + sx, y0 + sy, sz])
            if any(np.all(lo < phi) and np.all(hi > plo) for plo, phi in placed):
                continue
            # keep a clearance ball around each BS
            if np.any(np.linalg.norm(np.clip(bs_xyz, lo, hi) - bs_xyz, axis=1) < 0.2):
                continue
            placed.append((lo, hi))
            tris.append(_box_triangles(lo, hi))
            ok = True
            break
        if not ok:
            raise SceneError(
                f"could not place clutter box {i} of {config.clutter_count} "
                "without overlap after 200 retries"
            )

    return Scene(
        triangles=np.concatenate(tris, axis=0),
        stations=stations,
        bounds=np.array([[0.0, 0.0, 0.0], [w, l, h]]),
        ue_plane_z=config.ue_plane_z,
    )


def validate_scene(scene: Scene) -> list[str]:
    """Return a list of invariant violations (empty iff the scene is valid)."""
    violations: list[str] = []
    t = scene.triangles
    if t.ndim != 3 or t.shape[1:] != (3, 3):
        return [f"triangle array has shape {t.shape}, expected (t, 3, 3)"]
    if scene.n_triangles < 4:
        violations.append(f"triangle count {scene.n_triangles} < 4")

    e1 = t[:, 1] - t[:, 0]
    e2 = t[:, 2] - t[:, 0]
    cross = np.cross(e1, e2)
    cross_norm = np.linalg.norm(cross, axis=1)
    for idx in np.nonzero(cross_norm <= DEGENERATE_CROSS_NORM)[0]:
        violations.append(f"triangle {idx} is degenerate (collinear vertices)")

    good = cross_norm > DEGENERATE_CROSS_NORM
    derived = np.zeros_like(cross)
    derived[good] = cross[good] / cross_norm[good, None]
    mismatch = np.linalg.norm(scene.normals - derived, axis=1) > 1e-9
    for idx in np.nonzero(mismatch & good)[0]:
        violations.append(f"triangle {idx} stored normal does not match winding")

    lo, hi = scene.bounds
    if np.any(lo >= hi):
        violations.append("bounds min not strictly below max")
    verts = t.reshape(-1, 3)
    if np.any(verts < lo - 1e-9) or np.any(verts > hi + 1e-9):
        bad = np.nonzero(
            np.any((t < lo - 1e-9) | (t > hi + 1e-9), axis=(1, 2))
        )[0]
        for idx in bad:
            violations.append(f"triangle {idx} has vertices outside bounds")

    seen_ids = set()
    for bs in scene.stations:
        if bs.id in seen_ids:
            violations.append(f"duplicate station id {bs.id}")
        seen_ids.add(bs.id)
        if np.any(bs.position < lo) or np.any(bs.position > hi):
            violations.append(f"station {bs.id} outside scene bounds")

    if not (lo[2] - 1e-9 <= scene.ue_plane_z <= hi[2] + 1e-9):
        violations.append(f"ue_plane_z {scene.ue_plane_z} outside bounds")
    return violations


# ---------------------------------------------------------------------------
# Scene file I/O (UTF-8 JSON, format version 1)


def _canonical_json(scene: Scene) -> str:
    obj = {
        "format": SCENE_FORMAT_VERSION,
        "bounds": {"min": list(scene.bounds[0]), "max": list(scene.bounds[1])},
        "ue_plane_z": scene.ue_plane_z,
        "stations": [
            {"id": int(bs.id), "position": list(bs.position)} for bs in scene.stations
        ],
        "triangles": [list(tri.reshape(9)) for tri in scene.triangles],
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_scene(scene: Scene, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_canonical_json(scene))
        fh.write("\n")


def load_scene(path: str) -> Scene:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = fh.read()
    except OSError as exc:
        raise SceneError(f"cannot read scene file {path}: {exc}") from exc
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise SceneError(f"parse error in {path} at line {exc.lineno}: {exc.msg}") from exc

    if obj.get("format") != SCENE_FORMAT_VERSION:
        raise SceneError(
            f"unsupported scene format {obj.get('format')!r}, expected {SCENE_FORMAT_VERSION}"
        )
    try:
        tris = np.array([np.asarray(t, dtype=np.float64).reshape(3, 3) for t in obj["triangles"]])
        if len(obj["triangles"]) == 0:
            tris = np.zeros((0, 3, 3))
        stations = [
            BaseStation(int(s["id"]), np.asarray(s["position"], dtype=np.float64))
            for s in obj["stations"]
        ]
        bounds = np.array([obj["bounds"]["min"], obj["bounds"]["max"]], dtype=np.float64)
        scene = Scene(
            triangles=tris,
            stations=stations,
            bounds=bounds,
            ue_plane_z=float(obj["ue_plane_z"]),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise SceneError(f"malformed scene file {path}: {exc}") from exc

    violations = validate_scene(scene)
    if violations:
        raise SceneError("scene validation failed: " + "; ".join(violations))
    return scene
