"""Specular reverse ray tracing over a triangle-soup scene.

The production nearest-hit path runs through a uniform-grid acceleration
structure; a brute-force all-triangle scan (the defining reference) is
available via ``accel=False`` and must agree exactly (see tests).
All operations are pure functions of immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from raypos import _kernels
from raypos._kernels import EPS_T, GRAZE_EPS
from raypos.scene import Scene, BaseStation


class DegenerateReflection(Exception):
    """Grazing incidence: |d.n| below threshold, ray terminated."""


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray  # (3,) m
    direction: np.ndarray  # (3,) unit

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        d = np.asarray(self.direction, dtype=np.float64)
        object.__setattr__(self, "direction", d)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit-norm")


@dataclass(frozen=True)
class Hit:
    t: float  # m along the ray
    point: np.ndarray  # (3,)
    triangle_index: int
    normal: np.ndarray  # (3,) unit, oriented against the ray


@dataclass(frozen=True)
class Crossing:
    xy: np.ndarray  # (2,) m on the UE plane
    weight: float  # 1 / crossings of this ray
    bounce_count: int
    path_length: float  # m


class TriangleGrid:
    """Uniform spatial hash over triangle AABBs (CSR layout)."""

    def __init__(self, scene: Scene, target_cell: float = 0.9):
        lo = scene.bounds[0] - 1e-6
        hi = scene.bounds[1] + 1e-6
        extent = hi - lo
        dims = np.clip(np.round(extent / target_cell).astype(np.int64), 1, 64)
        cell = extent / dims
        self.gmin = lo
        self.dims = dims
        self.cell_size = cell
        self.inv_cell = 1.0 / cell

        tris = scene.triangles
        tlo = tris.min(axis=1)
        thi = tris.max(axis=1)
        ilo = np.clip(((tlo - lo) * self.inv_cell).astype(np.int64), 0, dims - 1)
        ihi = np.clip(((thi - lo) * self.inv_cell).astype(np.int64), 0, dims - 1)

        ncell = int(dims[0] * dims[1] * dims[2])
        buckets: list[list[int]] = [[] for _ in range(ncell)]
        for i in range(tris.shape[0]):
            for ix in range(ilo[i, 0], ihi[i, 0] + 1):
                for iy in range(ilo[i, 1], ihi[i, 1] + 1):
                    base = (ix * dims[1] + iy) * dims[2]
                    for iz in range(ilo[i, 2], ihi[i, 2] + 1):
                        buckets[base + iz].append(i)
        counts = np.array([len(b) for b in buckets], dtype=np.int64)
        self.cell_start = np.zeros(ncell + 1, dtype=np.int64)
        np.cumsum(counts, out=self.cell_start[1:])
        flat = np.empty(int(counts.sum()), dtype=np.int64)
        pos = 0
        for b in buckets:
            flat[pos : pos + len(b)] = b
            pos += len(b)
        self.cell_tris = flat


def _grid_args(scene: Scene, accel: bool):
    """Kernel arguments for the chosen nearest-hit path."""
    if accel:
        g = getattr(scene, "_accel_grid", None)
        if g is None:
            g = TriangleGrid(scene)
            scene._accel_grid = g
        return (g.gmin, g.inv_cell, g.cell_size, g.dims, g.cell_start, g.cell_tris, True)
    z3 = np.zeros(3)
    return (
        z3,
        np.ones(3),
        np.ones(3),
        np.ones(3, dtype=np.int64),
        np.zeros(2, dtype=np.int64),
        np.zeros(0, dtype=np.int64),
        False,
    )


def intersect_ray_triangle(ray: Ray, triangle: np.ndarray) -> Hit | None:
    """Moeller-Trumbore against a single (3, 3) triangle, two-sided.

    Accepts hits with t > EPS_T; boundary-inclusive barycentric test.
    """
    tris = np.asarray(triangle, dtype=np.float64).reshape(1, 3, 3)
    o, d = ray.origin, ray.direction
    t = _kernels._mt_t(tris, 0, o[0], o[1], o[2], d[0], d[1], d[2])
    if t < 0.0:
        return None
    return _make_hit(tris[0], 0, o, d, t)


def _make_hit(tri: np.ndarray, index: int, o: np.ndarray, d: np.ndarray, t: float) -> Hit:
    n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
    n = n / np.linalg.norm(n)
    if float(n @ d) > 0.0:
        n = -n
    return Hit(t=float(t), point=o + t * d, triangle_index=int(index), normal=n)


def nearest_hit(scene: Scene, ray: Ray, accel: bool = True) -> Hit | None:
    """Minimum-t hit over all triangles; exact ties go to the lowest index."""
    o, d = ray.origin, ray.direction
    if accel:
        args = _grid_args(scene, True)
        t, idx = _kernels.grid_nearest(
            scene.triangles, *args[:6], o[0], o[1], o[2], d[0], d[1], d[2]
        )
    else:
        t, idx = _kernels.brute_nearest(
            scene.triangles, o[0], o[1], o[2], d[0], d[1], d[2]
        )
    if idx < 0:
        return None
    return _make_hit(scene.triangles[idx], idx, o, d, t)


def reflect(direction: np.ndarray, normal: np.ndarray) -> np.ndarray:
    """Mirror reflection d - 2 (d.n) n; raises on grazing incidence."""
    d = np.asarray(direction, dtype=np.float64)
    n = np.asarray(normal, dtype=np.float64)
    dn = float(d @ n)
    if abs(dn) < GRAZE_EPS:
        raise DegenerateReflection(f"|d.n| = {abs(dn):.3e} below {GRAZE_EPS}")
    r = d - 2.0 * dn * n
    return r / np.linalg.norm(r)


def trace_directions(
    scene: Scene,
    origin: np.ndarray,
    dirs: np.ndarray,
    max_bounces: int,
    accel: bool = True,
):
    """Batch trace; returns (xy, bounce, plen, counts) raw kernel buffers."""
    args = _grid_args(scene, accel)
    return _kernels.trace_batch(
        scene.triangles,
        *args,
        np.asarray(origin, dtype=np.float64),
        np.ascontiguousarray(dirs, dtype=np.float64),
        max_bounces,
        scene.ue_plane_z,
    )


def nearest_crossing_to(
    scene: Scene,
    origin: np.ndarray,
    dirs: np.ndarray,
    max_bounces: int,
    target_xy: np.ndarray,
    accel: bool = True,
):
    """Per ray: (squared distance to target of nearest crossing, its path length)."""
    args = _grid_args(scene, accel)
    return _kernels.nearest_crossing_batch(
        scene.triangles,
        *args,
        np.asarray(origin, dtype=np.float64),
        np.ascontiguousarray(dirs, dtype=np.float64),
        max_bounces,
        scene.ue_plane_z,
        np.asarray(target_xy, dtype=np.float64),
    )


def trace_reverse(
    scene: Scene,
    station: BaseStation,
    aod,
    max_bounces: int,
    accel: bool = True,
) -> list[Crossing]:
    """Follow the specular polyline from the station along the departure
    direction and collect weighted UE-plane crossings (ordered by path
    length; weights are 1 / number of crossings of the ray)."""
    if max_bounces < 0:
        raise ValueError("max_bounces must be >= 0")
    if hasattr(aod, "to_vector"):
        d = aod.to_vector()
    else:
        d = np.asarray(aod, dtype=np.float64)
    d = d / np.linalg.norm(d)
    xy, bounce, plen, counts = trace_directions(
        scene, station.position, d.reshape(1, 3), max_bounces, accel=accel
    )
    m = int(counts[0])
    if m == 0:
        return []
    w = 1.0 / m
    return [
        Crossing(xy=xy[0, c].copy(), weight=w, bounce_count=int(bounce[0, c]),
                 path_length=float(plen[0, c]))
        for c in range(m)
    ]
