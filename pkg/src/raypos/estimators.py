"""Sklearn-style positioning estimators and the shared per-measurement
pipeline they are built on.

Three estimators cover the three modes: GMM fitting online per measurement
set, GMM parameters looked up from a precomputed table, and the
square-counting baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator

from raypos.scene import Scene, validate_scene
from raypos.sampling import Angle, MeasurementModel, PointMap, launch_map, make_rng
from raypos.density import (
    FitOpts,
    Gmm,
    select_gmm,
    square_method,
    with_background,
    DegenerateFitError,
)
from raypos import fusion
from raypos.fusion import (
    PdfTable,
    PositionEstimate,
    PositioningFailure,
    argmax_position,
    combine_with_dropout,
    posterior_grid,
)

# seeding-contract tags
TAG_MAP = 0xA0
TAG_FIT = 0xA1


@dataclass
class EstimationResult:
    estimate: PositionEstimate | None
    failure: str | None = None  # reason when estimate is None
    dropped_stations: list[int] = field(default_factory=list)
    dropout_exhausted: bool = False  # <2 survivors; fell back to all models


def build_maps(
    scene: Scene,
    measured: dict[int, Angle],
    model: MeasurementModel,
    n_rays: int,
    seed_key: tuple[int, ...],
    max_bounces: int = 5,
    snap_table: PdfTable | None = None,
) -> dict[int, PointMap]:
    """One crossing map per station.  With snap_table set, measurements are
    snapped to the table grid and seeded exactly like the table build, so
    online and table mode consume identical maps."""
    maps = {}
    for sid, y in measured.items():
        station = scene.station_by_id(sid)
        if snap_table is not None:
            idx = snap_table.cell_index(y)
            rng = fusion.table_cell_rng(snap_table.seed, sid, idx)
            y = snap_table.grid_angle(idx)
        else:
            rng = make_rng(TAG_MAP, *seed_key, sid)
        maps[sid] = launch_map(scene, station, y, model, n_rays, rng, max_bounces=max_bounces)
    return maps


def fit_models(
    maps: dict[int, PointMap],
    k_range: tuple[int, int],
    opts: FitOpts,
    seed_key: tuple[int, ...],
    snap_table: PdfTable | None = None,
    measured: dict[int, Angle] | None = None,
    bounds_xy: np.ndarray | None = None,
) -> dict[int, Gmm]:
    """Select a mixture per non-empty map; stations whose fit fails are
    silently excluded (they behave like ill-conditioned dropouts).  With
    bounds_xy set, each model is smoothed with a pseudo-count background
    component (see with_background) sized by the map's ray count."""
    models = {}
    for sid, pmap in maps.items():
        if pmap.is_empty():
            continue
        if snap_table is not None and measured is not None:
            idx = snap_table.cell_index(measured[sid])
            seed = int(
                np.random.SeedSequence([0x7AB2, snap_table.seed, sid, idx]).generate_state(1)[0]
            )
        else:
            seed = int(
                np.random.SeedSequence([TAG_FIT, *seed_key, sid]).generate_state(1)[0]
            )
        try:
            g = select_gmm(pmap, k_range, replace(opts, seed=seed))
        except (ValueError, DegenerateFitError):
            continue
        if bounds_xy is not None:
            g = with_background(g, bounds_xy, pmap.n_rays)
        models[sid] = g
    return models


def estimate_from_models(
    models: dict[int, Gmm],
    bounds_xy: np.ndarray,
    resolution: float,
    mode: str,
) -> EstimationResult:
    """Dropout then posterior product and argmax.  When dropout leaves fewer
    than 2 survivors the full model set is used instead (the event is
    reported via dropout_exhausted)."""
    if len(models) < 2:
        return EstimationResult(None, failure="fewer than 2 station models")
    exhausted = False
    dropped: list[int] = []
    try:
        kept, dropped = combine_with_dropout(models)
    except PositioningFailure:
        kept, dropped = models, []
        exhausted = True
    field_ = posterior_grid(list(kept.values()), bounds_xy, resolution)
    try:
        est = argmax_position(field_, stations_used=sorted(kept), mode=mode)
    except PositioningFailure as exc:
        return EstimationResult(None, failure=str(exc), dropped_stations=dropped,
                                dropout_exhausted=exhausted)
    return EstimationResult(est, dropped_stations=dropped, dropout_exhausted=exhausted)


def square_estimate(
    scene: Scene,
    maps: dict[int, PointMap],
    square_size: float,
    min_stations: int,
) -> EstimationResult:
    pos = square_method(
        [maps[sid] for sid in sorted(maps)],
        square_size,
        min_stations,
        scene.bounds[:, :2],
    )
    if pos is None:
        return EstimationResult(None, failure="no square with enough stations")
    return EstimationResult(
        PositionEstimate(pos, float("nan"), sorted(maps), "square-baseline")
    )


def table_models(
    tables: dict[int, PdfTable],
    measured: dict[int, Angle],
    bounds_xy: np.ndarray | None = None,
) -> dict[int, Gmm]:
    """Online phase of the table mode: constant-time parameter lookups.
    Empty markers exclude the station, like an ill-conditioned model.
    bounds_xy applies the same pseudo-count smoothing as the online mode,
    sized by the ray count the table was built with."""
    models = {}
    for sid, y in measured.items():
        if sid not in tables:
            continue
        cell = fusion.lookup(tables[sid], y)
        if isinstance(cell, Gmm):
            if bounds_xy is not None and tables[sid].sigma > 0:
                cell = with_background(cell, bounds_xy, tables[sid].n_rays)
            models[sid] = cell
    return models


def _check_measurements(Y: np.ndarray, n_stations: int) -> np.ndarray:
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 2:
        Y = Y[None, :, :]
    if Y.ndim != 3 or Y.shape[1] != n_stations or Y.shape[2] != 2:
        raise ValueError(
            f"measurements must have shape (n, {n_stations}, 2) (azimuth, polar); got {Y.shape}"
        )
    return Y


class _PositionerBase(BaseEstimator):
    """Common fit/predict surface: fit() binds the digital twin, predict()
    maps (n_drops, n_stations, 2) angle measurements to (n_drops, 2)
    positions (NaN rows mark positioning failures)."""

    def fit(self, scene: Scene, y=None):
        violations = validate_scene(scene)
        if violations:
            raise ValueError("invalid scene: " + "; ".join(violations))
        self.scene_ = scene
        self.station_ids_ = [bs.id for bs in scene.stations]
        return self

    def _measured_dict(self, row: np.ndarray) -> dict[int, Angle]:
        return {
            sid: Angle(float(row[i, 0]), float(row[i, 1]))
            for i, sid in enumerate(self.station_ids_)
        }

    def predict(self, Y: np.ndarray) -> np.ndarray:
        Y = _check_measurements(Y, len(self.station_ids_))
        out = np.full((Y.shape[0], 2), np.nan)
        for r in range(Y.shape[0]):
            res = self.estimate_one(self._measured_dict(Y[r]), drop_index=r)
            if res.estimate is not None:
                out[r] = res.estimate.position
        return out


class GmmOnlinePositioner(_PositionerBase):
    """First mode: launch rays and fit mixtures per measurement set."""

    def __init__(
        self,
        sigma2_deg2: float = 1.0,
        n_rays: int = 10000,
        k_range: tuple[int, int] = (1, 10),
        resolution: float = 0.05,
        max_bounces: int = 5,
        seed: int = 0,
        restarts: int = 3,
        max_iter: int = 200,
        tol: float = 1e-6,
        rel_tol: float = 0.0,
    ):
        self.sigma2_deg2 = sigma2_deg2
        self.n_rays = n_rays
        self.k_range = k_range
        self.resolution = resolution
        self.max_bounces = max_bounces
        self.seed = seed
        self.restarts = restarts
        self.max_iter = max_iter
        self.tol = tol
        self.rel_tol = rel_tol

    def _fit_opts(self) -> FitOpts:
        return FitOpts(
            max_iter=self.max_iter, tol=self.tol, rel_tol=self.rel_tol,
            restarts=self.restarts,
        )

    def estimate_one(
        self, measured: dict[int, Angle], drop_index: int = 0,
        snap_table: PdfTable | None = None,
    ) -> EstimationResult:
        model = MeasurementModel.from_variance_deg2(self.sigma2_deg2)
        key = (self.seed, drop_index)
        maps = build_maps(
            self.scene_, measured, model, self.n_rays, key,
            max_bounces=self.max_bounces, snap_table=snap_table,
        )
        models = fit_models(
            maps, tuple(self.k_range), self._fit_opts(), key,
            snap_table=snap_table, measured=measured,
            # smoothing covers Monte Carlo sampling noise of the AoD cone;
            # a noise-free map is deterministic
            bounds_xy=self.scene_.bounds[:, :2] if self.sigma2_deg2 > 0 else None,
        )
        return estimate_from_models(
            models, self.scene_.bounds[:, :2], self.resolution, "online"
        )


class TablePositioner(_PositionerBase):
    """Second mode: mixture parameters recovered from precomputed tables."""

    def __init__(self, tables: dict[int, PdfTable] | None = None, resolution: float = 0.05):
        self.tables = tables
        self.resolution = resolution

    def fit(self, scene: Scene, y=None):
        super().fit(scene)
        if not self.tables:
            raise ValueError("TablePositioner requires tables")
        h = scene.hash()
        for sid, t in self.tables.items():
            if t.scene_hash != h:
                raise ValueError(f"table for station {sid} was built for a different scene")
        return self

    def estimate_one(self, measured: dict[int, Angle], drop_index: int = 0) -> EstimationResult:
        models = table_models(self.tables, measured, bounds_xy=self.scene_.bounds[:, :2])
        return estimate_from_models(
            models, self.scene_.bounds[:, :2], self.resolution, "table"
        )


class SquareMethodPositioner(_PositionerBase):
    """Square-counting baseline on the same Monte Carlo maps."""

    def __init__(
        self,
        sigma2_deg2: float = 1.0,
        n_rays: int = 100,
        square_size: float = 0.25,
        min_stations: int = 3,
        max_bounces: int = 5,
        seed: int = 0,
    ):
        self.sigma2_deg2 = sigma2_deg2
        self.n_rays = n_rays
        self.square_size = square_size
        self.min_stations = min_stations
        self.max_bounces = max_bounces
        self.seed = seed

    def estimate_one(self, measured: dict[int, Angle], drop_index: int = 0) -> EstimationResult:
        model = MeasurementModel.from_variance_deg2(self.sigma2_deg2)
        maps = build_maps(
            self.scene_, measured, model, self.n_rays, (self.seed, drop_index),
            max_bounces=self.max_bounces,
        )
        return square_estimate(self.scene_, maps, self.square_size, self.min_stations)
