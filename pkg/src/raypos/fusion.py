"""Posterior fusion and the offline table mode.

The position posterior is the product of per-station densities (uniform
prior), evaluated on a grid in log-space.  The table mode precomputes the
fitted mixtures over a discretized angle grid and serializes them to a
versioned little-endian binary format.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from raypos.scene import Scene, BaseStation
from raypos.sampling import Angle, MeasurementModel, launch_map, make_rng
from raypos.density import FitOpts, Gmm, is_well_conditioned, select_gmm

TABLE_MAGIC = b"PDFT"
TABLE_VERSION = 1

# empty-cell reason codes
REASON_EMPTY_MAP = 1
REASON_FIT_FAILED = 2
REASON_NOT_BUILT = 3


class PositioningFailure(Exception):
    """Too few usable station models, or a posterior without support."""


class TableFormatError(Exception):
    """Bad magic/version or scene-hash mismatch on table load."""


@dataclass
class ProbabilityField:
    """Unnormalized posterior sampled at cell centers; values[ix, iy] with
    x as the outer (row-major) axis."""

    bounds_xy: np.ndarray  # (2, 2) [min, max]
    resolution: float
    values: np.ndarray  # (nx, ny) >= 0

    def cell_center(self, ix: int, iy: int) -> np.ndarray:
        return self.bounds_xy[0] + (np.array([ix, iy]) + 0.5) * self.resolution

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        nx, ny = self.values.shape
        xs = self.bounds_xy[0, 0] + (np.arange(nx) + 0.5) * self.resolution
        ys = self.bounds_xy[0, 1] + (np.arange(ny) + 0.5) * self.resolution
        return xs, ys


@dataclass
class PositionEstimate:
    position: np.ndarray  # (2,) m
    posterior_value: float
    stations_used: list[int]
    mode: str  # "online" | "table" | "square-baseline"


def field_shape(bounds_xy: np.ndarray, resolution: float) -> tuple[int, int]:
    extent = np.asarray(bounds_xy[1]) - np.asarray(bounds_xy[0])
    return (
        max(1, int(math.ceil(extent[0] / resolution - 1e-9))),
        max(1, int(math.ceil(extent[1] / resolution - 1e-9))),
    )


def posterior_grid(
    models: list[Gmm], bounds_xy: np.ndarray, resolution: float
) -> ProbabilityField:
    """Product of the model densities at every cell center, computed in
    log-space and exponentiated after subtracting the maximum."""
    if len(models) < 1:
        raise ValueError("posterior_grid needs at least one model")
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    bounds_xy = np.asarray(bounds_xy, dtype=np.float64)
    nx, ny = field_shape(bounds_xy, resolution)
    xs = bounds_xy[0, 0] + (np.arange(nx) + 0.5) * resolution
    ys = bounds_xy[0, 1] + (np.arange(ny) + 0.5) * resolution
    pts = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
    logp = np.zeros(len(pts))
    for m in models:
        logp += m.logpdf(pts)
    mx = logp.max()
    values = np.exp(logp - mx) if np.isfinite(mx) else np.zeros_like(logp)
    return ProbabilityField(bounds_xy, resolution, values.reshape(nx, ny))


def argmax_position(
    field: ProbabilityField,
    stations_used: list[int] | None = None,
    mode: str = "online",
) -> PositionEstimate:
    """Center of the maximum cell (row-major tie-break), then one quadratic
    refinement over the 3x3 neighborhood, clamped to the cell."""
    v = field.values
    if not (v > 0).any():
        raise PositioningFailure("posterior has no support (all-zero field)")
    flat = int(np.argmax(v))
    nx, ny = v.shape
    ix, iy = divmod(flat, ny)
    offset = np.zeros(2)
    if 1 <= ix < nx - 1 and 1 <= iy < ny - 1:
        offset = _quadratic_peak(v[ix - 1 : ix + 2, iy - 1 : iy + 2])
    pos = field.cell_center(ix, iy) + offset * field.resolution
    return PositionEstimate(
        position=pos,
        posterior_value=float(v[ix, iy]),
        stations_used=list(stations_used or []),
        mode=mode,
    )


def _quadratic_peak(patch: np.ndarray) -> np.ndarray:
    """Least-squares 2D quadratic through a 3x3 patch; peak offset in cell
    units, clamped to [-0.5, 0.5] per axis."""
    dx, dy = np.meshgrid([-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0], indexing="ij")
    A = np.stack(
        [np.ones(9), dx.ravel(), dy.ravel(), dx.ravel() ** 2,
         (dx * dy).ravel(), dy.ravel() ** 2],
        axis=1,
    )
    coef, *_ = np.linalg.lstsq(A, patch.ravel(), rcond=None)
    _, c1, c2, c3, c4, c5 = coef
    H = np.array([[2.0 * c3, c4], [c4, 2.0 * c5]])
    det = np.linalg.det(H)
    if det <= 0 or H[0, 0] >= 0:  # not a strict maximum
        return np.zeros(2)
    delta = np.linalg.solve(H, -np.array([c1, c2]))
    return np.clip(delta, -0.5, 0.5)


def combine_with_dropout(
    models: dict[int, Gmm], min_survivors: int = 2
) -> tuple[dict[int, Gmm], list[int]]:
    """Drop ill-conditioned station models; raises PositioningFailure when
    fewer than min_survivors remain.  Returns (kept, dropped ids)."""
    if len(models) < 2:
        raise ValueError("combine_with_dropout needs at least 2 models")
    kept = {sid: m for sid, m in models.items() if is_well_conditioned(m)}
    dropped = sorted(set(models) - set(kept))
    if len(kept) < min_survivors:
        raise PositioningFailure(
            f"only {len(kept)} well-conditioned models of {len(models)} "
            f"(dropped stations {dropped})"
        )
    return kept, dropped


# ---------------------------------------------------------------------------
# Offline table mode


@dataclass
class PdfTable:
    """Angle-grid-indexed mixture parameters for one station.

    Cells are azimuth-major: index = az_idx * n_polar + pol_idx, with grid
    angles az_idx * az_step over [0, 360) and pol_idx * pol_step over
    [0, 180) degrees.  Each cell holds a Gmm or an empty-marker reason code.
    Our format stores 6 parameters per component (weight, 2 means, 3
    covariance entries); a dense-covariance accounting without weights
    would store 6k per model as well, see parameter_count().
    """

    station_id: int
    az_step_deg: float
    pol_step_deg: float
    n_rays: int
    sigma: float  # radians
    seed: int
    scene_hash: bytes  # 32 bytes
    cells: list  # Gmm | int reason code

    @property
    def n_az(self) -> int:
        return int(round(360.0 / self.az_step_deg))

    @property
    def n_pol(self) -> int:
        return int(round(180.0 / self.pol_step_deg))

    @property
    def n_cells(self) -> int:
        return self.n_az * self.n_pol

    def cell_index(self, y: Angle) -> int:
        """Nearest grid angle; round-half-down on the azimuth index."""
        az_deg = math.degrees(y.azimuth)
        pol_deg = math.degrees(y.polar)
        az_i = int(math.ceil(az_deg / self.az_step_deg - 0.5)) % self.n_az
        pol_i = int(math.ceil(pol_deg / self.pol_step_deg - 0.5))
        pol_i = min(max(pol_i, 0), self.n_pol - 1)
        return az_i * self.n_pol + pol_i

    def grid_angle(self, cell_index: int) -> Angle:
        az_i, pol_i = divmod(cell_index, self.n_pol)
        return Angle(
            math.radians(az_i * self.az_step_deg),
            math.radians(pol_i * self.pol_step_deg),
        )

    def parameter_count(self) -> int:
        """Total stored float parameters (6 per component)."""
        return sum(6 * c.k for c in self.cells if isinstance(c, Gmm))


def lookup(table: PdfTable, y: Angle):
    """Constant-time nearest-grid-angle lookup; returns Gmm or the reason
    code of an empty marker."""
    return table.cells[table.cell_index(y)]


def table_cell_rng(seed: int, station_id: int, cell_index: int) -> np.random.Generator:
    """Launch-map generator for one table cell (shared with the online mode
    when measurements are snapped to the table grid)."""
    return make_rng(0x7AB1E, seed, station_id, cell_index)


def snap_to_grid(table: PdfTable, y: Angle) -> Angle:
    return table.grid_angle(table.cell_index(y))


def build_table(
    scene: Scene,
    station: BaseStation,
    model: MeasurementModel,
    az_step_deg: float,
    pol_step_deg: float,
    n_rays: int,
    seed: int,
    k_range: tuple[int, int] = (1, 10),
    fit_opts: FitOpts | None = None,
    max_bounces: int = 5,
    cell_filter=None,
) -> PdfTable:
    """Offline phase: for every grid angle, launch a map and fit a mixture.

    Deterministic given the seed.  Cells excluded by cell_filter (a
    set of cell indices or predicate) are stored as NOT_BUILT markers;
    per-cell failures become EMPTY_MAP / FIT_FAILED markers.
    """
    if not math.isclose(360.0 / az_step_deg, round(360.0 / az_step_deg)):
        raise ValueError("az_step_deg must divide 360 evenly")
    if not math.isclose(180.0 / pol_step_deg, round(180.0 / pol_step_deg)):
        raise ValueError("pol_step_deg must divide 180 evenly")
    table = PdfTable(
        station_id=station.id,
        az_step_deg=az_step_deg,
        pol_step_deg=pol_step_deg,
        n_rays=n_rays,
        sigma=model.sigma,
        seed=seed,
        scene_hash=scene.hash(),
        cells=[REASON_NOT_BUILT] * (int(round(360.0 / az_step_deg)) * int(round(180.0 / pol_step_deg))),
    )
    wanted = None
    if cell_filter is not None and not callable(cell_filter):
        wanted = set(int(c) for c in cell_filter)
    for idx in range(table.n_cells):
        if wanted is not None and idx not in wanted:
            continue
        if callable(cell_filter) and not cell_filter(idx):
            continue
        y = table.grid_angle(idx)
        pmap = launch_map(
            scene, station, y, model, n_rays,
            table_cell_rng(seed, station.id, idx), max_bounces=max_bounces,
        )
        if pmap.is_empty():
            table.cells[idx] = REASON_EMPTY_MAP
            continue
        try:
            opts = fit_opts or FitOpts()
            cell_seed = int(
                np.random.SeedSequence([0x7AB2, seed, station.id, idx]).generate_state(1)[0]
            )
            from dataclasses import replace as _replace

            table.cells[idx] = select_gmm(pmap, k_range, _replace(opts, seed=cell_seed))
        except Exception:
            table.cells[idx] = REASON_FIT_FAILED
    return table


# --- binary serialization ---------------------------------------------------
# file  = magic "PDFT" | u32 version | 32B scene hash | u32 station count
# block = u32 station id | u32 az step udeg | u32 pol step udeg | u32 n_rays
#         | u64 sigma urad | u64 seed | cells
# cell  = u16 k; k == 0 -> u8 reason code, else k * 6 float64
#         (weight, mean_x, mean_y, cov_xx, cov_xy, cov_yy), little-endian.


def serialize_table(tables: list[PdfTable] | PdfTable) -> bytes:
    if isinstance(tables, PdfTable):
        tables = [tables]
    if tables:
        h = tables[0].scene_hash
        if any(t.scene_hash != h for t in tables):
            raise ValueError("all tables in one file must share a scene hash")
    else:
        h = b"\x00" * 32
    out = bytearray()
    out += TABLE_MAGIC
    out += struct.pack("<I", TABLE_VERSION)
    out += h
    out += struct.pack("<I", len(tables))
    for t in tables:
        out += struct.pack(
            "<IIIIQQ",
            t.station_id,
            int(round(t.az_step_deg * 1e6)),
            int(round(t.pol_step_deg * 1e6)),
            t.n_rays,
            int(round(t.sigma * 1e6)),
            t.seed,
        )
        for cell in t.cells:
            if isinstance(cell, Gmm):
                out += struct.pack("<H", cell.k)
                for j in range(cell.k):
                    out += struct.pack(
                        "<6d",
                        cell.weights[j],
                        cell.means[j, 0],
                        cell.means[j, 1],
                        cell.covariances[j, 0, 0],
                        cell.covariances[j, 0, 1],
                        cell.covariances[j, 1, 1],
                    )
            else:
                out += struct.pack("<HB", 0, int(cell))
    return bytes(out)


def deserialize_table(data: bytes, expected_scene_hash: bytes | None = None) -> list[PdfTable]:
    if data[:4] != TABLE_MAGIC:
        raise TableFormatError(f"bad magic {data[:4]!r}, expected {TABLE_MAGIC!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != TABLE_VERSION:
        raise TableFormatError(f"unsupported table version {version}")
    scene_hash = data[8:40]
    if expected_scene_hash is not None and scene_hash != expected_scene_hash:
        raise TableFormatError(
            f"scene hash mismatch: table built for {scene_hash.hex()}, "
            f"expected {expected_scene_hash.hex()}"
        )
    try:
        return _read_tables(data, scene_hash)
    except struct.error as exc:
        raise TableFormatError(f"truncated or corrupt table file: {exc}") from exc


def _read_tables(data: bytes, scene_hash: bytes) -> list[PdfTable]:
    (n_tables,) = struct.unpack_from("<I", data, 40)
    pos = 44
    tables = []
    for _ in range(n_tables):
        sid, az_u, pol_u, n_rays, sigma_u, seed = struct.unpack_from("<IIIIQQ", data, pos)
        pos += struct.calcsize("<IIIIQQ")
        t = PdfTable(
            station_id=sid,
            az_step_deg=az_u / 1e6,
            pol_step_deg=pol_u / 1e6,
            n_rays=n_rays,
            sigma=sigma_u / 1e6,
            seed=seed,
            scene_hash=scene_hash,
            cells=[],
        )
        for _ in range(t.n_cells):
            (k,) = struct.unpack_from("<H", data, pos)
            pos += 2
            if k == 0:
                (reason,) = struct.unpack_from("<B", data, pos)
                pos += 1
                t.cells.append(int(reason))
                continue
            vals = struct.unpack_from(f"<{6 * k}d", data, pos)
            pos += 8 * 6 * k
            arr = np.array(vals).reshape(k, 6)
            covs = np.empty((k, 2, 2))
            covs[:, 0, 0] = arr[:, 3]
            covs[:, 0, 1] = covs[:, 1, 0] = arr[:, 4]
            covs[:, 1, 1] = arr[:, 5]
            t.cells.append(Gmm(weights=arr[:, 0].copy(), means=arr[:, 1:3].copy(), covariances=covs))
        tables.append(t)
    return tables
