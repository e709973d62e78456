"""AoA measurement model, Monte Carlo angle-of-departure sampling, ground
truth synthesis, and per-station crossing-map construction.

Angles are (azimuth, polar) in radians: azimuth in [0, 2pi) around +z,
polar in [0, pi] from +z.  The Gaussian measurement error is applied
independently per component; azimuth wraps, polar reflects at 0 and pi.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import ndtri

from raypos.scene import Scene, BaseStation
from raypos import raytrace

TWO_PI = 2.0 * math.pi


class UnreachableUEError(Exception):
    """No traced ray passes within eps_hit of the UE for this station."""


def make_rng(*key: int) -> np.random.Generator:
    """Deterministic generator from an integer key tuple (seeding contract)."""
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFF for k in key]))


def fold_azimuth(a: float) -> float:
    return float(np.mod(a, TWO_PI))


def fold_polar(p: float) -> float:
    """Reflect into [0, pi] (triangle wave with period 2pi)."""
    p = np.mod(p, TWO_PI)
    return float(TWO_PI - p) if p > math.pi else float(p)


@dataclass(frozen=True)
class Angle:
    azimuth: float  # [0, 2pi)
    polar: float  # [0, pi]

    def __post_init__(self):
        if not (0.0 <= self.azimuth < TWO_PI):
            raise ValueError(f"azimuth {self.azimuth} outside [0, 2pi)")
        if not (0.0 <= self.polar <= math.pi):
            raise ValueError(f"polar {self.polar} outside [0, pi]")

    def to_vector(self) -> np.ndarray:
        sp = math.sin(self.polar)
        return np.array(
            [sp * math.cos(self.azimuth), sp * math.sin(self.azimuth), math.cos(self.polar)]
        )

    @staticmethod
    def from_vector(v: np.ndarray) -> "Angle":
        v = np.asarray(v, dtype=np.float64)
        v = v / np.linalg.norm(v)
        return Angle(
            azimuth=fold_azimuth(math.atan2(v[1], v[0])),
            polar=float(np.clip(math.acos(np.clip(v[2], -1.0, 1.0)), 0.0, math.pi)),
        )

    @staticmethod
    def folded(azimuth: float, polar: float) -> "Angle":
        return Angle(fold_azimuth(azimuth), fold_polar(polar))


@dataclass(frozen=True)
class MeasurementModel:
    """Independent Gaussian error of std-dev sigma (radians) per component."""

    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    @staticmethod
    def from_variance_deg2(sigma2_deg2: float) -> "MeasurementModel":
        return MeasurementModel(math.radians(math.sqrt(sigma2_deg2)))


@dataclass
class PointMap:
    """Weighted UE-plane crossings collected for one station/measurement."""

    station_id: int
    y: Angle
    points: np.ndarray  # (m, 2)
    weights: np.ndarray  # (m,), > 0
    n_rays: int
    n_discarded: int = 0  # crossings outside the scene bounds

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())

    def is_empty(self) -> bool:
        return self.points.shape[0] == 0


def sample_aod(y: Angle, model: MeasurementModel, rng: np.random.Generator) -> Angle:
    """One angle-of-departure draw around the measurement."""
    e = rng.normal(0.0, model.sigma, size=2) if model.sigma > 0 else np.zeros(2)
    return Angle.folded(y.azimuth + e[0], y.polar + e[1])


def sample_aods(y: Angle, model: MeasurementModel, rng: np.random.Generator, n: int):
    """Stratified (Latin hypercube) batch of AoD draws.

    Each angular component is drawn by inverting the normal CDF on one
    uniform sample per stratum of width 1/n, then the two components are
    independently shuffled.  Marginals are exactly N(y, sigma^2) as for
    sample_aod, but the batch covers the measurement cone with far lower
    Monte Carlo variance — which is what makes small ray budgets usable;
    at large n the strata are so fine the batch is indistinguishable from
    iid draws.  Deterministic given the generator state."""
    if model.sigma > 0:
        u = (np.arange(n)[:, None] + rng.random((n, 2))) / n
        e = ndtri(u) * model.sigma
        e[:, 0] = rng.permutation(e[:, 0])
        e[:, 1] = rng.permutation(e[:, 1])
    else:
        e = np.zeros((n, 2))
    az = np.mod(y.azimuth + e[:, 0], TWO_PI)
    pol = np.mod(y.polar + e[:, 1], TWO_PI)
    pol = np.where(pol > math.pi, TWO_PI - pol, pol)
    return az, pol


def _angles_to_dirs(az: np.ndarray, pol: np.ndarray) -> np.ndarray:
    sp = np.sin(pol)
    return np.stack([sp * np.cos(az), sp * np.sin(az), np.cos(pol)], axis=1)


def angle_density(theta: Angle, y: Angle, model: MeasurementModel) -> float:
    """p(theta | y): wrapped normal on azimuth times plain normal on polar."""
    s = model.sigma
    if s <= 0:
        raise ValueError("angle_density requires sigma > 0")
    da = theta.azimuth - y.azimuth
    k_max = max(1, int(math.ceil((4.0 * s + math.pi) / TWO_PI)))
    az_dens = 0.0
    for k in range(-k_max, k_max + 1):
        az_dens += math.exp(-0.5 * ((da + k * TWO_PI) / s) ** 2)
    az_dens /= math.sqrt(TWO_PI) * s
    dp = theta.polar - y.polar
    pol_dens = math.exp(-0.5 * (dp / s) ** 2) / (math.sqrt(TWO_PI) * s)
    return az_dens * pol_dens


def launch_map(
    scene: Scene,
    station: BaseStation,
    y: Angle,
    model: MeasurementModel,
    n_rays: int,
    rng: np.random.Generator,
    max_bounces: int = 5,
    accel: bool = True,
) -> PointMap:
    """Monte Carlo map: sample n_rays AoDs, trace each, concatenate weighted
    crossings.  Deterministic given the generator state."""
    if n_rays < 1:
        raise ValueError("n_rays must be >= 1")
    az, pol = sample_aods(y, model, rng, n_rays)
    dirs = _angles_to_dirs(az, pol)
    xy, bounce, plen, counts = raytrace.trace_directions(
        scene, station.position, dirs, max_bounces, accel=accel
    )
    total = int(counts.sum())
    if total == 0:
        return PointMap(station.id, y, np.zeros((0, 2)), np.zeros(0), n_rays)
    mask = np.arange(xy.shape[1])[None, :] < counts[:, None]
    pts = xy[mask]
    w = np.repeat(
        np.divide(1.0, counts, out=np.zeros(len(counts)), where=counts > 0), counts
    )
    lo, hi = scene.bounds[0, :2], scene.bounds[1, :2]
    inside = np.all((pts >= lo) & (pts <= hi), axis=1)
    n_disc = int((~inside).sum())
    return PointMap(station.id, y, pts[inside], w[inside], n_rays, n_disc)


@dataclass
class GroundTruthOpts:
    n_directions: int = 2_000_000
    max_bounces: int = 5
    eps_hit: float = 0.05  # m
    n_refine: int = 12
    refine: bool = True


def fibonacci_directions(n: int) -> np.ndarray:
    """Deterministic stratified unit directions (Fibonacci sphere lattice)."""
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / n
    phi = i * (math.pi * (3.0 - math.sqrt(5.0)))
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def ground_truth_aoa(
    scene: Scene,
    station: BaseStation,
    ue: np.ndarray,
    opts: GroundTruthOpts | None = None,
) -> Angle:
    """AoD of the first-arriving ray whose UE-plane crossing lands within
    eps_hit of the UE (reciprocity search).

    Line-of-sight geometries take a closed-form fast path; otherwise a dense
    stratified direction search with local refinement is used.  Raises
    UnreachableUEError when nothing lands within eps_hit.
    """
    if opts is None:
        opts = GroundTruthOpts()
    ue = np.asarray(ue, dtype=np.float64)
    target = np.array([ue[0], ue[1], scene.ue_plane_z])
    v = target - station.position
    dist = float(np.linalg.norm(v))
    if dist > 1e-9:
        d = v / dist
        hit = raytrace.nearest_hit(scene, raytrace.Ray(station.position, d))
        if hit is None or hit.t >= dist - 1e-6:
            return Angle.from_vector(d)

    dirs = fibonacci_directions(opts.n_directions)
    dist2, path = raytrace.nearest_crossing_to(
        scene, station.position, dirs, opts.max_bounces, ue
    )
    spacing = math.sqrt(4.0 * math.pi / opts.n_directions)
    order = np.argsort(dist2, kind="stable")

    # dedupe coarse candidates by angular separation, then refine locally
    cands: list[int] = []
    for idx in order[: 40 * opts.n_refine]:
        if not np.isfinite(dist2[idx]) or dist2[idx] > 4.0:
            break
        if all(float(dirs[idx] @ dirs[j]) > math.cos(4.0 * spacing) for j in cands):
            cands.append(int(idx))
        if len(cands) >= opts.n_refine:
            break
    if not cands:
        raise UnreachableUEError(
            f"station {station.id}: no crossing within 2 m of UE {ue.tolist()}"
        )

    best: tuple[float, float, Angle] | None = None  # (dist, path_len, angle)
    for idx in cands:
        a0 = Angle.from_vector(dirs[idx])
        x0 = np.array([a0.azimuth, a0.polar])

        def objective(x):
            dd = _angles_to_dirs(
                np.array([x[0]]), np.array([np.clip(x[1], 1e-9, math.pi - 1e-9)])
            )
            d2, _ = raytrace.nearest_crossing_to(
                scene, station.position, dd, opts.max_bounces, ue
            )
            return math.sqrt(d2[0]) if np.isfinite(d2[0]) else 1e6

        if opts.refine:
            res = minimize(
                objective,
                x0,
                method="Nelder-Mead",
                options={"maxiter": 120, "xatol": 1e-7, "fatol": 1e-9},
            )
            x = res.x
        else:
            x = x0
        ang = Angle.folded(float(x[0]), float(np.clip(x[1], 1e-9, math.pi - 1e-9)))
        dd = ang.to_vector().reshape(1, 3)
        d2, pl = raytrace.nearest_crossing_to(
            scene, station.position, dd, opts.max_bounces, ue
        )
        dd_fin = math.sqrt(d2[0]) if np.isfinite(d2[0]) else math.inf
        if dd_fin <= opts.eps_hit:
            if best is None or pl[0] < best[1] - 1e-9:
                best = (dd_fin, float(pl[0]), ang)
    if best is None:
        raise UnreachableUEError(
            f"station {station.id}: nothing within eps_hit={opts.eps_hit} of UE {ue.tolist()}"
        )
    return best[2]
