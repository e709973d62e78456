"""End-to-end experiment driver: UE drops, measurement synthesis, the three
estimators, error statistics, and performance benchmarks.

Reports are a pure function of the configuration (seed included) regardless
of thread count; wall-clock timings are therefore kept out of the report
body and returned/written separately.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from raypos.scene import Scene, SceneGenConfig, generate_clutter_scene, load_scene
from raypos.sampling import (
    Angle,
    GroundTruthOpts,
    MeasurementModel,
    UnreachableUEError,
    ground_truth_aoa,
    make_rng,
)
from raypos.density import FitOpts
from raypos import estimators as est
from raypos import raytrace
from raypos.fusion import PdfTable

TAG_DROP = 0xD0
TAG_NOISE = 0xE0

GT_ESCALATION = (1, 4, 16)  # direction-count multipliers before giving up


@dataclass
class ExperimentConfig:
    scene_file: str | None = None
    scene_gen: SceneGenConfig | None = None
    sigma2_deg2: float = 1.0
    n_rays: int = 10000
    estimators: list[str] = field(default_factory=lambda: ["gmm"])  # gmm|table|square
    drops: int = 500
    master_seed: int = 0
    resolution: float = 0.05
    table_path: str | None = None
    square_size: float = 0.25
    min_stations: int = 3
    max_bounces: int = 5
    k_range: tuple[int, int] = (1, 6)
    fit_restarts: int = 2
    fit_max_iter: int = 100
    fit_tol: float = 1e-6
    fit_rel_tol: float = 1e-6
    gt_directions: int = 100_000
    gt_eps_hit: float = 0.05
    threads: int = 1
    snap_to_table_grid: bool = False

    def validate(self) -> None:
        if self.drops < 1:
            raise ValueError("drops must be >= 1")
        if self.n_rays < 1:
            raise ValueError("n_rays must be >= 1")
        if self.sigma2_deg2 < 0:
            raise ValueError("sigma2_deg2 must be >= 0")
        if (self.scene_file is None) == (self.scene_gen is None):
            raise ValueError("exactly one of scene_file / scene_gen must be set")
        bad = set(self.estimators) - {"gmm", "table", "square"}
        if bad:
            raise ValueError(f"unknown estimators: {sorted(bad)}")
        if "table" in self.estimators and not self.table_path:
            raise ValueError("table estimator requires table_path")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["k_range"] = list(self.k_range)
        # threads is a runtime knob, not part of the experiment identity:
        # reports must be byte-identical across thread counts.
        d.pop("threads")
        return d

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        d = dict(d)
        if d.get("scene_gen") is not None:
            d["scene_gen"] = SceneGenConfig(**d["scene_gen"])
        if "k_range" in d:
            d["k_range"] = tuple(d["k_range"])
        return ExperimentConfig(**d)

    def fit_opts(self) -> FitOpts:
        return FitOpts(
            max_iter=self.fit_max_iter,
            tol=self.fit_tol,
            rel_tol=self.fit_rel_tol,
            restarts=self.fit_restarts,
        )


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def resolve_scene(cfg: ExperimentConfig) -> Scene:
    if cfg.scene_file is not None:
        return load_scene(cfg.scene_file)
    return generate_clutter_scene(cfg.scene_gen)


# ---------------------------------------------------------------------------
# Drop synthesis


@dataclass
class Drop:
    index: int
    ue: np.ndarray  # (2,)
    truths: dict[int, Angle]
    noise: dict[int, np.ndarray]  # (2,) unit normals per station


def _mt_all_hits(tris: np.ndarray, o: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Vectorized Moller-Trumbore; returns hit parameters t > eps (numpy)."""
    v0 = tris[:, 0]
    e1 = tris[:, 1] - v0
    e2 = tris[:, 2] - v0
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > 1e-12
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tv = o - v0
    u = np.einsum("ij,ij->i", tv, p) * inv
    q = np.cross(tv, e1)
    v = (q @ d) * inv
    t = np.einsum("ij,ij->i", q, e2) * inv
    good = ok & (u >= 0) & (u <= 1) & (v >= 0) & (u + v <= 1) & (t > 1e-6)
    return t[good]


def point_in_free_space(scene: Scene, xy: np.ndarray) -> bool:
    """Parity test on an upward ray: odd hit count means the point sits in
    air inside the (watertight) room rather than inside a clutter shell."""
    o = np.array([xy[0], xy[1], scene.ue_plane_z + 1e-5])
    hits = _mt_all_hits(scene.triangles, o, np.array([0.0, 0.0, 1.0]))
    return len(hits) % 2 == 1


def _ground_truth_with_escalation(
    scene: Scene, station, ue: np.ndarray, cfg: ExperimentConfig
) -> Angle:
    last: Exception | None = None
    for mult in GT_ESCALATION:
        try:
            return ground_truth_aoa(
                scene,
                station,
                ue,
                GroundTruthOpts(
                    n_directions=cfg.gt_directions * mult,
                    max_bounces=cfg.max_bounces,
                    eps_hit=cfg.gt_eps_hit,
                ),
            )
        except UnreachableUEError as exc:
            last = exc
    raise last


def synthesize_drops(
    scene: Scene, cfg: ExperimentConfig
) -> tuple[list[Drop], int]:
    """Uniform UE drops over free space with per-station true AoA; drops
    whose UE is unreachable from some station are resampled up to 100 times,
    then counted as skipped."""
    lo, hi = scene.bounds[0, :2], scene.bounds[1, :2]
    drops: list[Drop] = []
    skipped = 0
    for i in range(cfg.drops):
        placed = False
        for attempt in range(100):
            rng = make_rng(TAG_DROP, cfg.master_seed, i, attempt)
            ue = rng.uniform(lo + 0.05, hi - 0.05)
            if not point_in_free_space(scene, ue):
                continue
            try:
                truths = {
                    bs.id: _ground_truth_with_escalation(scene, bs, ue, cfg)
                    for bs in scene.stations
                }
            except UnreachableUEError:
                continue
            noise = {
                bs.id: make_rng(TAG_NOISE, cfg.master_seed, i, bs.id).normal(size=2)
                for bs in scene.stations
            }
            drops.append(Drop(i, ue, truths, noise))
            placed = True
            break
        if not placed:
            skipped += 1
    return drops, skipped


def measured_angles(drop: Drop, sigma2_deg2: float) -> dict[int, Angle]:
    """Truth plus scaled unit noise (matched across sigma values)."""
    s = math.radians(math.sqrt(sigma2_deg2))
    return {
        sid: Angle.folded(a.azimuth + s * drop.noise[sid][0], a.polar + s * drop.noise[sid][1])
        for sid, a in drop.truths.items()
    }


# ---------------------------------------------------------------------------
# Experiment driver


def _eval_drop(
    scene: Scene,
    cfg: ExperimentConfig,
    drop: Drop,
    tables: dict[int, PdfTable] | None,
    timing: dict,
) -> dict:
    model = MeasurementModel.from_variance_deg2(cfg.sigma2_deg2)
    measured = measured_angles(drop, cfg.sigma2_deg2)
    snap_table = None
    if cfg.snap_to_table_grid and tables:
        snap_table = tables[min(tables)]
    out = {
        "drop": drop.index,
        "ue": list(drop.ue),
        "true_aoa": {str(s): [a.azimuth, a.polar] for s, a in sorted(drop.truths.items())},
        "measured": {str(s): [a.azimuth, a.polar] for s, a in sorted(measured.items())},
        "estimates": {},
    }

    maps = None
    if "gmm" in cfg.estimators or "square" in cfg.estimators:
        t0 = time.perf_counter()
        maps = est.build_maps(
            scene, measured, model, cfg.n_rays, (cfg.master_seed, drop.index),
            max_bounces=cfg.max_bounces, snap_table=snap_table,
        )
        timing["trace_s"] += time.perf_counter() - t0

    for name in cfg.estimators:
        if name == "gmm":
            t0 = time.perf_counter()
            models = est.fit_models(
                maps, cfg.k_range, cfg.fit_opts(), (cfg.master_seed, drop.index),
                snap_table=snap_table, measured=measured,
                # background smoothing covers Monte Carlo sampling noise of
                # the AoD cone; a noise-free map is deterministic
                bounds_xy=scene.bounds[:, :2] if cfg.sigma2_deg2 > 0 else None,
            )
            timing["fit_s"] += time.perf_counter() - t0
            t0 = time.perf_counter()
            res = est.estimate_from_models(
                models, scene.bounds[:, :2], cfg.resolution, "online"
            )
            timing["fuse_s"] += time.perf_counter() - t0
        elif name == "table":
            t0 = time.perf_counter()
            models = est.table_models(tables, measured, bounds_xy=scene.bounds[:, :2])
            res = est.estimate_from_models(
                models, scene.bounds[:, :2], cfg.resolution, "table"
            )
            timing["fuse_s"] += time.perf_counter() - t0
        else:  # square
            t0 = time.perf_counter()
            res = est.square_estimate(scene, maps, cfg.square_size, cfg.min_stations)
            timing["fuse_s"] += time.perf_counter() - t0

        entry: dict = {
            "dropped_stations": res.dropped_stations,
            "dropout_exhausted": res.dropout_exhausted,
        }
        if res.estimate is None:
            entry["position"] = None
            entry["error"] = None
            entry["failure"] = res.failure
        else:
            pos = res.estimate.position
            entry["position"] = [float(pos[0]), float(pos[1])]
            entry["error"] = float(np.linalg.norm(pos - drop.ue))
            entry["stations_used"] = res.estimate.stations_used
        out["estimates"][name] = entry
    return out


def nearest_rank_quantile(sorted_errors: list[float], q: float) -> float:
    n = len(sorted_errors)
    return sorted_errors[min(n - 1, max(0, math.ceil(q * n) - 1))]


def summarize(drop_results: list[dict], estimator: str) -> dict:
    errors = sorted(
        r["estimates"][estimator]["error"]
        for r in drop_results
        if r["estimates"][estimator]["error"] is not None
    )
    n_fail = sum(1 for r in drop_results if r["estimates"][estimator]["error"] is None)
    n = len(drop_results)
    summary = {
        "n_drops": n,
        "n_ok": len(errors),
        "n_failures": n_fail,
        "failure_rate": n_fail / n if n else 0.0,
        "dropout_exhausted": sum(
            1 for r in drop_results if r["estimates"][estimator]["dropout_exhausted"]
        ),
    }
    if errors:
        summary["q50"] = nearest_rank_quantile(errors, 0.50)
        summary["q90"] = nearest_rank_quantile(errors, 0.90)
        summary["q99"] = nearest_rank_quantile(errors, 0.99)
        summary["mean"] = sum(errors) / len(errors)
    return summary


def run_experiment(
    cfg: ExperimentConfig,
    scene: Scene | None = None,
    drops: list[Drop] | None = None,
    skipped: int = 0,
) -> tuple[dict, dict]:
    """Returns (report, timing).  The report is a pure function of the
    config (and any pre-synthesized drops); timing is informational only."""
    cfg.validate()
    if scene is None:
        scene = resolve_scene(cfg)
    tables = None
    if "table" in cfg.estimators or cfg.snap_to_table_grid:
        from raypos.fusion import deserialize_table

        with open(cfg.table_path, "rb") as fh:
            loaded = deserialize_table(fh.read(), expected_scene_hash=scene.hash())
        tables = {t.station_id: t for t in loaded}

    timing = {"gt_s": 0.0, "trace_s": 0.0, "fit_s": 0.0, "fuse_s": 0.0}
    t_all = time.perf_counter()
    if drops is None:
        t0 = time.perf_counter()
        drops, skipped = synthesize_drops(scene, cfg)
        timing["gt_s"] += time.perf_counter() - t0

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(
                pool.map(lambda d: _eval_drop(scene, cfg, d, tables, timing), drops)
            )
    else:
        results = [_eval_drop(scene, cfg, d, tables, timing) for d in drops]
    timing["total_s"] = time.perf_counter() - t_all

    report = {
        "config": cfg.to_dict(),
        "skipped_drops": skipped,
        "drops": results,
        "summary": {name: summarize(results, name) for name in cfg.estimators},
    }
    return report, timing


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=1)


# ---------------------------------------------------------------------------
# CDF and benchmarks


def error_cdf(errors: list[float]) -> list[tuple[float, float]]:
    """Sorted empirical CDF points (error, cumulative fraction)."""
    if not errors:
        raise ValueError("error_cdf needs at least one error")
    s = sorted(errors)
    n = len(s)
    return [(e, (i + 1) / n) for i, e in enumerate(s)]


def benchmark_raytrace(
    scenes: list[Scene],
    n_set: list[int],
    b_set: list[int],
    accel: bool = False,
    repeats: int = 3,
    seed: int = 0,
) -> list[dict]:
    """Wall time per (t, n, b); brute-force mode by default so timings track
    the n x t x b work bound."""
    rows = []
    rng = np.random.default_rng(seed)
    for scene in scenes:
        origin = scene.stations[0].position
        for n in n_set:
            dirs = rng.normal(size=(n, 3))
            dirs /= np.linalg.norm(dirs, axis=1)[:, None]
            for b in b_set:
                raytrace.trace_directions(scene, origin, dirs[:2], b, accel=accel)
                best = math.inf
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    raytrace.trace_directions(scene, origin, dirs, b, accel=accel)
                    best = min(best, time.perf_counter() - t0)
                rows.append(
                    {"t": scene.n_triangles, "n": n, "b": b, "seconds": best}
                )
    return rows


def loglog_slope(xs: list[float], ys: list[float]) -> float:
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def compare_modes(
    scene: Scene,
    drops: list[Drop],
    variants: list[tuple[str, ExperimentConfig]],
    skipped: int = 0,
) -> dict:
    """Run several estimator configurations on the same drops/seeds and
    collect their summaries (the Fig.-5-style comparison)."""
    section = {}
    for name, cfg in variants:
        report, timing = run_experiment(cfg, scene=scene, drops=drops, skipped=skipped)
        section[name] = {
            "summary": report["summary"],
            "errors": {
                estimator: sorted(
                    r["estimates"][estimator]["error"]
                    for r in report["drops"]
                    if r["estimates"][estimator]["error"] is not None
                )
                for estimator in cfg.estimators
            },
            "timing": timing,
        }
    return section
