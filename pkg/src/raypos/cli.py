"""Command-line interface.

Exit codes: 0 success, 2 validation/input error, 3 positioning failure in
single-shot mode (a run with drops == 1 where an estimator fails).
"""

from __future__ import annotations

import csv
import json
import sys

import click
import numpy as np

from raypos import harness
from raypos.density import FitOpts
from raypos.fusion import (
    Gmm,
    PdfTable,
    TableFormatError,
    build_table,
    deserialize_table,
    serialize_table,
)
from raypos.sampling import MeasurementModel
from raypos.scene import (
    SceneError,
    SceneGenConfig,
    generate_clutter_scene,
    load_scene,
    save_scene,
    validate_scene,
)


class _Fail(click.ClickException):
    exit_code = 2


@click.group()
def main() -> None:
    """Probabilistic NLoS positioning from AoA measurements."""


# ---------------------------------------------------------------------------
# scene


@main.group()
def scene() -> None:
    """Scene generation and validation."""


@scene.command("gen")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--width", default=8.0, show_default=True)
@click.option("--length", default=18.0, show_default=True)
@click.option("--height", default=2.5, show_default=True)
@click.option("--clutter", "clutter_count", default=0, show_default=True)
@click.option("--seed", default=0, show_default=True)
def scene_gen(out_path, width, length, height, clutter_count, seed):
    """Generate a shoebox room with random clutter boxes."""
    cfg = SceneGenConfig(
        width=width, length=length, height=height,
        clutter_count=clutter_count, seed=seed,
    )
    try:
        sc = generate_clutter_scene(cfg)
        save_scene(sc, out_path)
    except SceneError as exc:
        raise _Fail(str(exc))
    click.echo(f"wrote {out_path}: {sc.n_triangles} triangles, "
               f"{len(sc.stations)} stations, hash {sc.hash().hex()[:16]}")


@scene.command("validate")
@click.argument("scene_path", type=click.Path(exists=True))
def scene_validate(scene_path):
    """Check a scene file; exit 2 with the violation list if invalid."""
    try:
        sc = load_scene(scene_path)
    except SceneError as exc:
        raise _Fail(str(exc))
    violations = validate_scene(sc)
    if violations:
        for v in violations:
            click.echo(f"violation: {v}", err=True)
        sys.exit(2)
    click.echo(f"ok: {sc.n_triangles} triangles, {len(sc.stations)} stations")


# ---------------------------------------------------------------------------
# table


@main.group()
def table() -> None:
    """Precomputed PDF tables."""


@table.command("build")
@click.option("--scene", "scene_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--az-step", default=1.0, show_default=True, help="degrees")
@click.option("--pol-step", default=1.0, show_default=True, help="degrees")
@click.option("--n-rays", default=10000, show_default=True)
@click.option("--sigma2", default=1.0, show_default=True, help="squared degrees")
@click.option("--seed", default=0, show_default=True)
@click.option("--station", "station_ids", multiple=True, type=int,
              help="restrict to these station ids (default: all)")
@click.option("--k-min", default=1, show_default=True)
@click.option("--k-max", default=6, show_default=True)
@click.option("--max-bounces", default=5, show_default=True)
def table_build(scene_path, out_path, az_step, pol_step, n_rays, sigma2, seed,
                station_ids, k_min, k_max, max_bounces):
    """Precompute per-cell mixture parameters for each base station."""
    try:
        sc = load_scene(scene_path)
    except SceneError as exc:
        raise _Fail(str(exc))
    stations = [s for s in sc.stations if not station_ids or s.id in station_ids]
    if station_ids and len(stations) != len(set(station_ids)):
        raise _Fail("unknown station id")
    model = MeasurementModel.from_variance_deg2(sigma2)
    tables = []
    try:
        for st in stations:
            tab = build_table(
                sc, st, model, az_step, pol_step, n_rays, seed,
                k_range=(k_min, k_max), max_bounces=max_bounces,
            )
            tables.append(tab)
            click.echo(f"station {st.id}: {tab.n_az * tab.n_pol} cells")
    except ValueError as exc:
        raise _Fail(str(exc))
    with open(out_path, "wb") as fh:
        fh.write(serialize_table(tables))
    click.echo(f"wrote {out_path}")


@table.command("inspect")
@click.argument("table_path", type=click.Path(exists=True))
def table_inspect(table_path):
    """Print header and cell statistics of a table file."""
    with open(table_path, "rb") as fh:
        data = fh.read()
    try:
        tables = deserialize_table(data)
    except TableFormatError as exc:
        raise _Fail(str(exc))
    click.echo(f"{len(tables)} station table(s), {len(data)} bytes")
    for t in tables:
        fitted = sum(1 for c in t.cells if isinstance(c, Gmm))
        ks = [len(c.weights) for c in t.cells if isinstance(c, Gmm)]
        click.echo(
            f"station {t.station_id}: grid {t.n_az}x{t.n_pol} "
            f"(az {t.az_step_deg} deg, pol {t.pol_step_deg} deg), "
            f"n_rays {t.n_rays}, sigma {t.sigma:.6g} rad, seed {t.seed}, "
            f"scene {t.scene_hash.hex()[:16]}"
        )
        click.echo(
            f"  fitted {fitted}/{len(t.cells)} cells, "
            f"mean k {float(np.mean(ks)) if ks else 0:.2f}, "
            f"parameters {t.parameter_count()}"
        )


# ---------------------------------------------------------------------------
# run / bench / cdf


@main.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--timing", "timing_path", default=None, type=click.Path(),
              help="where to write wall-time breakdown (default: OUT.timing.json)")
@click.option("--threads", default=None, type=int,
              help="worker threads (does not affect report content)")
def run_cmd(config_path, out_path, timing_path, threads):
    """Run an experiment from a JSON config; write the report JSON."""
    try:
        cfg = harness.load_config(config_path)
        if threads is not None:
            cfg.threads = threads
        cfg.validate()
        report, timing = harness.run_experiment(cfg)
    except (ValueError, SceneError, TableFormatError, OSError, TypeError) as exc:
        raise _Fail(str(exc))
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(harness.report_json(report))
    with open(timing_path or out_path + ".timing.json", "w", encoding="utf-8") as fh:
        json.dump(timing, fh, indent=1, sort_keys=True)
    for name, s in report["summary"].items():
        q = {k: round(s[k], 4) for k in ("q50", "q90", "q99") if k in s}
        click.echo(f"{name}: {q} failure_rate={s['failure_rate']:.3f}")
    if report["skipped_drops"]:
        click.echo(f"skipped drops: {report['skipped_drops']}")
    if cfg.drops == 1:
        drop = report["drops"][0]
        if any(e["error"] is None for e in drop["estimates"].values()):
            click.echo("positioning failure", err=True)
            sys.exit(3)


@main.command("bench")
@click.option("--scene", "scene_paths", multiple=True, required=True,
              type=click.Path(exists=True))
@click.option("--n", "n_set", multiple=True, type=int, default=(1000, 10000),
              show_default=True)
@click.option("--b", "b_set", multiple=True, type=int, default=(0, 5),
              show_default=True)
@click.option("--accel/--brute", default=False, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def bench_cmd(scene_paths, n_set, b_set, accel, out_path):
    """Time ray tracing over scene/ray-count/bounce grids; write CSV."""
    try:
        scenes = [load_scene(p) for p in scene_paths]
    except SceneError as exc:
        raise _Fail(str(exc))
    rows = harness.benchmark_raytrace(scenes, list(n_set), list(b_set), accel=accel)
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "n", "b", "seconds"])
        for r in rows:
            w.writerow([r["t"], r["n"], r["b"], f"{r['seconds']:.6f}"])
    click.echo(f"wrote {out_path} ({len(rows)} rows)")


@main.command("cdf")
@click.option("--report", "report_path", required=True, type=click.Path(exists=True))
@click.option("--estimator", required=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def cdf_cmd(report_path, estimator, out_path):
    """Extract the empirical error CDF of one estimator from a report."""
    with open(report_path, "r", encoding="utf-8") as fh:
        report = json.load(fh)
    if estimator not in report.get("summary", {}):
        raise _Fail(f"estimator {estimator!r} not in report")
    errors = [
        r["estimates"][estimator]["error"]
        for r in report["drops"]
        if r["estimates"][estimator]["error"] is not None
    ]
    if not errors:
        raise _Fail("no successful drops for this estimator")
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["error_m", "cum_frac"])
        for e, f in harness.error_cdf(errors):
            w.writerow([f"{e:.6f}", f"{f:.6f}"])
    click.echo(f"wrote {out_path} ({len(errors)} points)")


if __name__ == "__main__":
    main()
