"""Command-line interface: ``glucokin <subcommand>``.

Exit codes: 0 success, 2 invalid input, 3 pipeline incomplete (no drop or
no convergence).
"""

from __future__ import annotations

import csv
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__, calibrate, kinetics, metrics, pipeline, synth
from .dropdetect import detect as detect_drop, estimate_sigma1_sq
from .frames import FrameFormatError, preprocess, read_container

EXIT_INVALID = 2
EXIT_INCOMPLETE = 3


class InvalidInput(click.ClickException):
    exit_code = EXIT_INVALID


def _dump(obj, out) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out is None:
        click.echo(text, nl=False)
    else:
        Path(out).write_text(text)


def _read(path):
    try:
        return read_container(path)
    except (FrameFormatError, OSError, KeyError, ValueError) as exc:
        raise InvalidInput(str(exc)) from exc


def _config(path, **overrides) -> pipeline.PipelineConfig:
    try:
        base = pipeline.load_config(path) if path else pipeline.PipelineConfig()
        return base.replace(**overrides)
    except (OSError, ValueError, TypeError, json.JSONDecodeError) as exc:
        raise InvalidInput(f"bad configuration: {exc}") from exc


def _artefacts(cfg: pipeline.PipelineConfig, need_params: bool):
    params = curve = None
    try:
        if cfg.kinetics_path:
            params = pipeline.load_kinetics(cfg.kinetics_path)
        if cfg.calibration_path:
            curve = calibrate.CalibrationCurve.load(cfg.calibration_path)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise InvalidInput(f"cannot load trained parameters: {exc}") from exc
    if need_params and params is None:
        raise InvalidInput("the EKF needs --kinetics (written by 'glucokin calibrate')")
    return params, curve


def _inputs(paths, manifest):
    items = []
    if manifest:
        try:
            man = synth.read_manifest(manifest)
        except (OSError, ValueError) as exc:
            raise InvalidInput(str(exc)) from exc
        root = Path(manifest).parent
        for entry in man["measurements"]:
            items.append((entry["id"], _read(root / entry["file"])))
    for p in paths:
        items.append((Path(p).stem, _read(p)))
    if not items:
        raise InvalidInput("no measurements given")
    return items


config_option = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                             help="JSON pipeline configuration; flags override it.")


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
def main(verbose):
    """Glucose estimation from test-strip reflectance video."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--levels", default=",".join(f"{g:g}" for g in synth.DEFAULT_LEVELS), show_default=True,
              help="Comma-separated glucose levels in mg/dl.")
@click.option("--repeats", default=5, show_default=True, type=click.IntRange(min=1))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--n-frames", default=580, show_default=True, type=click.IntRange(min=2))
@click.option("--noise", default=0.5, show_default=True, type=float, help="Noise sigma in percent.")
@click.option("--prefix", default="m", show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
def simulate(levels, repeats, seed, n_frames, noise, prefix, out):
    """Write a synthetic dataset: containers plus manifest.json."""
    try:
        values = [float(v) for v in levels.split(",") if v.strip()]
        scene = synth.SceneConfig(n_frames=n_frames, noise_sigma=noise)
        cases = synth.generate_dataset(values, repeats, seed, prefix)
    except ValueError as exc:
        raise InvalidInput(str(exc)) from exc
    path = synth.write_dataset(out, cases, scene, seed=seed)
    click.echo(str(path))


@main.command()
@click.option("--input", "container", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Frame container (.glkf).")
@click.option("--pfa", default=1e-3, show_default=True, type=float)
@click.option("--min-consec", "--min-consecutive", "min_consecutive", default=3, show_default=True, type=click.IntRange(min=1))
@click.option("--out", type=click.Path(dir_okay=False))
def detect(container, pfa, min_consecutive, out):
    """Find the drop frame n_D."""
    m = _read(container)
    frames, calib = preprocess(m)
    try:
        cfg = pipeline.DropDetectorConfig(p_fa=pfa, min_consecutive=min_consecutive)
        decision = detect_drop(frames, cfg, estimate_sigma1_sq(calib))
    except ValueError as exc:
        raise InvalidInput(str(exc)) from exc
    payload = decision.to_dict()
    payload["statistic_trace"] = decision.statistics
    _dump(payload, out)
    if decision.n_drop is None:
        sys.exit(EXIT_INCOMPLETE)


@main.command()
@click.option("--input", "container", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Frame container (.glkf).")
@click.option("--variant", type=click.Choice(pipeline.VARIANTS))
@click.option("--h", "bandwidth", type=float, help="Intensity bandwidth in percent.")
@click.option("--spatial/--intensity-only", default=None, help="Add pixel coordinates as features.")
@click.option("--sparse", is_flag=True, help="Use the sparse variant of the chosen method.")
@click.option("--N", "sparse_n", type=click.IntRange(min=1), help="Fixed sparse basis size.")
@click.option("--tnu", type=float, help="Sparse growth threshold.")
@click.option("--frame", "frame_index", type=int, help="Segment only this frame.")
@config_option
@click.option("--out", type=click.Path(dir_okay=False))
def segment(container, variant, bandwidth, spatial, sparse, sparse_n, tnu, frame_index, config_path, out):
    """Segment frames into clusters and report the ROI remission."""
    cfg = _config(config_path, variant=variant, bandwidth=bandwidth, spatial=spatial,
                  sparse_n=sparse_n, t_nu=tnu)
    if sparse and not cfg.variant.lstrip("r").startswith("ss"):
        robust = cfg.variant.startswith("r")
        cfg = cfg.replace(variant=("r" if robust else "") + "ss" + cfg.variant.lstrip("r"))
    m = _read(container)
    frames, _ = preprocess(m, cfg.bin_size)
    indices = range(len(frames)) if frame_index is None else [frame_index]
    if frame_index is not None and not 0 <= frame_index < len(frames):
        raise InvalidInput(f"frame {frame_index} outside 0..{len(frames) - 1}")
    out_frames = []
    for n in indices:
        assignment, clusters, result = pipeline.segment_frame(frames[n], cfg)
        entry = {"n": n, "clusters": clusters.to_dict(), "assignment": assignment.to_dict()}
        if result.basis is not None:
            entry["N_nu"] = result.basis.N
        out_frames.append(entry)
    _dump({"variant": cfg.variant, "bandwidth": cfg.bandwidth, "frames": out_frames}, out)


@main.command()
@click.option("--input", "container", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Frame container (.glkf).")
@click.option("--method", type=click.Choice(pipeline.METHODS))
@click.option("--tslope", "t_slope", type=float)
@click.option("--kinetics", "kinetics_path", type=click.Path(exists=True, dir_okay=False))
@config_option
@click.option("--out", type=click.Path(dir_okay=False), help="Decision JSON (stdout if omitted).")
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), help="Per-frame trace CSV.")
def track(container, method, t_slope, kinetics_path, config_path, out, csv_path):
    """Follow the kinetic curve until convergence."""
    cfg = _config(config_path, method=method, t_slope=t_slope, kinetics_path=kinetics_path)
    params, _ = _artefacts(cfg, cfg.method == "ekf")
    res = pipeline.run_pipeline(_read(container), cfg, params, mid=Path(container).stem)
    decision = res.decision
    payload = {"n_D": res.n_drop, **(decision.to_dict() if decision else
                                     {"method": cfg.method, "n_C": None, "r_C_hat": None})}
    _dump(payload, out)
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "r_hat", "stage", "r_C_hat", "P"])
            for n in range(res.n_drop if res.n_drop is not None else 0):
                w.writerow([n, "", kinetics.PRE_DROP, "", ""])
            for row in res.track_rows():
                w.writerow(["" if v is None else v for v in row])
    if not res.complete:
        sys.exit(EXIT_INCOMPLETE)


@main.command("calibrate")
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Training dataset manifest (disjoint from evaluation data).")
@config_option
@click.option("--method", type=click.Choice(pipeline.METHODS))
@click.option("--out-curve", required=True, type=click.Path(dir_okay=False))
@click.option("--out-kinetics", required=True, type=click.Path(dir_okay=False))
def calibrate_cmd(manifest, config_path, method, out_curve, out_kinetics):
    """Fit kinetic parameters and the remission-to-glucose curve."""
    cfg = _config(config_path, method=method)
    items = _inputs((), manifest)
    try:
        result = pipeline.train(items, cfg, source=str(Path(manifest).name))
    except ValueError as exc:
        raise InvalidInput(str(exc)) from exc
    result.curve.save(out_curve)
    pipeline.save_kinetics(result.params, out_kinetics)
    click.echo(json.dumps({"kinetics": result.params.to_dict(), "knots": len(result.curve.knots)},
                          sort_keys=True))


@main.command()
@click.option("--input", "containers", multiple=True, type=click.Path(exists=True, dir_okay=False),
              help="Frame container; repeatable.")
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False))
@config_option
@click.option("--variant", type=click.Choice(pipeline.VARIANTS))
@click.option("--h", "bandwidth", type=float)
@click.option("--method", type=click.Choice(pipeline.METHODS))
@click.option("--kinetics", "kinetics_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--calibration", "calibration_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--jobs", default=1, show_default=True, type=click.IntRange(min=1))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def run(containers, manifest, config_path, variant, bandwidth, method, kinetics_path,
        calibration_path, jobs, out):
    """Run the full pipeline on measurements and write results JSON."""
    cfg = _config(config_path, variant=variant, bandwidth=bandwidth, method=method,
                  kinetics_path=kinetics_path, calibration_path=calibration_path)
    params, curve = _artefacts(cfg, cfg.method == "ekf")
    items = _inputs(containers, manifest)
    results = pipeline.run_many(items, cfg, params, curve, jobs=jobs)
    pipeline.write_results(results, out)
    if not all(r.complete for r in results):
        sys.exit(EXIT_INCOMPLETE)


@main.command()
@click.option("--results", "results_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--ceg", "ceg_path", type=click.Path(dir_okay=False), help="CSV of g_true, g_est, zone.")
@click.option("--svg", "svg_path", type=click.Path(dir_okay=False), help="Error-grid scatter plot.")
def evaluate(results_path, out, ceg_path, svg_path):
    """Score pipeline results against glucose truth."""
    try:
        data = json.loads(Path(results_path).read_text())
        rows = [r for r in data["results"] if r.get("g_hat") is not None and r.get("glucose") is not None]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InvalidInput(f"bad results file: {exc}") from exc
    if not rows:
        raise InvalidInput("no result carries both a glucose estimate and truth")
    g = np.asarray([r["glucose"] for r in rows], dtype=float)
    e = np.asarray([r["g_hat"] for r in rows], dtype=float)
    rc = np.asarray([r["r_C_hat"] for r in rows], dtype=float)
    rep = metrics.evaluate(g, e, rc)
    payload = rep.to_dict()
    payload["incomplete"] = sum(1 for r in data["results"] if not r.get("complete"))
    _dump(payload, out)
    if ceg_path:
        with open(ceg_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["g_true", "g_est", "zone"])
            for a, b, z in zip(g, e, rep.zones):
                w.writerow([repr(float(a)), repr(float(b)), z])
    if svg_path:
        Path(svg_path).write_text(metrics.ceg_svg(g, e))


if __name__ == "__main__":
    main()
