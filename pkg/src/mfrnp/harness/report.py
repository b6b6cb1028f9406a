"""Report emission: canonical JSON, a metrics CSV row and residual images."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from mfrnp import multifidelity as mf

FORMATS = ("json", "csv", "heatmap")


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def write_pgm(path, grid):
    """Grayscale binary PGM; values are scaled by the grid's max so zero maps to black."""
    grid = np.abs(np.asarray(grid, dtype=float))
    peak = grid.max() if grid.size else 0.0
    pixels = np.zeros(grid.shape, dtype=np.uint8) if peak == 0 else np.round(255 * grid / peak).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def metrics_row(report):
    cfg = report.config
    row = {
        "config_hash": report.config_hash,
        "task": cfg.get("task"),
        "K": cfg.get("K"),
        "regime": cfg.get("regime"),
        "seed": cfg.get("seed"),
        "status": report.status,
        "wall_clock": round(report.wall_clock, 3),
    }
    for model_name, values in sorted(report.metrics.items()):
        for metric, value in sorted(values.items()):
            row[f"{model_name}_{metric}"] = value
    return row


def emit_report(report, directory, formats=FORMATS, resolution=None, max_images=4):
    """Write the requested formats into ``directory``; returns the written paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = {}
    if "json" in formats:
        path = d / "report.json"
        path.write_text(canonical_json(report.to_dict()))
        written["report"] = str(path)
    if "csv" in formats:
        path = d / "metrics.csv"
        row = metrics_row(report)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(row))
            writer.writeheader()
            writer.writerow(row)
        written["metrics"] = str(path)
    if "heatmap" in formats and report.error_fields:
        img_dir = d / "residuals"
        img_dir.mkdir(exist_ok=True)
        paths = []
        for model_name, err in sorted(report.error_fields.items()):
            err = np.asarray(err)
            res = resolution or _square(err.shape[-1])
            for i in range(min(max_images, len(err))):
                path = img_dir / f"{model_name}_sample{i}.pgm"
                write_pgm(path, err[i].reshape(res))
                paths.append(str(path))
        written["residual_images"] = paths
    return written


def _square(n):
    side = int(round(np.sqrt(n)))
    return (side, side)


def write_run(report, data, config):
    """Checkpoints, datasets and the report for one run under ``config.out_dir``."""
    from mfrnp.harness.experiment import save_data

    d = Path(config.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    report.artifacts["data"] = str(save_data(data, d / "data"))
    if report.model is not None:
        mf.save_model(report.model, d / "model")
        report.artifacts["model"] = str(d / "model")
    if report.baseline_model is not None:
        mf.save_model(report.baseline_model, d / "sfnp")
        report.artifacts["sfnp"] = str(d / "sfnp")
    report.artifacts["report"] = str(d / "report.json")
    res = tuple(config.resolutions[-1:]) * 2
    written = emit_report(report, d, resolution=res, max_images=config.images)
    report.artifacts.update(written)
    # rewrite so the artifact list is complete
    (d / "report.json").write_text(canonical_json(report.to_dict()))
    return written
