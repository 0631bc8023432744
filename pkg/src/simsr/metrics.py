"""Reconstruction error statistics, heatmap export, and the inference
throughput benchmark.

The sampling unit for all summary statistics is the frame: each frame
contributes its mean per-vertex error, and the reported mean/median/std/
max/min describe that per-frame series.  The standard deviation is the
population one (ddof = 0).
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass

import numpy as np

from .meshes import save_heatmap_ply


class MetricsError(ValueError):
    pass


def worker_count():
    """Parallelism cap: the SIMSR_THREADS environment variable when set,
    otherwise the machine's CPU count."""
    raw = os.environ.get("SIMSR_THREADS", "").strip()
    if not raw:
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError as exc:
        raise MetricsError(f"SIMSR_THREADS must be an integer, got {raw!r}") from exc
    if value < 1:
        raise MetricsError(f"SIMSR_THREADS must be positive, got {value}")
    return value


def per_vertex_error(pred, target):
    """Euclidean distance per vertex plus the frame mean, both in the input
    unit (mm for raw containers)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise MetricsError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if pred.ndim != 2 or pred.shape[1] != 3:
        raise MetricsError(f"expected (M, 3) positions, got {pred.shape}")
    errors = np.linalg.norm(pred - target, axis=1)
    return errors, float(errors.mean())


@dataclass(frozen=True)
class ErrorStats:
    mean: float
    median: float
    std: float
    max: float
    min: float
    series: tuple  # per-frame mean errors, input order


def aggregate(frame_means):
    """Descriptive statistics of the per-frame mean errors."""
    series = np.asarray(list(frame_means), dtype=np.float64)
    if series.size == 0:
        raise MetricsError("no frames to aggregate")
    if not np.isfinite(series).all():
        raise MetricsError("non-finite frame errors")
    return ErrorStats(
        mean=float(series.mean()),
        median=float(np.median(series)),
        std=float(series.std(ddof=0)),
        max=float(series.max()),
        min=float(series.min()),
        series=tuple(float(v) for v in series),
    )


def write_series_csv(path, rows):
    """Frame-wise error curve: rows of (frame_id, method, mean_error)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_id", "method", "mean_error"])
        for frame_id, method, mean_error in rows:
            writer.writerow([frame_id, method, repr(float(mean_error))])


def read_series_csv(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["frame_id", "method", "mean_error"]:
            raise MetricsError(f"{path}: unexpected header {header}")
        return [(int(fid), method, float(err)) for fid, method, err in reader]


def error_colors(scalars):
    """Linear blue-to-red map over [0, max]; an all-zero field is all blue."""
    scalars = np.asarray(scalars, dtype=np.float64)
    if scalars.ndim != 1:
        raise MetricsError(f"per-vertex scalars must be 1-D, got shape {scalars.shape}")
    if (scalars < 0).any() or not np.isfinite(scalars).all():
        raise MetricsError("per-vertex scalars must be finite and non-negative")
    top = scalars.max() if scalars.size else 0.0
    t = scalars / top if top > 0 else np.zeros_like(scalars)
    colors = np.zeros((len(scalars), 3), dtype=np.uint8)
    colors[:, 0] = np.rint(255.0 * t)
    colors[:, 2] = np.rint(255.0 * (1.0 - t))
    return colors


def export_heatmap(surface, scalars, path):
    scalars = np.asarray(scalars, dtype=np.float64)
    if scalars.shape != (surface.vertex_count,):
        raise MetricsError(
            f"expected {surface.vertex_count} per-vertex scalars, got shape {scalars.shape}"
        )
    save_heatmap_ply(path, surface.vertices, surface.triangles, error_colors(scalars))


def bench(infer_fn, lr_frames, runs=50, warmups=5):
    """Serial per-frame walltime of `infer_fn`, cycling through the frames.

    Timing covers the self-contained per-frame call only; offline work
    (tables, model load) stays outside.  Returns mean/min/max seconds and
    frames per second = 1 / mean.
    """
    if len(lr_frames) == 0:
        raise MetricsError("empty dataset")
    if runs < 1 or warmups < 0:
        raise MetricsError("runs must be >= 1 and warmups >= 0")
    cursor = 0
    for _ in range(warmups):
        infer_fn(lr_frames[cursor % len(lr_frames)])
        cursor += 1
    times = np.empty(runs)
    for i in range(runs):
        start = time.perf_counter()
        infer_fn(lr_frames[cursor % len(lr_frames)])
        times[i] = time.perf_counter() - start
        cursor += 1
    mean = float(times.mean())
    return {
        "runs": runs,
        "mean_s": mean,
        "min_s": float(times.min()),
        "max_s": float(times.max()),
        "fps": 1.0 / mean,
    }
