"""Report artifacts: delimited metric tables, figures, and previews.

Reports live in a directory: `metrics.csv` and `metrics.json` carry the
numbers, `report.txt` the human-readable summary, and PNG figures sit
alongside them.  Figures render headless (Agg); nothing here opens a
window.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .formats import write_ppm
from .metrics import mu_law


def write_metrics_csv(path, metrics: dict) -> None:
    """One `metric,value` row per entry, insertion order, 12 significant digits."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["metric", "value"])
        for name, value in metrics.items():
            writer.writerow([name, _format_value(value)])


def write_metrics_json(path, metrics: dict) -> None:
    doc = {k: _jsonable(v) for k, v in metrics.items()}
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def format_report(metrics: dict, title: str = "evaluation") -> str:
    width = max((len(k) for k in metrics), default=0)
    lines = [title, "-" * len(title)]
    for name, value in metrics.items():
        lines.append(f"{name.ljust(width)}  {_format_value(value)}")
    return "\n".join(lines) + "\n"


def _format_value(value):
    if isinstance(value, float):
        return f"{value:.12g}"
    if isinstance(value, (list, tuple, np.ndarray)):
        return " ".join(_format_value(v) for v in np.asarray(value).ravel().tolist())
    return str(value)


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------


def render_objective_trace(path, trace, stage_bounds=None) -> None:
    """Semilog objective-vs-step plot; dashed lines mark stage boundaries."""
    trace = np.asarray(trace, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.semilogy(np.arange(1, trace.size + 1), trace, lw=1.2)
    if stage_bounds:
        for b in stage_bounds[:-1]:
            ax.axvline(b + 0.5, color="0.6", ls="--", lw=0.8)
    ax.set_xlabel("gradient step")
    ax.set_ylabel("data-term objective")
    ax.grid(True, which="both", alpha=0.25)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_error_bars(path, per_frame: dict, ylabel: str = "corner error (px)") -> None:
    """Bar chart of a per-frame scalar, keyed by frame index."""
    frames = sorted(per_frame)
    values = [per_frame[k] for k in frames]
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.bar([str(k) for k in frames], values, color="#4878a8")
    ax.set_xlabel("frame")
    ax.set_ylabel(ylabel)
    ax.grid(True, axis="y", alpha=0.25)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_comparison(path, ref: np.ndarray, test: np.ndarray, mu: float = 5000.0) -> None:
    """Side-by-side reference / result / absolute difference, range-compressed."""
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    peak = max(float(np.max(ref)), 1e-12)
    panels = [
        ("reference", mu_law(np.clip(ref, 0.0, None), mu, peak)),
        ("result", mu_law(np.clip(test, 0.0, None), mu, peak)),
        ("|difference|", mu_law(np.abs(ref - test), mu, peak)),
    ]
    fig, axes = plt.subplots(1, 3, figsize=(10.5, 3.8))
    for ax, (name, img) in zip(axes, panels):
        if img.ndim == 3:
            ax.imshow(np.clip(img, 0.0, 1.0))
        else:
            ax.imshow(np.clip(img, 0.0, 1.0), cmap="gray", vmin=0.0, vmax=1.0)
        ax.set_title(name, fontsize=10)
        ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Previews
# ---------------------------------------------------------------------------


def tonemap_preview(img: np.ndarray, mu: float = 5000.0) -> np.ndarray:
    """Irradiance to 8-bit via log range compression; returns (H, W, 3) uint8."""
    v = np.clip(np.asarray(img, dtype=np.float64), 0.0, None)
    peak = max(float(v.max()), 1e-12)
    t = mu_law(v, mu, peak)
    if t.ndim == 2:
        t = np.repeat(t[..., None], 3, axis=2)
    return (np.clip(t, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def write_preview_ppm(path, img: np.ndarray, mu: float = 5000.0) -> None:
    write_ppm(path, tonemap_preview(img, mu))


def write_trace_csv(path, trace) -> None:
    """Objective value per gradient step, `step,objective` rows."""
    trace = np.asarray(trace, dtype=np.float64)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["step", "objective"])
        for i, v in enumerate(trace, start=1):
            writer.writerow([i, f"{v:.12g}"])


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
