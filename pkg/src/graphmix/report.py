"""Run reports: schema-versioned JSON, CSV mirrors for bench rows, and the
matplotlib figures rendered next to them."""

from __future__ import annotations

import csv
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np

from .checks import CheckResult

REPORT_SCHEMA_VERSION = 1


def environment_stamp() -> dict:
    return {
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "platform": platform.platform(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }


def make_report(command: str, config: dict, checks: list[CheckResult],
                timings: dict | None = None, extra: dict | None = None) -> dict:
    doc = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "command": command,
        "config": config,
        "checks": [
            {
                "name": c.name,
                "status": "pass" if c.passed else "fail",
                "measured": c.measured,
                "tolerance": c.tolerance,
                "detail": c.detail,
            }
            for c in checks
        ],
        "timings": timings or {},
        "environment": environment_stamp(),
    }
    if extra:
        doc.update(extra)
    return doc


def write_report(report: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return path


def write_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return path
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return path


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def render_bench_figure(rows: list[dict], path, title: str = "scaling") -> Path:
    """Log-log wall time per algorithm over the size sweep, with the fitted
    slope in the legend."""
    plt = _pyplot()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    algos = sorted({r["algo"] for r in rows})
    for algo in algos:
        pts = sorted((r["size"], r["wall_ms"]) for r in rows if r["algo"] == algo)
        sizes = np.array([p[0] for p in pts], dtype=float)
        times = np.array([p[1] for p in pts], dtype=float)
        label = algo
        if len(sizes) >= 2 and np.all(times > 0):
            slope = np.polyfit(np.log(sizes), np.log(times), 1)[0]
            label = f"{algo} (slope {slope:.2f})"
        ax.loglog(sizes, times, "o-", label=label)
    ax.set_xlabel("size")
    ax.set_ylabel("wall time [ms]")
    ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_train_figure(loss_curve: list[float], path, title: str = "training loss") -> Path:
    plt = _pyplot()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(loss_curve)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_matrix_figure(matrix: np.ndarray, path, title: str = "output") -> Path:
    plt = _pyplot()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(matrix, aspect="auto", cmap="viridis")
    fig.colorbar(im, ax=ax)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def slope_fit(sizes, times) -> float:
    """Least-squares slope of log(time) against log(size)."""
    sizes = np.asarray(sizes, dtype=float)
    times = np.asarray(times, dtype=float)
    return float(np.polyfit(np.log(sizes), np.log(times), 1)[0])


def median_timing(fn, repeats: int = 5, warmup: int = 1) -> float:
    """Median wall time in milliseconds over `repeats` runs after warmup."""
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - start) * 1e3)
    return float(np.median(samples))
