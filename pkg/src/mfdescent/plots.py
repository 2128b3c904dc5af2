"""Figure rendering for run outputs: trace, controls, densities, profiles.

Figures are written as PNG files next to the delimited output they
visualize; rendering always goes through the Agg backend so it works
headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .core import GridMeasure


def _read_csv(path) -> tuple[list[str], np.ndarray]:
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        try:
            rows.append([float(v) for v in line.split(",")])
        except ValueError:
            continue  # named footer rows
    return header, np.array(rows)


def plot_trace(trace_csv, out_png) -> str:
    _, rows = _read_csv(trace_csv)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.2))
    ax1.plot(rows[:, 0], rows[:, 1], "o-")
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("cost")
    ax2.semilogy(rows[:, 0], np.maximum(rows[:, 2], 1e-16), "s-")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("stationarity residual")
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return str(out_png)


def plot_controls(control_csvs, out_png) -> str:
    fig, ax = plt.subplots(figsize=(6.0, 3.2))
    for path in control_csvs:
        _, rows = _read_csv(path)
        label = Path(path).stem.rsplit("_", 1)[-1]
        ax.step(rows[:, 0], rows[:, 1], where="post", label=f"k={label}")
    ax.set_xlabel("t")
    ax.set_ylabel("u")
    if len(control_csvs) <= 8:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return str(out_png)


def plot_density(measure: GridMeasure, out_png, title: str = "") -> str:
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    if measure.dim == 2:
        ax0, ax1 = measure.axes
        extent = (
            ax0.origin - 0.5 * ax0.spacing,
            ax0.origin + (ax0.count - 0.5) * ax0.spacing,
            ax1.origin - 0.5 * ax1.spacing,
            ax1.origin + (ax1.count - 0.5) * ax1.spacing,
        )
        img = ax.imshow(
            measure.grid().T, origin="lower", extent=extent, aspect="auto", cmap="viridis"
        )
        fig.colorbar(img, ax=ax, label="density")
        ax.set_xlabel("theta")
        ax.set_ylabel("phi")
    else:
        ax.plot(measure.axes[0].centers, measure.density)
        ax.set_xlabel("x")
        ax.set_ylabel("density")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return str(out_png)


def plot_increment_profile(times, integrand, out_png) -> str:
    fig, ax = plt.subplots(figsize=(6.0, 3.2))
    ax.plot(times, integrand, "o-")
    ax.axhline(0.0, color="gray", lw=0.5)
    ax.set_xlabel("t")
    ax.set_ylabel("increment integrand")
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return str(out_png)


def render_run_report(run_dir) -> list[str]:
    """Render every figure the files in a run directory support."""
    run = Path(run_dir)
    written = []
    trace = run / "trace.csv"
    if trace.exists():
        written.append(plot_trace(trace, run / "trace.png"))
    controls = sorted(
        run.glob("control_*.csv"), key=lambda p: int(p.stem.rsplit("_", 1)[-1])
    )
    if controls:
        written.append(plot_controls(controls, run / "controls.png"))
    for name in ("density_initial", "density_final"):
        data = run / f"{name}.dat"
        if data.exists():
            written.append(
                plot_density(GridMeasure.load(data, mass_tol=1e-3), run / f"{name}.png",
                             title=name.replace("_", " "))
            )
    report = run / "increment_report.csv"
    if report.exists():
        header, rows = _read_csv(report)
        written.append(plot_increment_profile(rows[:, 0], rows[:, 1], run / "increment_profile.png"))
    return written
