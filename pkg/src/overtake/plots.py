"""Figure rendering for run reports and sweep reports.

Everything draws through the Agg backend and lands as PNG files next
to the delimited output; nothing here opens a window.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.patches import Rectangle

from .geometry import OccupancyParams
from .metrics import CRITICAL_CLEARANCE, CRITICAL_HEADWAY
from .traceio import TraceLog

_DPI = 130


def plot_trajectory(trace: TraceLog, geom: OccupancyParams, path) -> Path:
    """EV path in the frame of the other vehicle, with lanes and footprint."""
    path = Path(path)
    s_x = trace.column("s_x")
    s_y = trace.column("s_y")
    t = trace.column("t")

    fig, ax = plt.subplots(figsize=(9.0, 3.4))
    lo, hi = float(s_x.min()) - 5.0, float(s_x.max()) + 5.0
    W_l = geom.W_l
    ax.axhspan(-W_l / 2, W_l / 2, color="0.92", zorder=0)
    ax.axhspan(W_l / 2, 3 * W_l / 2, color="0.96", zorder=0)
    ax.axhline(W_l / 2, color="0.6", ls="--", lw=0.8)
    for edge in (-W_l / 2, 3 * W_l / 2):
        ax.axhline(edge, color="0.3", lw=1.2)
    ax.add_patch(Rectangle((-geom.L_v / 2, -geom.W_v / 2), geom.L_v,
                           geom.W_v, facecolor="tab:red", alpha=0.7,
                           label="other vehicle"))
    points = ax.scatter(s_x, s_y, c=t, cmap="viridis", s=6, zorder=3)
    fig.colorbar(points, ax=ax, label="time [s]", pad=0.01)
    ax.set_xlim(lo, hi)
    ax.set_xlabel("longitudinal offset $s_x$ [m]")
    ax.set_ylabel("lateral offset $s_y$ [m]")
    ax.set_title("relative trajectory")
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def plot_speeds(trace: TraceLog, path) -> Path:
    path = Path(path)
    t = trace.column("t")
    fig, ax = plt.subplots(figsize=(7.0, 3.0))
    ax.plot(t, trace.column("v"), label="ego speed", color="tab:blue")
    ax.plot(t, trace.column("v_o"), label="other speed", color="tab:red")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("speed [m/s]")
    ax.set_title("speed histories")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def plot_controls(trace: TraceLog, limits, path) -> Path:
    path = Path(path)
    t = trace.column("t")
    fig, axes = plt.subplots(2, 1, figsize=(7.0, 4.6), sharex=True)
    axes[0].plot(t, trace.column("a_cmd"), color="tab:blue",
                 label="ego accel")
    axes[0].plot(t, trace.column("a_ov"), color="tab:red", lw=0.9,
                 label="other accel")
    for bound in (limits.a_min, limits.a_max):
        axes[0].axhline(bound, color="0.5", ls=":", lw=0.8)
    axes[0].set_ylabel("accel [m/s$^2$]")
    axes[0].legend(fontsize=8)
    axes[0].grid(alpha=0.3)
    delta_deg = np.degrees(trace.column("delta_cmd"))
    axes[1].plot(t, delta_deg, color="tab:green")
    for bound in (limits.delta_min, limits.delta_max):
        axes[1].axhline(math.degrees(bound), color="0.5", ls=":", lw=0.8)
    axes[1].set_ylabel("steering [deg]")
    axes[1].set_xlabel("time [s]")
    axes[1].grid(alpha=0.3)
    fig.suptitle("applied inputs", y=0.99)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def render_run_figures(trace: TraceLog, geom, limits, out_dir) -> list:
    out_dir = Path(out_dir)
    return [
        plot_trajectory(trace, geom, out_dir / "trajectory.png"),
        plot_speeds(trace, out_dir / "speeds.png"),
        plot_controls(trace, limits, out_dir / "controls.png"),
    ]


def plot_pareto(results: list, path) -> Path:
    """Safety scatter of a weight sweep, critical zone shaded."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6.0, 4.5))

    headways, clearances, flagged = [], [], []
    failed = 0
    for entry in results:
        scored = entry.get("metrics")
        if entry.get("error") and scored is None:
            failed += 1
            continue
        h = scored.get("min_headway_time")
        c = scored.get("min_lateral_distance")
        if h is None or c is None or not (np.isfinite(h) and np.isfinite(c)):
            failed += 1
            continue
        headways.append(h)
        clearances.append(c)
        flagged.append(bool(entry.get("critical")))

    h_hi = max(headways, default=CRITICAL_HEADWAY) * 1.15 + 0.1
    c_hi = max(clearances, default=CRITICAL_CLEARANCE) * 1.15 + 0.1
    ax.axhspan(0, CRITICAL_HEADWAY, color="tab:red", alpha=0.12, lw=0)
    ax.axvspan(0, CRITICAL_CLEARANCE, color="tab:red", alpha=0.12, lw=0)
    ax.axhline(CRITICAL_HEADWAY, color="tab:red", ls="--", lw=0.8)
    ax.axvline(CRITICAL_CLEARANCE, color="tab:red", ls="--", lw=0.8)

    flagged = np.asarray(flagged, dtype=bool)
    h_arr = np.asarray(headways)
    c_arr = np.asarray(clearances)
    if (~flagged).any():
        ax.scatter(c_arr[~flagged], h_arr[~flagged], color="tab:blue",
                   s=28, label="safe")
    if flagged.any():
        ax.scatter(c_arr[flagged], h_arr[flagged], color="tab:red",
                   marker="x", s=36, label="critical")
    ax.set_xlim(0, c_hi)
    ax.set_ylim(0, h_hi)
    ax.set_xlabel("min lateral distance during pass [m]")
    ax.set_ylabel("min headway time after merge-back [s]")
    title = "weight sweep: safety margins"
    if failed:
        title += f" ({failed} point(s) without a complete pass)"
    ax.set_title(title, fontsize=10)
    ax.legend(fontsize=8, loc="lower right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path
