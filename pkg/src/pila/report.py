"""Static SVG figures rendered from the evaluation CSVs.

Figures mirror the delimited outputs rather than recomputing anything:
normalized-variable time series, the volume-change history, and the
per-station decomposition of observed signal into physical reconstruction,
residual, and combined reconstruction.
"""

from __future__ import annotations

import os
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .tableio import read_csv  # noqa: E402

ETA_COLUMNS = ("eta_xm", "eta_ym", "eta_depth", "eta_dv")
ETA_TITLES = ("location x", "location y", "depth", "volume change")


def _savefig(fig, path, deterministic: bool):
    metadata = {"Date": None} if deterministic else None
    fig.savefig(path, format="svg", metadata=metadata)
    plt.close(fig)


def _column(header, rows, name, cast=float):
    idx = header.index(name)
    return [cast(row[idx]) for row in rows]


def render_report(run_dir, out_dir, stations=None, deterministic: bool = False):
    """Render all figures for one evaluation directory; returns file paths."""
    if deterministic:
        plt.rcParams["svg.hashsalt"] = "pila-report"
    params_path = os.path.join(run_dir, "params_daily.csv")
    decomp_path = os.path.join(run_dir, "decomposition.csv")
    os.makedirs(out_dir, exist_ok=True)
    written = []

    header, rows = read_csv(params_path)
    days = _column(header, rows, "day")

    fig, axes = plt.subplots(4, 1, figsize=(8, 9), sharex=True)
    for ax, col, title in zip(axes, ETA_COLUMNS, ETA_TITLES):
        ax.plot(days, _column(header, rows, col), lw=1.0, color="tab:blue")
        ax.set_ylim(-0.02, 1.02)
        ax.set_ylabel(col)
        ax.set_title(f"normalized {title}", fontsize=9)
    axes[-1].set_xlabel("day")
    fig.tight_layout()
    path = os.path.join(out_dir, "eta_timeseries.svg")
    _savefig(fig, path, deterministic)
    written.append(path)

    fig, ax = plt.subplots(figsize=(8, 3.2))
    ax.plot(days, _column(header, rows, "dv_m3"), lw=1.0, color="tab:blue",
            label="inferred")
    if "true_dv_m3" in header and rows and rows[0][header.index("true_dv_m3")] != "":
        ax.plot(days, _column(header, rows, "true_dv_m3"), lw=1.0,
                color="tab:red", ls="--", label="true")
    ax.set_xlabel("day")
    ax.set_ylabel("volume change [m^3]")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    path = os.path.join(out_dir, "volume_change.svg")
    _savefig(fig, path, deterministic)
    written.append(path)

    header, rows = read_csv(decomp_path)
    sta_idx = header.index("station")
    dir_idx = header.index("direction")
    by_station = defaultdict(lambda: defaultdict(list))
    for row in rows:
        by_station[row[sta_idx]][row[dir_idx]].append(row)
    wanted = stations or sorted(by_station)
    for station in wanted:
        if station not in by_station:
            raise ValueError(f"station {station!r} not present in {decomp_path}")
        fig, axes = plt.subplots(3, 1, figsize=(8, 7.5), sharex=True)
        for ax, direction in zip(axes, ("east", "north", "up")):
            series = by_station[station][direction]
            d = _column(header, series, "day")
            ax.plot(d, _column(header, series, "observed_mm"), color="0.6",
                    lw=0.8, label="observed")
            ax.plot(d, _column(header, series, "xf_mm"), color="tab:red",
                    lw=1.0, label="physical")
            ax.plot(d, _column(header, series, "delta_mm"), color="tab:green",
                    lw=1.0, label="residual")
            ax.plot(d, _column(header, series, "xc_mm"), color="tab:blue",
                    lw=1.0, label="combined")
            ax.set_ylabel(f"{direction} [mm]")
        axes[0].set_title(f"station {station}", fontsize=10)
        axes[0].legend(loc="best", fontsize=7, ncol=4)
        axes[-1].set_xlabel("day")
        fig.tight_layout()
        path = os.path.join(out_dir, f"decomposition_{station}.svg")
        _savefig(fig, path, deterministic)
        written.append(path)
    return written
