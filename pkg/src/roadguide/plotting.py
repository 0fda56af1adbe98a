"""Static SVG charts for sweep tables and CBA ledgers."""

from __future__ import annotations

from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .cba import CbaLedger  # noqa: E402
from .experiments import SweepTable  # noqa: E402
from .scenario import VehicleClass  # noqa: E402

# fixed metadata keeps the SVG bytes identical between runs
_SVG_META = {"Date": None, "Creator": None}
plt.rcParams["svg.hashsalt"] = "roadguide"


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata=_SVG_META, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_speed_timeseries(trace, path: str | Path) -> Path:
    """Fleet mean speed per step, warmup shaded."""
    t = (np.arange(trace.steps) + 1) * trace.config.dt
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.plot(t, trace.speed.mean(axis=1), lw=1, label="fleet")
    for c in VehicleClass:
        m = trace.initial.vehicle_class == int(c)
        if m.any():
            ax.plot(t, trace.speed[:, m].mean(axis=1), lw=0.8, alpha=0.8, label=c.name)
    ax.axvspan(0, trace.config.warmup_steps * trace.config.dt, color="0.9", label="warmup")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("mean speed (m/s)")
    ax.legend(fontsize="small", ncol=5)
    return _save(fig, path)


def plot_ttc_vs_count(table: SweepTable, path: str | Path) -> Path:
    """Replication-mean TTC per class against vehicle count, with std error bars."""
    agg = table.aggregates
    counts = [r["total_vehicles"] for r in agg]
    fig, ax = plt.subplots(figsize=(6, 4))
    for c in VehicleClass:
        ax.errorbar(counts, [r[f"ttc_mean_s_{c.name}"] for r in agg],
                    yerr=[r[f"ttc_mean_s_{c.name}_std"] for r in agg],
                    marker="o", capsize=3, label=c.name)
    ax.set_xlabel("vehicles on ring")
    ax.set_ylabel("mean TTC (s)")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_speed_vs_penetration(table: SweepTable, path: str | Path) -> Path:
    """Fleet mean speed against GV penetration, one line per vehicle count."""
    by_count: dict[int, list[dict]] = {}
    for r in table.aggregates:
        by_count.setdefault(r["total_vehicles"], []).append(r)
    fig, ax = plt.subplots(figsize=(6, 4))
    for n, rows in sorted(by_count.items()):
        ax.plot([r["gv_penetration"] for r in rows], [r["speed_mean_mps_fleet"] for r in rows],
                marker="o", label=f"{n} vehicles")
    ax.set_xlabel("GV penetration")
    ax.set_ylabel("fleet mean speed (m/s)")
    ax.legend(fontsize="small")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_cba(regular: CbaLedger, smart: CbaLedger, path: str | Path) -> Path:
    """Yearly cost (bars, left axis) and revenue (lines, right axis) for both highways."""
    years = [r.year for r in regular.rows]
    width = 0.4
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar([y - width / 2 for y in years], [r.cost for r in regular.rows], width,
           label="regular cost", color="tab:gray")
    ax.bar([y + width / 2 for y in years], [r.cost for r in smart.rows], width,
           label="smart cost", color="tab:blue")
    ax.set_xlabel("year")
    ax.set_ylabel("cost (CNY 10k)")
    ax2 = ax.twinx()
    ax2.plot(years, [r.toll_revenue + r.guided_fee_revenue for r in regular.rows],
             color="black", marker="o", label="regular revenue")
    ax2.plot(years, [r.toll_revenue + r.guided_fee_revenue for r in smart.rows],
             color="tab:orange", marker="s", label="smart revenue")
    ax2.set_ylabel("revenue (CNY 10k)")
    h1, l1 = ax.get_legend_handles_labels()
    h2, l2 = ax2.get_legend_handles_labels()
    ax.legend(h1 + h2, l1 + l2, loc="upper left", fontsize="small")
    return _save(fig, path)
