"""Replicated experiment grids over vehicle count and guided-vehicle penetration.

Every cell is an independent simulation whose seed is derived from the master
seed and the cell coordinates only, so grids can be reordered, split or run in
parallel without changing any row.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import spearmanr

from .engine import simulate
from .metrics import METRICS_COLUMNS, compute_metrics
from .scenario import ScenarioConfig, ScenarioError, VehicleClass, build_scenario

SWEEP_SCHEMA = "sweep.v1"
DEFAULT_COUNTS = (100, 200, 300, 400, 500, 600)
DEFAULT_PENETRATIONS = tuple(round(0.1 * k, 1) for k in range(11))
DEFAULT_REPLICATIONS = 5

# metrics that get a replication mean and standard deviation
VALUE_COLUMNS = [c for c in METRICS_COLUMNS
                 if c.startswith(("ttc_mean_s_", "speed_mean_mps_", "events_"))]
COUNT_COLUMNS = [c for c in METRICS_COLUMNS
                 if c.startswith(("ttc_samples_", "ttc_capped_"))]
CELL_COLUMNS = ["schema_version", "row_type", "total_vehicles", "gv_penetration",
                "replication", "n_replications", "seed"]
SWEEP_COLUMNS = (CELL_COLUMNS + VALUE_COLUMNS + [f"{c}_std" for c in VALUE_COLUMNS]
                 + COUNT_COLUMNS + ["window_start", "window_stop", "trace_hash",
                                    "speed_spearman_vs_penetration"])


class SweepError(ScenarioError):
    pass


def child_seed(master: int, total_vehicles: int, gv_penetration: float, replication: int) -> int:
    """Seed for one cell: a pure function of the master seed and cell coordinates."""
    ppm = int(round(gv_penetration * 1_000_000))
    ss = np.random.SeedSequence(int(master), spawn_key=(int(total_vehicles), ppm, int(replication)))
    return int(ss.generate_state(1, np.uint64)[0])


def penetration_shares(base: ScenarioConfig, gv: float) -> dict[VehicleClass, float]:
    """GV share ``gv``; the rest split between RV and AV in the base ratio."""
    if not 0.0 <= gv <= 1.0:
        raise SweepError(f"penetration {gv} outside [0, 1]")
    rv = base.class_shares.get(VehicleClass.RV, 0.0)
    av = base.class_shares.get(VehicleClass.AV, 0.0)
    rest = 1.0 - gv
    if rv + av > 0:
        rv_part = rest * rv / (rv + av)
    elif rest > 0:
        raise SweepError("base config has no RV/AV share to split the remainder")
    else:
        rv_part = 0.0
    return {VehicleClass.RV: rv_part, VehicleClass.AV: rest - rv_part, VehicleClass.GV: gv}


@dataclass(frozen=True)
class Cell:
    total_vehicles: int
    gv_penetration: float
    replication: int

    def key(self):
        return (self.total_vehicles, self.gv_penetration, self.replication)


def cell_config(base: ScenarioConfig, cell: Cell) -> ScenarioConfig:
    return replace(base, total_vehicles=cell.total_vehicles,
                   class_shares=penetration_shares(base, cell.gv_penetration),
                   seed=child_seed(base.seed, *cell.key()))


def run_cell(base: ScenarioConfig, cell: Cell) -> dict:
    """Simulate one cell and return its replication row."""
    cfg = cell_config(base, cell)
    rec = compute_metrics(simulate(cfg)).row()
    row = {c: rec[c] for c in METRICS_COLUMNS if c not in ("schema_version", "seed",
                                                           "total_vehicles")}
    row.update(schema_version=SWEEP_SCHEMA, row_type="replication",
               total_vehicles=cell.total_vehicles, gv_penetration=cell.gv_penetration,
               replication=cell.replication, n_replications=1, seed=cfg.seed)
    return row


def _run_one(args):
    return run_cell(*args)


def _check_feasible(base: ScenarioConfig, cells: Iterable[Cell]):
    for cell in {(c.total_vehicles, c.gv_penetration): c for c in cells}.values():
        # raises InfeasibleDensity naming the count before any long run starts
        build_scenario(cell_config(base, cell))


def run_cells(base: ScenarioConfig, cells: Sequence[Cell], parallel: int = 1) -> list[dict]:
    """Run cells (at most ``parallel`` at a time); rows come back in cell order."""
    if parallel < 1:
        raise SweepError("parallel must be >= 1")
    cells = sorted(set(cells), key=Cell.key)
    _check_feasible(base, cells)
    jobs = [(base, c) for c in cells]
    if parallel == 1 or len(jobs) <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(_run_one, jobs))


def _nan_stats(values):
    arr = np.array(values, dtype=float)
    arr = arr[~np.isnan(arr)]
    if arr.size == 0:
        return math.nan, math.nan
    std = float(np.std(arr, ddof=1)) if arr.size > 1 else math.nan
    return float(np.mean(arr)), std


def aggregate(rows: Sequence[dict]) -> list[dict]:
    """One aggregate row per (count, penetration): mean and sample std over replications.

    NaN values (a class absent from the fleet) are left out of both statistics.
    """
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        if r["row_type"] == "replication":
            groups.setdefault((r["total_vehicles"], r["gv_penetration"]), []).append(r)
    out = []
    for (count, pen), members in sorted(groups.items()):
        agg = {"schema_version": SWEEP_SCHEMA, "row_type": "aggregate", "total_vehicles": count,
               "gv_penetration": pen, "replication": "", "n_replications": len(members),
               "seed": "", "trace_hash": "",
               "window_start": members[0]["window_start"],
               "window_stop": members[0]["window_stop"]}
        for c in VALUE_COLUMNS:
            agg[c], agg[f"{c}_std"] = _nan_stats([m[c] for m in members])
        for c in COUNT_COLUMNS:
            agg[c] = int(sum(m[c] for m in members))
        out.append(agg)
    return out


@dataclass(frozen=True)
class SweepTable:
    kind: str
    rows: tuple[dict, ...]

    @property
    def replications(self) -> list[dict]:
        return [r for r in self.rows if r["row_type"] == "replication"]

    @property
    def aggregates(self) -> list[dict]:
        return [r for r in self.rows if r["row_type"] == "aggregate"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in SWEEP_COLUMNS})
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv(), encoding="utf-8")
        return path


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def read_sweep_csv(path: str | Path) -> list[dict]:
    """Parse a sweep CSV back into typed rows (the inverse of :meth:`SweepTable.to_csv`)."""
    ints = {"total_vehicles", "replication", "n_replications", "seed", "window_start",
            "window_stop", *COUNT_COLUMNS}
    floats = {"gv_penetration", "speed_spearman_vs_penetration", *VALUE_COLUMNS,
              *(f"{c}_std" for c in VALUE_COLUMNS)}
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for raw in csv.DictReader(fh):
            row = {}
            for k, v in raw.items():
                if v == "":
                    row[k] = ""
                elif k in ints:
                    row[k] = int(v)
                elif k in floats:
                    row[k] = float(v)
                else:
                    row[k] = v
            out.append(row)
    return out


def density_sweep(base: ScenarioConfig, vehicle_counts: Sequence[int] = DEFAULT_COUNTS,
                  replications: int = DEFAULT_REPLICATIONS, parallel: int = 1) -> SweepTable:
    """Replicated runs over vehicle counts at the base fleet mix."""
    if replications < 1:
        raise SweepError("replications must be >= 1")
    gv = float(base.class_shares.get(VehicleClass.GV, 0.0))
    cells = [Cell(int(n), gv, r) for n in vehicle_counts for r in range(replications)]
    rows = run_cells(base, cells, parallel)
    return SweepTable("density", tuple(rows + aggregate(rows)))


def penetration_sweep(base: ScenarioConfig, penetrations: Sequence[float] = DEFAULT_PENETRATIONS,
                      densities: Sequence[int] = DEFAULT_COUNTS,
                      replications: int = DEFAULT_REPLICATIONS, parallel: int = 1) -> SweepTable:
    """Replicated runs over GV penetration at each vehicle count."""
    if replications < 1:
        raise SweepError("replications must be >= 1")
    for p in penetrations:
        penetration_shares(base, p)
    cells = [Cell(int(n), float(p), r) for n in densities for p in penetrations
             for r in range(replications)]
    rows = run_cells(base, cells, parallel)
    agg = aggregate(rows)
    rho = speed_trend(SweepTable("penetration", tuple(agg)))
    for r in agg:
        r["speed_spearman_vs_penetration"] = rho[r["total_vehicles"]]
    return SweepTable("penetration", tuple(rows + agg))


def spearman(x, y) -> float:
    """Rank correlation; NaN when either side is constant or has fewer than 3 points."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 3 or np.all(y == y[0]) or np.all(x == x[0]):
        return math.nan
    return float(spearmanr(x, y).statistic)


def ttc_trend(table: SweepTable) -> dict[str, float]:
    """Per class: rank correlation of mean TTC with vehicle count over aggregate rows."""
    agg = table.aggregates
    counts = [r["total_vehicles"] for r in agg]
    return {c.name: spearman(counts, [r[f"ttc_mean_s_{c.name}"] for r in agg])
            for c in VehicleClass}


def speed_trend(table: SweepTable) -> dict[int, float]:
    """Per vehicle count: rank correlation of fleet mean speed with GV penetration."""
    by_count: dict[int, list[dict]] = {}
    for r in table.aggregates:
        by_count.setdefault(r["total_vehicles"], []).append(r)
    return {n: spearman([r["gv_penetration"] for r in rs],
                        [r["speed_mean_mps_fleet"] for r in rs])
            for n, rs in sorted(by_count.items())}


SUMMARY_COLUMNS = ["schema_version", "kind", "total_vehicles", "quantity", "spearman"]


def summary_rows(table: SweepTable) -> list[dict]:
    """Rank-correlation summary: TTC vs count (density) or speed vs penetration."""
    if table.kind == "density":
        return [{"schema_version": SWEEP_SCHEMA, "kind": "density", "total_vehicles": "",
                 "quantity": f"ttc_mean_s_{k}_vs_total_vehicles", "spearman": v}
                for k, v in ttc_trend(table).items()]
    return [{"schema_version": SWEEP_SCHEMA, "kind": "penetration", "total_vehicles": n,
             "quantity": "speed_mean_mps_fleet_vs_gv_penetration", "spearman": v}
            for n, v in speed_trend(table).items()]


def write_summary_csv(table: SweepTable, path: str | Path) -> Path:
    path = Path(path)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in summary_rows(table):
        w.writerow({k: _fmt(v) for k, v in r.items()})
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path
