import math
import statistics
from dataclasses import replace

import numpy as np
import pytest

from conftest import short_params
from roadguide.experiments import (SWEEP_COLUMNS, VALUE_COLUMNS, Cell, SweepError, cell_config,
                                   child_seed, density_sweep, penetration_shares,
                                   penetration_sweep, read_sweep_csv, run_cell, run_cells,
                                   spearman, speed_trend, summary_rows, ttc_trend)
from roadguide.scenario import InfeasibleDensity, ScenarioConfig, VehicleClass, build_scenario

BASE = short_params(ScenarioConfig(steps=40, warmup_steps=8, seed=11))
COUNTS = (100, 200, 300, 400, 500, 600)


@pytest.fixture(scope="module")
def density():
    return density_sweep(BASE, COUNTS, 5)


@pytest.fixture(scope="module")
def pen():
    return penetration_sweep(BASE, (0.0, 0.5, 1.0), (60, 120), 2)


def test_density_cardinality(density):
    assert len(density.replications) == 30
    assert len(density.aggregates) == 6
    assert [r["total_vehicles"] for r in density.aggregates] == list(COUNTS)


def test_same_invocation_same_bytes(density):
    assert density_sweep(BASE, COUNTS, 5).to_csv() == density.to_csv()


def test_parallel_degree_does_not_change_output():
    a = penetration_sweep(BASE, (0.0, 1.0), (80,), 2, parallel=1)
    b = penetration_sweep(BASE, (0.0, 1.0), (80,), 2, parallel=2)
    assert a.to_csv() == b.to_csv()


def test_aggregate_matches_reaggregated_csv(density, tmp_path):
    path = density.write_csv(tmp_path / "d.csv")
    rows = read_sweep_csv(path)
    reps = [r for r in rows if r["row_type"] == "replication"]
    aggs = [r for r in rows if r["row_type"] == "aggregate"]
    for agg in aggs:
        members = [r for r in reps if r["total_vehicles"] == agg["total_vehicles"]]
        assert len(members) == agg["n_replications"] == 5
        for col in VALUE_COLUMNS:
            vals = [r[col] for r in members if not math.isnan(r[col])]
            if not vals:
                assert math.isnan(agg[col])
                continue
            assert agg[col] == pytest.approx(statistics.fmean(vals), rel=1e-12)
            if len(vals) > 1:
                assert agg[f"{col}_std"] == pytest.approx(statistics.stdev(vals), rel=1e-9, abs=1e-12)
        for col in ("ttc_samples_RV", "ttc_capped_GV"):
            assert agg[col] == sum(r[col] for r in members)


def test_csv_round_trip(density, tmp_path):
    path = density.write_csv(tmp_path / "d.csv")
    rows = read_sweep_csv(path)
    assert list(rows[0]) == SWEEP_COLUMNS
    for parsed, orig in zip(rows, density.rows):
        for k in SWEEP_COLUMNS:
            want = orig.get(k, "")
            got = parsed[k]
            if isinstance(want, float) and math.isnan(want):
                assert math.isnan(got)
            else:
                assert got == want, k


def test_penetration_extremes():
    none = build_scenario(cell_config(BASE, Cell(100, 0.0, 0)))
    assert not np.any(none.vehicle_class == VehicleClass.GV)
    full = build_scenario(cell_config(BASE, Cell(100, 1.0, 0)))
    assert np.all(full.vehicle_class == VehicleClass.GV)


def test_remainder_split_in_base_ratio():
    s = penetration_shares(BASE, 0.6)
    assert s[VehicleClass.RV] == pytest.approx(0.3)
    assert s[VehicleClass.AV] == pytest.approx(0.1)
    with pytest.raises(SweepError):
        penetration_shares(BASE, 1.2)


def _ranks(x):
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="stable")
    r = np.empty(len(x))
    r[order] = np.arange(1, len(x) + 1)
    for v in np.unique(x):
        r[x == v] = r[x == v].mean()
    return r


def test_spearman_column_matches_rank_oracle(pen):
    by_count = {}
    for r in pen.aggregates:
        by_count.setdefault(r["total_vehicles"], []).append(r)
    for n, rows in by_count.items():
        x = _ranks([r["gv_penetration"] for r in rows])
        y = _ranks([r["speed_mean_mps_fleet"] for r in rows])
        want = float(np.corrcoef(x, y)[0, 1])
        assert speed_trend(pen)[n] == pytest.approx(want, abs=1e-12)
        assert all(r["speed_spearman_vs_penetration"] == speed_trend(pen)[n] for r in rows)


def test_spearman_edge_cases():
    assert math.isnan(spearman([1, 2], [3, 4]))
    assert math.isnan(spearman([1, 2, 3], [5, 5, 5]))
    assert spearman([1, 2, 3], [1, 4, 9]) == 1.0


def test_summary_rows(density, pen):
    assert {r["quantity"] for r in summary_rows(density)} == {
        f"ttc_mean_s_{c.name}_vs_total_vehicles" for c in VehicleClass}
    assert [r["total_vehicles"] for r in summary_rows(pen)] == [60, 120]
    assert set(ttc_trend(density)) == {"RV", "AV", "GV"}


def test_child_seed_is_pure_and_distinct():
    assert child_seed(5, 100, 0.2, 0) == child_seed(5, 100, 0.2, 0)
    seeds = {child_seed(5, n, p, r) for n in (100, 200) for p in (0.0, 0.2) for r in range(3)}
    assert len(seeds) == 12
    assert child_seed(5, 100, 0.2, 0) != child_seed(6, 100, 0.2, 0)


def test_isolated_cell_reproduces_sweep_row(density):
    row = next(r for r in density.replications if r["total_vehicles"] == 300 and r["replication"] == 2)
    alone = run_cell(BASE, Cell(300, 0.2, 2))
    assert alone == row


def test_grid_order_does_not_matter():
    cells = [Cell(80, 0.0, 1), Cell(40, 0.5, 0), Cell(80, 0.0, 0)]
    assert run_cells(BASE, cells) == run_cells(BASE, list(reversed(cells)))


def test_infeasible_count_propagates():
    tight = ScenarioConfig(steps=40, warmup_steps=8)
    with pytest.raises(InfeasibleDensity, match="600"):
        density_sweep(tight, (100, 600), 1)


def test_bad_replications():
    with pytest.raises(SweepError):
        density_sweep(BASE, (100,), 0)
