import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roadguide.dynamics import idm_acceleration, ring_gap
from roadguide.scenario import (DriverParams, InfeasibleDensity, RoadGeometry, ScenarioConfig,
                                ScenarioError, ShareMismatch, SpeedAtOrAboveDesired,
                                VehicleClass, build_scenario, equilibrium_spacing,
                                equilibrium_speed, largest_remainder_counts)

RV, AV, GV = VehicleClass.RV, VehicleClass.AV, VehicleClass.GV


def test_class_counts_for_default_mix():
    assert largest_remainder_counts({RV: 0.6, AV: 0.2, GV: 0.2}, 100) == {RV: 60, AV: 20, GV: 20}


def test_build_scenario_class_counts():
    w = build_scenario(ScenarioConfig(total_vehicles=100))
    assert np.bincount(w.vehicle_class, minlength=3).tolist() == [60, 20, 20]


def test_single_lane_positions_are_uniform():
    cfg = ScenarioConfig(geometry=RoadGeometry(1000.0, 1, 1), total_vehicles=4)
    w = build_scenario(cfg)
    assert w.position.tolist() == [0.0, 250.0, 500.0, 750.0]


def test_600_canonical_vehicles_do_not_fit():
    # 600 x (5 + 2) = 4200 m > 4 lanes x 1000 m
    with pytest.raises(InfeasibleDensity):
        build_scenario(ScenarioConfig(total_vehicles=600))


def test_600_short_vehicles_fit():
    from conftest import short_params
    w = build_scenario(short_params(ScenarioConfig(total_vehicles=600)))
    assert len(w) == 600


def test_share_mismatch():
    with pytest.raises(ShareMismatch):
        build_scenario(ScenarioConfig(class_shares={RV: 0.5, AV: 0.2, GV: 0.2}))


def test_ties_go_to_earlier_class():
    # quotas 1/3 each of 2 vehicles: two ties broken RV, AV
    third = 1.0 / 3.0
    assert largest_remainder_counts({RV: third, AV: third, GV: third}, 2) == {RV: 1, AV: 1, GV: 0}


def test_config_invariants():
    with pytest.raises(ScenarioError):
        ScenarioConfig(dt=0.0)
    with pytest.raises(ScenarioError):
        ScenarioConfig(steps=10, warmup_steps=10)
    with pytest.raises(ScenarioError):
        RoadGeometry(directions=3)
    with pytest.raises(ScenarioError):
        RoadGeometry(length_m=0.0)
    with pytest.raises(ScenarioError):
        DriverParams(politeness=1.5)
    with pytest.raises(ScenarioError):
        DriverParams(safe_decel_mps2=1.0)


def test_equilibrium_spacing_at_rest_is_min_gap(canonical):
    assert equilibrium_spacing(0.0, canonical) == canonical.min_gap_m


def test_equilibrium_spacing_diverges_near_desired(canonical):
    v0 = canonical.desired_speed_mps
    near = [equilibrium_spacing(v0 * (1 - eps), canonical) for eps in (1e-3, 1e-6, 1e-9, 1e-12)]
    assert all(b > 10 * a for a, b in zip(near, near[1:]))
    with pytest.raises(SpeedAtOrAboveDesired):
        equilibrium_spacing(v0, canonical)


def test_equilibrium_spacing_value_at_15(canonical):
    # independent scalar evaluation of (s0 + vT) / sqrt(1 - (v/v0)^delta)
    want = (2.0 + 15.0 * 1.6) / math.sqrt(1.0 - (15.0 / 33.3) ** 4)
    got = equilibrium_spacing(15.0, canonical)
    assert got == pytest.approx(26.0 / math.sqrt(1.0 - (15.0 / 33.3) ** 4), rel=1e-15)
    assert got == pytest.approx(want, rel=1e-15)
    assert abs(idm_acceleration(15.0, 0.0, got, canonical)) < 1e-9


def test_equilibrium_speed_inverts_spacing(canonical):
    for v in (0.5, 5.0, 20.0, 30.0):
        assert equilibrium_speed(equilibrium_spacing(v, canonical), canonical) == pytest.approx(v, abs=1e-9)
    assert equilibrium_speed(canonical.min_gap_m, canonical) == 0.0


def test_build_is_deterministic():
    cfg = ScenarioConfig(total_vehicles=123, seed=99)
    a, b = build_scenario(cfg), build_scenario(cfg)
    assert a.same_state(b)
    assert a.vehicle_class.tobytes() == b.vehicle_class.tobytes()


def test_seed_changes_labels_only():
    a = build_scenario(ScenarioConfig(total_vehicles=100, seed=1))
    b = build_scenario(ScenarioConfig(total_vehicles=100, seed=2))
    assert not np.array_equal(a.vehicle_class, b.vehicle_class)
    assert np.array_equal(a.position, b.position)


def _lane_gaps(world):
    L = world.geometry.length_m
    out = []
    for d in range(world.geometry.directions):
        for ln in range(world.geometry.lanes_per_direction):
            idx = np.flatnonzero((world.direction == d) & (world.lane == ln))
            idx = idx[np.argsort(world.position[idx])]
            for k, i in enumerate(idx):
                j = idx[(k + 1) % len(idx)]
                if len(idx) > 1:
                    out.append(ring_gap(world.position[i], world.position[j], world.length[j], L))
    return out


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 400), seed=st.integers(0, 2**64 - 1),
       rv=st.floats(0, 1), av_frac=st.floats(0, 1))
def test_build_invariants(n, seed, rv, av_frac):
    av = (1 - rv) * av_frac
    shares = {RV: rv, AV: av, GV: max(0.0, 1.0 - rv - av)}
    cfg = ScenarioConfig(total_vehicles=n, seed=seed, class_shares=shares)
    w = build_scenario(cfg)
    L = w.geometry.length_m
    assert len(w) == n
    counts = np.bincount(w.vehicle_class, minlength=3)
    assert counts.sum() == n
    assert counts.tolist() == [largest_remainder_counts(shares, n)[c] for c in VehicleClass]
    assert np.all((w.position >= 0) & (w.position < L))
    assert np.all(w.speed >= 0)
    for g in _lane_gaps(w):
        assert g >= 1.99999
    per_group = np.bincount(w.direction * 2 + w.lane, minlength=4)
    assert per_group.max() - per_group.min() <= 1


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 33.0))
def test_equilibrium_is_fixed_point(v):
    p = DriverParams()
    s = equilibrium_spacing(v, p)
    assert abs(idm_acceleration(v, 0.0, s, p)) < 1e-9


@settings(max_examples=60, deadline=None)
@given(total=st.integers(0, 5000), a=st.floats(0, 1), b=st.floats(0, 1))
def test_largest_remainder_sums_to_total(total, a, b):
    shares = {RV: a, AV: (1 - a) * b, GV: max(0.0, 1 - a - (1 - a) * b)}
    counts = largest_remainder_counts(shares, total)
    assert sum(counts.values()) == total
    for c in VehicleClass:
        assert abs(counts[c] - shares[c] * total) < 1.0 + 1e-6
