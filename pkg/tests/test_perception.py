import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_config
from roadguide.engine import simulate
from roadguide.perception import (LOCAL, ROADSIDE, HistoryTooShallow, NoiseStream, NoLeaderAhead,
                                  PerceivedVehicle, PerceptionError, PerceptionSettings,
                                  PerceptionSnapshot, deploy_roadside, gv_effective_leader,
                                  perceive_local, perceive_roadside)
from roadguide.scenario import RoadGeometry, ScenarioConfig, VehicleState, build_scenario

GEO = RoadGeometry(1000.0, 2, 2)
EXACT_LOCAL = PerceptionSettings(LOCAL, range_m=100.0)
EXACT_RSU = PerceptionSettings(ROADSIDE, range_m=math.inf, latency_steps=1)


def _world(n=80, seed=1):
    w = build_scenario(ScenarioConfig(total_vehicles=n, seed=seed))
    rng = np.random.default_rng(seed)
    return w.evolve(speed=rng.uniform(0, 30, n))


def _history(depth=3, n=80):
    cfg = small_config(total_vehicles=n, seed=5)
    tr = simulate(cfg, steps=depth + 5)
    return tr, [tr.world(k) for k in range(tr.steps)]


class TestDeployment:
    def test_short_ring_rounds_half_to_even(self):
        plan = deploy_roadside(GEO, 400.0, 250.0)
        assert len(plan.unit_positions) == 2
        assert plan.placed_spacing_m == 500.0
        assert plan.unit_positions == (0.0, 500.0)

    def test_density_per_km(self):
        plan = deploy_roadside(RoadGeometry(10000.0, 2, 2), 400.0, 200.0)
        assert plan.units_per_km_per_direction == 2.5
        assert plan.units_per_km_both_directions == 5.0
        assert len(plan.unit_positions) == 25
        assert deploy_roadside(GEO, 400.0, 0.0).units_per_km_per_direction == 2.5

    def test_tangent_circles_cover_exactly(self):
        plan = deploy_roadside(GEO, 400.0, 250.0)
        assert plan.coverage_fraction == 1.0
        assert deploy_roadside(GEO, 400.0, 125.0).coverage_fraction == 0.5

    def test_uniform_spacing(self):
        plan = deploy_roadside(RoadGeometry(1234.5, 1, 1), 100.0, 10.0)
        d = np.diff(plan.unit_positions)
        assert np.max(np.abs(d - plan.placed_spacing_m)) < 1e-6

    def test_bad_spacing(self):
        with pytest.raises(PerceptionError):
            deploy_roadside(GEO, 0.0, 10.0)

    def test_partial_coverage_membership(self):
        plan = deploy_roadside(GEO, 400.0, 100.0)
        assert plan.covers(50.0) and plan.covers(950.0) and plan.covers(600.0)
        assert not plan.covers(250.0)


class TestLocal:
    def test_zero_noise_equals_truth(self):
        w = _world()
        snap = perceive_local(3, [w], EXACT_LOCAL, 7, 0)
        assert snap.ego_position_m == w.position[3]
        for e in snap.entries:
            assert e.position_m == w.position[e.id]
            assert e.speed_mps == w.speed[e.id]
            assert e.lane == w.lane[e.id]

    def test_range_cutoff(self):
        w = _world(n=4).evolve(direction=np.zeros(4, np.int8), lane=np.zeros(4, np.int8),
                               position=np.array([0.0, 100.0, 100.0 + 1e-9, 900.0]))
        snap = perceive_local(0, [w], EXACT_LOCAL, 1, 0)
        assert snap.ids() == {1, 3}

    def test_only_own_direction(self):
        w = _world()
        snap = perceive_local(0, [w], PerceptionSettings(LOCAL, range_m=1000.0), 1, 0)
        assert all(w.direction[e.id] == w.direction[0] for e in snap.entries)
        assert 0 not in snap.ids()

    def test_confidence_and_floor(self):
        w = _world()
        s = PerceptionSettings(LOCAL, range_m=100.0, confidence_floor=0.4)
        snap = perceive_local(0, [w], s, 1, 0)
        assert all(e.confidence >= 0.4 for e in snap.entries)
        full = perceive_local(0, [w], EXACT_LOCAL, 1, 0)
        assert snap.ids() <= full.ids()
        for e in full.entries:
            d = abs(((w.position[e.id] - w.position[0] + 500.0) % 1000.0) - 500.0)
            assert e.confidence == pytest.approx(1.0 - d / 100.0)

    def test_latency_reads_older_world(self):
        tr, hist = _history()
        s = replace(EXACT_LOCAL, latency_steps=3)
        snap = perceive_local(0, hist, s, 1, 0)
        old = hist[-3]
        for e in snap.entries:
            assert e.speed_mps == old.speed[e.id]
        with pytest.raises(HistoryTooShallow):
            perceive_local(0, hist[:2], s, 1, 0)

    def test_noise_is_repeatable_and_pure(self):
        w = _world()
        s = PerceptionSettings(LOCAL, range_m=200.0, pos_noise_sigma_m=0.5, speed_noise_sigma_mps=0.5)
        before = w.position.copy()
        a = perceive_local(4, [w], s, 11, 9)
        b = perceive_local(4, [w], s, 11, 9)
        assert a == b
        assert np.array_equal(before, w.position)
        c = perceive_local(4, [w], s, 11, 10)
        assert a.entries != c.entries

    def test_positions_wrapped(self):
        w = _world()
        s = PerceptionSettings(LOCAL, range_m=500.0, pos_noise_sigma_m=30.0)
        for ego in range(0, 80, 7):
            for e in perceive_local(ego, [w], s, 3, 1).entries:
                assert 0.0 <= e.position_m < 1000.0


class TestNoise:
    def test_std_over_1e5_targets(self):
        z = NoiseStream(2023, 17, 4).normal(np.arange(100_000), 0)
        assert abs(z.std() - 1.0) < 0.02
        assert abs(z.mean()) < 0.02

    def test_std_of_perceived_error_over_steps(self):
        w = build_scenario(ScenarioConfig(geometry=RoadGeometry(1000.0, 2, 1), total_vehicles=8))
        sigma = 0.5
        s = PerceptionSettings(LOCAL, range_m=1000.0, pos_noise_sigma_m=sigma)
        err = []
        for t in range(15_000):
            for e in perceive_local(0, [w], s, 99, t).entries:
                err.append(((e.position_m - w.position[e.id] + 500.0) % 1000.0) - 500.0)
        err = np.array(err)
        assert err.size >= 100_000
        assert abs(err.std() / sigma - 1.0) < 0.02

    def test_components_and_purposes_independent(self):
        t = np.arange(50_000)
        a = NoiseStream(1, 2, 3).normal(t, 0)
        b = NoiseStream(1, 2, 3).normal(t, 1)
        c = NoiseStream(1, 2, 3, purpose=1).normal(t, 0)
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.02
        assert abs(np.corrcoef(a, c)[0, 1]) < 0.02


class TestRoadside:
    def test_latency_one_zero_noise_is_previous_world(self):
        w = _world()
        plan = deploy_roadside(GEO, 400.0, 250.0)
        snap = perceive_roadside(0, [w], plan, EXACT_RSU, 1, 0)
        same = np.flatnonzero(w.direction == w.direction[0])
        assert snap.ids() == set(same.tolist()) - {0}
        for e in snap.entries:
            assert (e.position_m, e.speed_mps, e.confidence) == (w.position[e.id], w.speed[e.id], 0.95)

    def test_latency_three_matches_trace(self):
        tr, hist = _history()
        plan = deploy_roadside(GEO, 400.0, 250.0)
        s = replace(EXACT_RSU, latency_steps=3)
        snap = perceive_roadside(2, hist, plan, s, 1, 0)
        k = tr.steps - 3
        for e in snap.entries:
            assert e.speed_mps == tr.speed[k, e.id]
        with pytest.raises(HistoryTooShallow):
            perceive_roadside(2, hist[:2], plan, s, 1, 0)

    def test_agrees_with_local_when_noiseless(self):
        w = _world()
        plan = deploy_roadside(GEO, 400.0, 250.0)
        loc = {e.id: e for e in perceive_local(5, [w], EXACT_LOCAL, 1, 0).entries}
        rsu = {e.id: e for e in perceive_roadside(5, [w], plan, EXACT_RSU, 1, 0).entries}
        assert loc.keys() <= rsu.keys()
        for k in loc:
            assert (loc[k].position_m, loc[k].speed_mps, loc[k].ahead) == \
                   (rsu[k].position_m, rsu[k].speed_mps, rsu[k].ahead)

    def test_shared_picture_noise(self):
        w = _world()
        plan = deploy_roadside(GEO, 400.0, 250.0)
        s = replace(EXACT_RSU, pos_noise_sigma_m=0.2)
        a = {e.id: e.position_m for e in perceive_roadside(0, [w], plan, s, 1, 3).entries}
        b = {e.id: e.position_m for e in perceive_roadside(2, [w], plan, s, 1, 3).entries}
        common = a.keys() & b.keys()
        assert common and all(a[k] == b[k] for k in common)

    def test_partial_coverage_uses_fallback(self):
        w = _world()
        plan = deploy_roadside(GEO, 400.0, 100.0)
        s = replace(EXACT_RSU, fallback=PerceptionSettings(LOCAL, range_m=150.0))
        snap = perceive_roadside(0, [w], plan, s, 1, 0)
        conf = {e.id: e.confidence for e in snap.entries}
        for j, c in conf.items():
            if plan.covers(w.position[j]):
                assert c == 0.95
            else:
                assert c < 1.0 and c != 0.95
        with pytest.raises(PerceptionError):
            perceive_roadside(0, [w], plan, EXACT_RSU, 1, 0)


def _entry(i, pos, speed, ahead=True, lane=0):
    return PerceivedVehicle(i, lane, pos, speed, 1.0, 5.0, ahead)


def _ego(speed=20.0, pos=100.0):
    return VehicleState(0, 2, 0, 0, pos, speed, 0.0)


class TestEffectiveLeader:
    def test_uniform_speed_is_plain_following(self):
        snap = PerceptionSnapshot(0, (_entry(1, 160.0, 20.0), _entry(2, 250.0, 20.0)), 1, 100.0)
        assert gv_effective_leader(snap, _ego(), 200.0, 1000.0) == (55.0, 0.0)

    def test_hidden_stopped_vehicle(self):
        snap = PerceptionSnapshot(0, (_entry(1, 160.0, 20.0), _entry(2, 280.0, 0.0)), 1, 100.0)
        gap, dv = gv_effective_leader(snap, _ego(), 200.0, 1000.0)
        assert (gap, dv) == (55.0, 20.0)
        assert gv_effective_leader(snap, _ego(), 150.0, 1000.0) == (55.0, 0.0)

    def test_zero_lookahead_is_nearest_leader(self):
        snap = PerceptionSnapshot(0, (_entry(1, 160.0, 25.0), _entry(2, 170.0, 0.0)), 1, 100.0)
        assert gv_effective_leader(snap, _ego(), 0.0, 1000.0) == (55.0, -5.0)

    def test_wraps_around_ring(self):
        snap = PerceptionSnapshot(0, (_entry(1, 20.0, 10.0),), 1, 950.0)
        assert gv_effective_leader(snap, _ego(pos=950.0), 200.0, 1000.0) == (65.0, 10.0)

    def test_other_lane_and_behind_ignored(self):
        snap = PerceptionSnapshot(0, (_entry(3, 50.0, 0.0, ahead=False), _entry(1, 160.0, 20.0),
                                      _entry(2, 200.0, 0.0, lane=1)), 1, 100.0)
        assert gv_effective_leader(snap, _ego(), 200.0, 1000.0) == (55.0, 0.0)

    def test_no_leader(self):
        snap = PerceptionSnapshot(0, (_entry(3, 50.0, 0.0, ahead=False),), 1, 100.0)
        with pytest.raises(NoLeaderAhead):
            gv_effective_leader(snap, _ego(), 200.0, 1000.0)


@settings(max_examples=60, deadline=None)
@given(speeds=st.lists(st.floats(0, 40), min_size=1, max_size=8),
       offsets=st.lists(st.floats(6, 400), min_size=1, max_size=8),
       look=st.floats(0, 500), v=st.floats(0, 40))
def test_effective_rate_never_below_plain(speeds, offsets, look, v):
    k = min(len(speeds), len(offsets))
    offs = sorted(offsets[:k])
    entries = tuple(_entry(i + 1, 100.0 + o, s) for i, (o, s) in enumerate(zip(offs, speeds)))
    snap = PerceptionSnapshot(0, entries, 1, 100.0)
    ego = _ego(speed=v)
    gap, dv = gv_effective_leader(snap, ego, look, 1000.0)
    gap0, dv0 = gv_effective_leader(snap, ego, 0.0, 1000.0)
    assert gap == gap0
    assert dv >= dv0


@settings(max_examples=30, deadline=None)
@given(r1=st.floats(1, 500), r2=st.floats(1, 500), floor=st.floats(0, 1), seed=st.integers(0, 50),
       ego=st.integers(0, 79))
def test_local_snapshot_monotone(r1, r2, floor, seed, ego):
    w = _world(seed=seed)
    lo, hi = sorted((r1, r2))
    small = perceive_local(ego, [w], PerceptionSettings(LOCAL, range_m=lo), 1, 0).ids()
    big = perceive_local(ego, [w], PerceptionSettings(LOCAL, range_m=hi), 1, 0).ids()
    assert small <= big
    gated = perceive_local(ego, [w], PerceptionSettings(LOCAL, range_m=hi, confidence_floor=floor), 1, 0)
    assert gated.ids() <= big
    assert all(e.confidence >= floor for e in gated.entries)
