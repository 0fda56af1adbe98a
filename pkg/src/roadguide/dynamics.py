"""Car following, lane changing and the synchronous ring-road update.

This module is the readable, object-level implementation: each vehicle gets
a :class:`~roadguide.perception.PerceptionSnapshot` and decides from it. The
compiled engine in :mod:`roadguide.engine` implements the same update on flat
arrays and is tested against :func:`step` for exact agreement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Mapping, Sequence

import numpy as np

from ._kernels import idm_clamped, idm_raw, lane_gain, old_follower_term
from .perception import (
    ROADSIDE,
    DeploymentPlan,
    NoLeaderAhead,
    PerceptionSettings,
    PerceptionSnapshot,
    deploy_roadside,
    forward_offset,
    gv_effective_leader,
    perceive_local,
    perceive_roadside,
)
from .scenario import DriverParams, ScenarioConfig, VehicleClass, World

EMERGENCY_DECEL_MPS2 = 9.0
# Perceived gaps are floored here before entering IDM; noise can push them to 0.
GAP_FLOOR_M = 0.01
# Distance left behind the leader when an overlap is resolved.
CONTACT_CLEARANCE_M = 0.1
COOLDOWN_EPS = 1e-9


class NonPositiveGap(ValueError):
    pass


class LaneChangeDecision(Enum):
    STAY = 0
    CHANGE_LEFT = 1
    CHANGE_RIGHT = 2


class SafetyEventKind(Enum):
    EMERGENCY_BRAKE = 0
    CONTACT_PREVENTED = 1


@dataclass(frozen=True)
class SafetyEvent:
    time_step: int
    follower_id: int
    leader_id: int
    kind: SafetyEventKind


def ring_gap(follower_pos: float, leader_pos: float, leader_length: float,
             ring_length: float) -> float:
    """Bumper-to-bumper gap on a ring. Negative means overlap."""
    return (leader_pos - follower_pos) % ring_length - leader_length


def idm_acceleration(speed, approach_rate, gap, params: DriverParams,
                     emergency_decel: float = EMERGENCY_DECEL_MPS2):
    """Intelligent Driver Model acceleration, bounded below by ``-emergency_decel``.

    Accepts scalars or numpy arrays.

    Raises:
        NonPositiveGap: any ``gap <= 0``.
    """
    v = np.asarray(speed, dtype=float)
    dv = np.asarray(approach_rate, dtype=float)
    s = np.asarray(gap, dtype=float)
    if np.any(s <= 0):
        raise NonPositiveGap("gap must be > 0")
    a = params.max_accel_mps2
    dyn = v * params.time_headway_s + v * dv / (2.0 * np.sqrt(a * params.comfort_decel_mps2))
    s_star = params.min_gap_m + dyn
    acc = a * (1.0 - (v / params.desired_speed_mps) ** params.accel_exponent - (s_star / s) ** 2)
    acc = np.maximum(acc, -emergency_decel)
    return float(acc) if acc.ndim == 0 else acc


@dataclass(frozen=True)
class LaneView:
    """What the ego perceives of one lane, measured as if it drove in it.

    ``leader_gap`` is from the ego's front to the leader's rear (``inf`` when
    no leader is seen). ``follower_gap`` is from the follower's front to the
    ego's rear, ``None`` when no follower is seen.
    """

    leader_gap: float = math.inf
    leader_speed: float = 0.0
    follower_gap: float | None = None
    follower_speed: float = 0.0
    follower_params: DriverParams | None = None


def mobil_decision(speed: float, params: DriverParams, length: float, current: LaneView,
                   left: LaneView | None = None, right: LaneView | None = None,
                   emergency_decel: float = EMERGENCY_DECEL_MPS2) -> LaneChangeDecision:
    """Incentive-plus-safety lane choice.

    A target lane qualifies when both perceived gaps after the change are
    positive, the new follower would not brake harder than
    ``safe_decel_mps2``, and the politeness-weighted acceleration gain exceeds
    ``change_threshold_mps2``. If both sides qualify the one with the larger
    ego acceleration wins; an exact tie means staying.
    """
    row = params.as_row()
    lead_gap = max(current.leader_gap, GAP_FLOOR_M)
    if math.isinf(lead_gap):
        a_old = idm_clamped(speed, 0.0, lead_gap, row, emergency_decel)
    else:
        a_old = idm_clamped(speed, speed - current.leader_speed, lead_gap, row, emergency_decel)
    of_term = 0.0
    if current.follower_gap is not None:
        of_term = old_follower_term(speed, length, lead_gap, current.leader_speed,
                                    max(current.follower_gap, GAP_FLOOR_M),
                                    current.follower_speed,
                                    current.follower_params.as_row(), emergency_decel)

    best, best_acc = LaneChangeDecision.STAY, -math.inf
    tie = False
    for decision, view in ((LaneChangeDecision.CHANGE_LEFT, left),
                           (LaneChangeDecision.CHANGE_RIGHT, right)):
        if view is None or view.leader_gap <= 0:
            continue
        has_fol = view.follower_gap is not None
        if has_fol and view.follower_gap <= 0:
            continue
        fol_row = view.follower_params.as_row() if has_fol else row
        safe, incentive, a_new = lane_gain(
            speed, length, row, a_old, view.leader_gap, view.leader_speed, has_fol,
            view.follower_gap if has_fol else 0.0, view.follower_speed, fol_row,
            of_term, emergency_decel)
        if not (safe and incentive > params.change_threshold_mps2):
            continue
        if a_new > best_acc:
            best, best_acc, tie = decision, a_new, False
        elif a_new == best_acc:
            tie = True
    return LaneChangeDecision.STAY if tie else best


# ---------------------------------------------------------------------------
# reference stepper


class Perceiver:
    """Dispatches each vehicle to its class's perception model."""

    def __init__(self, perception_by_class: Mapping[VehicleClass, PerceptionSettings],
                 plan: DeploymentPlan, seed: int):
        self.settings = dict(perception_by_class)
        self.plan = plan
        self.seed = seed

    @classmethod
    def from_config(cls, config: ScenarioConfig) -> Perceiver:
        plan = deploy_roadside(config.geometry, config.rsu_spacing_m, config.rsu_sensing_radius_m)
        return cls(config.perception_by_class, plan, config.seed)

    def __call__(self, ego_id: int, history: Sequence[World]) -> PerceptionSnapshot:
        world = history[-1]
        s = self.settings[VehicleClass(int(world.vehicle_class[world.index(ego_id)]))]
        if s.mode == ROADSIDE:
            return perceive_roadside(ego_id, history, self.plan, s, self.seed, world.time_step)
        return perceive_local(ego_id, history, s, self.seed, world.time_step)


def _lane_view(snap, world, i, lane, params_by_class):
    L = world.geometry.length_m
    x = snap.ego_position_m
    lead = snap.leader(lane)
    fol = snap.follower(lane)
    kw = {}
    if lead is not None:
        kw["leader_gap"] = forward_offset(lead.position_m, x, L, True) - lead.length_m
        kw["leader_speed"] = max(lead.speed_mps, 0.0)
    if fol is not None:
        kw["follower_gap"] = -forward_offset(fol.position_m, x, L, False) - float(world.length[i])
        kw["follower_speed"] = max(fol.speed_mps, 0.0)
        fol_cls = VehicleClass(int(world.vehicle_class[world.index(fol.id)]))
        kw["follower_params"] = params_by_class[fol_cls]
    return LaneView(**kw), lead


def step(history: Sequence[World], perceive: Callable[[int, Sequence[World]], PerceptionSnapshot],
         config: ScenarioConfig) -> tuple[World, list[SafetyEvent]]:
    """Advance the latest world in ``history`` by one ``config.dt``.

    Every decision reads perception built from stored worlds only, and all
    writes are committed together, so vehicle order never matters.
    ``history[-1]`` is the current world.
    """
    world = history[-1]
    geo = world.geometry
    L = geo.length_m
    dt = config.dt
    em = config.emergency_decel_mps2
    t_next = world.time_step + 1
    n = len(world)
    new_lane = world.lane.copy()
    accel = np.zeros(n)
    brake_events = []

    for i in range(n):
        cls = VehicleClass(int(world.vehicle_class[i]))
        p = config.params_by_class[cls]
        settings = config.perception_by_class[cls]
        snap = perceive(int(world.ids[i]), history)
        lane = int(world.lane[i])
        v = float(world.speed[i])
        length = float(world.length[i])

        target = lane
        if world.cooldown[i] <= COOLDOWN_EPS and geo.lanes_per_direction > 1:
            cur, _ = _lane_view(snap, world, i, lane, config.params_by_class)
            left = _lane_view(snap, world, i, lane + 1, config.params_by_class)[0] \
                if lane + 1 < geo.lanes_per_direction else None
            right = _lane_view(snap, world, i, lane - 1, config.params_by_class)[0] \
                if lane >= 1 else None
            decision = mobil_decision(v, p, length, cur, left, right, em)
            if decision is LaneChangeDecision.CHANGE_LEFT:
                target = lane + 1
            elif decision is LaneChangeDecision.CHANGE_RIGHT:
                target = lane - 1
        new_lane[i] = target

        row = p.as_row()
        try:
            gap, dv = gv_effective_leader(snap, world.vehicle(i), settings.lookahead_m, L, target)
            raw = idm_raw(v, dv, max(gap, GAP_FLOOR_M), row)
            leader_id = snap.leader(target).id
        except NoLeaderAhead:
            raw = idm_raw(v, 0.0, math.inf, row)
            leader_id = -1
        if raw < -em:
            brake_events.append(SafetyEvent(t_next, int(world.ids[i]), leader_id,
                                            SafetyEventKind.EMERGENCY_BRAKE))
            raw = -em
        accel[i] = raw

    speed, disp = integrate(world.speed, accel, dt)
    contact_events = resolve_contacts(world, new_lane, disp, speed, t_next)
    pos = np.array([wrap(float(x) + float(d), L) for x, d in zip(world.position, disp)])
    changed = new_lane != world.lane
    cooldown = np.where(changed, config.lane_change_cooldown_s,
                        np.maximum(world.cooldown - dt, 0.0))
    new = world.evolve(time_step=t_next, lane=new_lane, position=pos, speed=speed,
                       accel=accel, cooldown=cooldown)
    return new, brake_events + contact_events


def wrap(x: float, L: float) -> float:
    r = x % L
    return 0.0 if r >= L else r


def integrate(speed: np.ndarray, accel: np.ndarray, dt: float):
    """Constant-acceleration update; a vehicle that would reverse stops instead."""
    v_new = speed + accel * dt
    disp = speed * dt + 0.5 * accel * dt * dt
    stop = v_new < 0
    with np.errstate(divide="ignore", invalid="ignore"):
        disp = np.where(stop, -speed * speed / (2.0 * accel), disp)
    return np.where(stop, 0.0, v_new), disp


def resolve_contacts(world: World, new_lane: np.ndarray, disp: np.ndarray,
                     speed: np.ndarray, time_step: int) -> list[SafetyEvent]:
    """Push overlapping followers back behind their leaders, in place.

    Lane order is taken from positions before the move (in the new lanes),
    so a follower that drove through its leader is still detected. Each
    clamp stops the follower and yields one event. ``disp`` and ``speed``
    are modified.
    """
    L = world.geometry.length_m
    x = world.position
    events = []
    groups = {}
    for i in range(len(world)):
        groups.setdefault((int(world.direction[i]), int(new_lane[i])), []).append(i)
    ordered = []
    for key in sorted(groups):
        members = sorted(groups[key], key=lambda i: (float(x[i]), int(world.ids[i])))
        if len(members) >= 2:
            ordered.append(members)
    changed = True
    while changed:
        changed = False
        for members in ordered:
            m = len(members)
            for k in range(m):
                f = members[k]
                if k + 1 < m:
                    lead = members[k + 1]
                    delta = float(x[lead]) - float(x[f])
                else:
                    lead = members[0]
                    delta = float(x[lead]) - float(x[f]) + L
                gap = delta + disp[lead] - disp[f] - world.length[lead]
                if gap < 0:
                    disp[f] = delta + disp[lead] - world.length[lead] - CONTACT_CLEARANCE_M
                    speed[f] = 0.0
                    events.append(SafetyEvent(time_step, int(world.ids[f]), int(world.ids[lead]),
                                              SafetyEventKind.CONTACT_PREVENTED))
                    changed = True
    return events


def initial_history(world: World, depth: int) -> list[World]:
    """History padded with copies of the initial world (vehicles held that state before t=0)."""
    return [world] * depth


def simulate_reference(config: ScenarioConfig, steps: int | None = None):
    """Run :func:`step` repeatedly; slow, but supports every configuration."""
    from .metrics import SimTrace
    from .scenario import build_scenario

    steps = config.steps if steps is None else steps
    world = build_scenario(config)
    perceive = Perceiver.from_config(config)
    history = initial_history(world, config.max_latency)
    n = len(world)
    rec = {k: np.empty((steps, n)) for k in ("position", "speed", "accel")}
    lanes = np.empty((steps, n), dtype=np.int8)
    events = []
    for t in range(steps):
        new, evs = step(history, perceive, config)
        history = history[1:] + [new] if len(history) > 1 else [new]
        rec["position"][t] = new.position
        rec["speed"][t] = new.speed
        rec["accel"][t] = new.accel
        lanes[t] = new.lane
        events += [(e.time_step, e.follower_id, e.leader_id, e.kind.value) for e in evs]
    ev = np.array(events, dtype=np.int64).reshape(-1, 4)
    return SimTrace(config=config, initial=world, lane=lanes, events=ev, **rec)
