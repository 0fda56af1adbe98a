"""Surrogate safety and efficiency statistics computed from ground-truth traces."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .scenario import ScenarioConfig, VehicleClass, World

METRICS_SCHEMA = "metrics.v1"
DEFAULT_TTC_CAP_S = 100.0
_CHUNK = 512


class EmptySampleSet(ValueError):
    pass


class NonPositiveGap(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SimTrace:
    """Recorded run: one row per simulated step (the state after that step).

    ``events`` has columns ``(time_step, follower_id, leader_id, kind)`` with
    kind 0 for emergency braking and 1 for a prevented contact.
    """

    config: ScenarioConfig
    initial: World
    position: np.ndarray
    speed: np.ndarray
    accel: np.ndarray
    lane: np.ndarray
    events: np.ndarray

    @property
    def steps(self) -> int:
        return self.position.shape[0]

    @property
    def n_vehicles(self) -> int:
        return self.position.shape[1]

    @property
    def default_window(self) -> tuple[int, int]:
        return (min(self.config.warmup_steps, self.steps), self.steps)

    @cached_property
    def trace_hash(self) -> str:
        h = hashlib.sha256()
        w = self.initial
        for arr in (w.vehicle_class, w.direction, w.length, w.position, w.speed,
                    self.position, self.speed, self.accel, self.lane, self.events):
            a = np.ascontiguousarray(arr)
            h.update(str(a.dtype).encode())
            h.update(str(a.shape).encode())
            h.update(a.tobytes())
        return h.hexdigest()

    def world(self, k: int) -> World:
        """The world after step ``k + 1`` (record ``k``)."""
        return self.initial.evolve(time_step=k + 1, lane=self.lane[k].copy(),
                                   position=self.position[k].copy(),
                                   speed=self.speed[k].copy(), accel=self.accel[k].copy())

    def event_counts(self) -> dict[str, int]:
        kinds = self.events[:, 3] if len(self.events) else np.empty(0)
        return {"emergency_brake": int(np.sum(kinds == 0)),
                "contact_prevented": int(np.sum(kinds == 1))}


def ttc(gap: float, follower_speed: float, leader_speed: float,
        cap: float = DEFAULT_TTC_CAP_S) -> float | None:
    """Time to collision at constant speeds; ``None`` when the gap is not closing."""
    if gap <= 0:
        raise NonPositiveGap("gap must be > 0")
    closing = follower_speed - leader_speed
    if closing <= 0:
        return None
    return min(gap / closing, cap)


def _check_window(trace: SimTrace, window):
    start, stop = trace.default_window if window is None else window
    if not 0 <= start < stop <= trace.steps:
        raise ValueError(f"window {(start, stop)} outside trace of {trace.steps} steps")
    return start, stop


def _leader_pairs(trace: SimTrace, a: int, b: int):
    """Same-lane (follower, leader) pairs for records ``a:b``, true states.

    Returns ``(follower, leader, gap, valid)``, each of shape ``(b - a, n)``;
    ``valid`` is False where a vehicle is alone in its lane.
    """
    w = trace.initial
    L = w.geometry.length_m
    n_lanes = w.geometry.lanes_per_direction
    cols = np.arange(trace.n_vehicles)
    pos = trace.position[a:b]
    grp = w.direction[None, :].astype(np.int64) * n_lanes + trace.lane[a:b]
    # groups are 2L apart, so one float key sorts by (group, position)
    order = np.argsort(grp * (2.0 * L) + pos, axis=1, kind="stable")
    sg = np.take_along_axis(grp, order, axis=1)
    starts = np.ones_like(sg, dtype=bool)
    starts[:, 1:] = sg[:, 1:] != sg[:, :-1]
    first = np.maximum.accumulate(np.where(starts, cols, 0), axis=1)
    nxt = np.minimum(cols + 1, trace.n_vehicles - 1)
    same = (cols + 1 < trace.n_vehicles) & (sg[:, nxt] == sg)
    lead_col = np.where(same, nxt, first)
    valid = lead_col != cols
    lead = np.take_along_axis(order, lead_col, axis=1)
    pf = np.take_along_axis(pos, order, axis=1)
    pl = np.take_along_axis(pos, lead, axis=1)
    gap = (pl - pf) % L - w.length[lead]
    return order, lead, gap, valid


def ttc_samples(trace: SimTrace, window=None, cap: float | None = None):
    """All closing same-lane follower/leader pairs in the window.

    Returns ``(follower_class, ttc_s, capped)`` as flat arrays.
    """
    start, stop = _check_window(trace, window)
    cap = trace.config.ttc_cap_s if cap is None else cap
    cls_out, val_out, cap_out = [], [], []
    for a in range(start, stop, _CHUNK):
        b = min(a + _CHUNK, stop)
        fol, lead, gap, valid = _leader_pairs(trace, a, b)
        spd = trace.speed[a:b]
        closing = np.take_along_axis(spd, fol, axis=1) - np.take_along_axis(spd, lead, axis=1)
        m = valid & (closing > 0) & (gap > 0)
        raw = gap[m] / closing[m]
        val_out.append(np.minimum(raw, cap))
        cap_out.append(raw >= cap)
        cls_out.append(trace.initial.vehicle_class[fol[m]])
    if not val_out:
        return np.empty(0, np.int8), np.empty(0), np.empty(0, bool)
    return np.concatenate(cls_out), np.concatenate(val_out), np.concatenate(cap_out)


class TraceInvariantError(RuntimeError):
    pass


def check_trace(trace: SimTrace, tol: float = 1e-9) -> None:
    """Verify state invariants of every record.

    Raises:
        TraceInvariantError: a position outside ``[0, L)``, a negative or
            non-finite speed, an invalid lane, or overlapping vehicles.
    """
    w = trace.initial
    L = w.geometry.length_m
    if not np.all(np.isfinite(trace.position)) or not np.all(np.isfinite(trace.speed)):
        raise TraceInvariantError("non-finite state")
    if trace.position.min(initial=0.0) < 0 or trace.position.max(initial=0.0) >= L:
        raise TraceInvariantError("position outside [0, L)")
    if trace.speed.min(initial=0.0) < 0:
        raise TraceInvariantError("negative speed")
    if trace.lane.min(initial=0) < 0 or trace.lane.max(initial=0) >= w.geometry.lanes_per_direction:
        raise TraceInvariantError("lane index out of range")
    for a in range(0, trace.steps, _CHUNK):
        b = min(a + _CHUNK, trace.steps)
        _, _, gap, valid = _leader_pairs(trace, a, b)
        bad = valid & (gap < -tol)
        if bad.any():
            k = int(np.argwhere(bad)[0][0]) + a
            raise TraceInvariantError(f"overlap in record {k}: gap {gap[bad].min():.6g} m")


def class_mean_ttc(trace: SimTrace, vehicle_class: VehicleClass, window=None,
                   cap: float | None = None) -> float:
    """Mean TTC over closing samples whose follower belongs to ``vehicle_class``.

    Raises:
        EmptySampleSet: no closing sample for that class in the window.
    """
    if not np.any(trace.initial.vehicle_class == int(vehicle_class)):
        raise ValueError(f"class {VehicleClass(vehicle_class).name} not in fleet")
    cls, val, _ = ttc_samples(trace, window, cap)
    sel = val[cls == int(vehicle_class)]
    if sel.size == 0:
        raise EmptySampleSet(f"no closing samples for {VehicleClass(vehicle_class).name}")
    return float(sel.mean())


def mean_speed(trace: SimTrace, window=None, vehicle_class: VehicleClass | None = None) -> float:
    """Time-and-fleet average of true speeds, optionally for one class."""
    start, stop = _check_window(trace, window)
    spd = trace.speed[start:stop]
    if vehicle_class is not None:
        spd = spd[:, trace.initial.vehicle_class == int(vehicle_class)]
    if spd.size == 0:
        return math.nan
    return float(spd.mean())


@dataclass(frozen=True)
class MetricsRecord:
    seed: int
    total_vehicles: int
    window_start: int
    window_stop: int
    ttc_mean: dict
    ttc_samples: dict
    ttc_capped: dict
    speed_mean_fleet: float
    speed_mean: dict
    emergency_brake_events: int
    contact_prevented_events: int
    trace_hash: str

    def row(self) -> dict:
        r = {"schema_version": METRICS_SCHEMA, "seed": self.seed,
             "total_vehicles": self.total_vehicles,
             "window_start": self.window_start, "window_stop": self.window_stop}
        for c in VehicleClass:
            r[f"ttc_mean_s_{c.name}"] = self.ttc_mean[c.name]
            r[f"ttc_samples_{c.name}"] = self.ttc_samples[c.name]
            r[f"ttc_capped_{c.name}"] = self.ttc_capped[c.name]
        r["speed_mean_mps_fleet"] = self.speed_mean_fleet
        for c in VehicleClass:
            r[f"speed_mean_mps_{c.name}"] = self.speed_mean[c.name]
        r["events_emergency_brake"] = self.emergency_brake_events
        r["events_contact_prevented"] = self.contact_prevented_events
        r["trace_hash"] = self.trace_hash
        return r


METRICS_COLUMNS = list(MetricsRecord(0, 0, 0, 0, {c.name: 0 for c in VehicleClass},
                                     {c.name: 0 for c in VehicleClass},
                                     {c.name: 0 for c in VehicleClass}, 0.0,
                                     {c.name: 0 for c in VehicleClass}, 0, 0, "").row())


def compute_metrics(trace: SimTrace, window=None, cap: float | None = None) -> MetricsRecord:
    start, stop = _check_window(trace, window)
    cls, val, capped = ttc_samples(trace, (start, stop), cap)
    means, counts, caps, speeds = {}, {}, {}, {}
    for c in VehicleClass:
        m = cls == int(c)
        counts[c.name] = int(m.sum())
        caps[c.name] = int(capped[m].sum())
        means[c.name] = float(val[m].mean()) if counts[c.name] else math.nan
        speeds[c.name] = mean_speed(trace, (start, stop), c)
    ev = trace.event_counts()
    return MetricsRecord(
        seed=trace.config.seed, total_vehicles=trace.n_vehicles,
        window_start=start, window_stop=stop,
        ttc_mean=means, ttc_samples=counts, ttc_capped=caps,
        speed_mean_fleet=mean_speed(trace, (start, stop)), speed_mean=speeds,
        emergency_brake_events=ev["emergency_brake"],
        contact_prevented_events=ev["contact_prevented"],
        trace_hash=trace.trace_hash,
    )
