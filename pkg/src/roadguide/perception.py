"""Class-specific views of the world: onboard sensing and the roadside network.

A vehicle never acts on the true current state of its neighbours. It acts on
a :class:`PerceptionSnapshot` built from a stored past world (``latency_steps``
deep in the history), with Gaussian measurement noise and a confidence tag
per entry.

Two perception kinds exist:

* ``local``: onboard sensors. Only vehicles within ``range_m`` of the ego are
  seen and confidence decays linearly with distance.
* ``roadside``: the roadside unit network. Every vehicle in the ego's
  direction inside the covered segment is seen with constant confidence.

Snapshot entries are listed in tracking order, i.e. by true signed ring
offset from the ego in the stored world. Noise perturbs the measured
position and speed of a track but never its identity or which side of the
ego it is on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Sequence

import numpy as np

from ._kernels import (
    PURPOSE_LOCAL,
    PURPOSE_ROADSIDE,
    ROADSIDE_OBSERVER,
    gauss_many,
    is_ahead,
    signed_offset,
)

if TYPE_CHECKING:
    from .scenario import RoadGeometry, VehicleState, World


class PerceptionError(ValueError):
    pass


class HistoryTooShallow(PerceptionError):
    pass


class NoLeaderAhead(LookupError):
    """No perceived vehicle ahead of the ego in its lane (free road)."""


LOCAL = "local"
ROADSIDE = "roadside"


@dataclass(frozen=True)
class PerceptionSettings:
    """Sensing model of one vehicle class.

    ``range_m`` is ignored for roadside sensing, which is segment-wide.
    ``fallback`` describes the onboard sensors a roadside-guided vehicle uses
    for vehicles outside roadside coverage; it must be a local setting.
    """

    mode: str = LOCAL
    range_m: float = 100.0
    pos_noise_sigma_m: float = 0.0
    speed_noise_sigma_mps: float = 0.0
    latency_steps: int = 1
    confidence_floor: float = 0.0
    roadside_confidence: float = 0.95
    lookahead_m: float = 0.0
    fallback: PerceptionSettings | None = None

    def __post_init__(self):
        if self.mode not in (LOCAL, ROADSIDE):
            raise PerceptionError(f"mode must be '{LOCAL}' or '{ROADSIDE}', got {self.mode!r}")
        if self.pos_noise_sigma_m < 0 or self.speed_noise_sigma_mps < 0:
            raise PerceptionError("noise sigmas must be >= 0")
        if int(self.latency_steps) != self.latency_steps or self.latency_steps < 1:
            raise PerceptionError("latency_steps must be an integer >= 1")
        if not 0.0 <= self.confidence_floor <= 1.0:
            raise PerceptionError("confidence_floor must lie in [0, 1]")
        if not 0.0 <= self.roadside_confidence <= 1.0:
            raise PerceptionError("roadside_confidence must lie in [0, 1]")
        if self.lookahead_m < 0:
            raise PerceptionError("lookahead_m must be >= 0")
        if self.mode == LOCAL and not (math.isfinite(self.range_m) and self.range_m > 0):
            raise PerceptionError("local sensing needs a finite positive range_m")
        if self.fallback is not None and self.fallback.mode != LOCAL:
            raise PerceptionError("fallback sensing must be local")

    def without_noise(self) -> PerceptionSettings:
        fb = self.fallback.without_noise() if self.fallback is not None else None
        return _replace(self, pos_noise_sigma_m=0.0, speed_noise_sigma_mps=0.0, fallback=fb)


def _replace(obj, **changes):
    from dataclasses import replace
    return replace(obj, **changes)


def default_perception():
    """Per-class default sensing, keyed by class name."""
    av = PerceptionSettings(LOCAL, range_m=100.0, pos_noise_sigma_m=0.5,
                            speed_noise_sigma_mps=0.5, latency_steps=1)
    return {
        "RV": PerceptionSettings(LOCAL, range_m=1000.0, latency_steps=1),
        "AV": av,
        "GV": PerceptionSettings(ROADSIDE, range_m=math.inf, pos_noise_sigma_m=0.2,
                                 speed_noise_sigma_mps=0.2, latency_steps=2,
                                 roadside_confidence=0.95, lookahead_m=200.0,
                                 fallback=av),
    }


@dataclass(frozen=True)
class PerceivedVehicle:
    id: int
    lane: int
    position_m: float
    speed_mps: float
    confidence: float
    length_m: float
    ahead: bool


@dataclass(frozen=True)
class PerceptionSnapshot:
    """Tracks seen by one observer, in tracking order (behind-most first).

    ``ego_position_m`` is the observer's own position at the instant the
    picture was taken, so offsets to tracks are read within one time frame.
    """

    observer_id: int
    entries: tuple[PerceivedVehicle, ...]
    snapshot_lag_steps: int
    ego_position_m: float

    def ids(self) -> set[int]:
        return {e.id for e in self.entries}

    def in_lane(self, lane: int) -> list[PerceivedVehicle]:
        return [e for e in self.entries if e.lane == lane]

    def leader(self, lane: int) -> PerceivedVehicle | None:
        for e in self.entries:
            if e.lane == lane and e.ahead:
                return e
        return None

    def follower(self, lane: int) -> PerceivedVehicle | None:
        for e in reversed(self.entries):
            if e.lane == lane and not e.ahead:
                return e
        return None


# ---------------------------------------------------------------------------
# roadside deployment


@dataclass(frozen=True)
class DeploymentPlan:
    spacing_m: float
    unit_positions: tuple[float, ...]
    sensing_radius_m: float
    units_per_km_per_direction: float
    ring_length_m: float

    @property
    def placed_spacing_m(self) -> float:
        return self.ring_length_m / len(self.unit_positions)

    @property
    def coverage_fraction(self) -> float:
        return min(1.0, 2.0 * self.sensing_radius_m / self.placed_spacing_m)

    @property
    def units_per_km_both_directions(self) -> float:
        return 2.0 * self.units_per_km_per_direction

    def covers(self, position_m: float) -> bool:
        if self.coverage_fraction >= 1.0:
            return True
        L = self.ring_length_m
        return any(abs(signed_offset(position_m - u, L)) <= self.sensing_radius_m
                   for u in self.unit_positions)


def deploy_roadside(geometry: RoadGeometry, spacing_m: float,
                    sensing_radius_m: float) -> DeploymentPlan:
    """Place roadside units uniformly around one ring.

    The integral unit count rounds ``L / spacing_m`` half-to-even (at least
    one unit); the reported per-km density uses the unrounded ratio so it is
    independent of the ring length.
    """
    if spacing_m <= 0:
        raise PerceptionError("spacing_m must be > 0")
    if sensing_radius_m < 0:
        raise PerceptionError("sensing_radius_m must be >= 0")
    L = geometry.length_m
    n = max(1, round(L / spacing_m))
    placed = L / n
    return DeploymentPlan(
        spacing_m=spacing_m,
        unit_positions=tuple(k * placed for k in range(n)),
        sensing_radius_m=sensing_radius_m,
        units_per_km_per_direction=1000.0 / spacing_m,
        ring_length_m=L,
    )


# ---------------------------------------------------------------------------
# noise


@dataclass(frozen=True)
class NoiseStream:
    """Counter-addressed Gaussian noise for one (observer, step, purpose).

    Draws depend only on the key and the target id, so they are identical
    however many times, and in whatever order, they are requested.
    """

    seed: int
    step: int
    observer: int
    purpose: int = PURPOSE_LOCAL

    def normal(self, targets, component: int) -> np.ndarray:
        t = np.asarray(targets, dtype=np.uint64).reshape(-1)
        return gauss_many(np.uint64(self.seed), np.uint64(self.step),
                          np.uint64(self.observer), t, self.purpose, component)


def roadside_stream(seed: int, step: int) -> NoiseStream:
    """The single noise stream of the roadside picture broadcast at ``step``."""
    return NoiseStream(seed, step, int(ROADSIDE_OBSERVER), PURPOSE_ROADSIDE)


# ---------------------------------------------------------------------------
# snapshots


def _ordered_candidates(ego_id, ego_pos, world, direction):
    """Same-direction vehicles (excluding the ego) in tracking order."""
    L = world.geometry.length_m
    idx = np.flatnonzero((world.direction == direction) & (world.ids != ego_id))
    off = signed_offset(world.position[idx] - ego_pos, L)
    ahead = np.array([is_ahead(o, world.ids[j], ego_id) for o, j in zip(off, idx)], dtype=bool)
    # Tracking order: behind-most first, then by offset; equal offsets by id.
    order = sorted(range(len(idx)), key=lambda k: (off[k], world.ids[idx[k]]))
    return idx[order], off[order], ahead[order]


def _entries(world, idx, ahead, conf, stream, pos_sigma, speed_sigma):
    L = world.geometry.length_m
    targets = world.ids[idx]
    pos = world.position[idx].astype(float)
    spd = world.speed[idx].astype(float)
    if pos_sigma > 0:
        pos = pos + pos_sigma * stream.normal(targets, 0)
    if speed_sigma > 0:
        spd = spd + speed_sigma * stream.normal(targets, 1)
    pos = pos % L
    return [
        PerceivedVehicle(int(targets[k]), int(world.lane[idx[k]]), float(pos[k]),
                         float(spd[k]), float(conf[k]), float(world.length[idx[k]]),
                         bool(ahead[k]))
        for k in range(len(idx))
    ]


def _local_entries(ego_id, world, settings, seed, step):
    ego = int(np.flatnonzero(world.ids == ego_id)[0])
    idx, off, ahead = _ordered_candidates(ego_id, world.position[ego], world,
                                          world.direction[ego])
    dist = np.abs(off)
    conf = 1.0 - dist / settings.range_m
    keep = (dist <= settings.range_m) & (conf >= settings.confidence_floor)
    stream = NoiseStream(seed, step, ego_id, PURPOSE_LOCAL)
    return _entries(world, idx[keep], ahead[keep], conf[keep], stream,
                    settings.pos_noise_sigma_m, settings.speed_noise_sigma_mps)


def _own_position(world, ego_id) -> float:
    return float(world.position[int(np.flatnonzero(world.ids == ego_id)[0])])


def _lagged(history: Sequence[World], depth: int) -> World:
    if depth < 1 or len(history) < depth:
        raise HistoryTooShallow(f"need {depth} stored worlds, have {len(history)}")
    return history[-depth]


def perceive_local(ego_id: int, history: Sequence[World], settings: PerceptionSettings,
                   seed: int, step: int) -> PerceptionSnapshot:
    """Onboard view of vehicle ``ego_id``.

    ``history[-1]`` is the latest committed world; the view is read
    ``settings.latency_steps`` deep. Noise is drawn from the
    ``(seed, step, ego_id)`` local stream.
    """
    world = _lagged(history, settings.latency_steps)
    entries = _local_entries(ego_id, world, settings, seed, step)
    return PerceptionSnapshot(ego_id, tuple(entries), settings.latency_steps,
                              _own_position(world, ego_id))


def perceive_roadside(ego_id: int, history: Sequence[World], plan: DeploymentPlan,
                      settings: PerceptionSettings, seed: int, step: int) -> PerceptionSnapshot:
    """Roadside-network view of guided vehicle ``ego_id``.

    Covered vehicles come from the broadcast roadside picture (roadside
    noise and latency, constant confidence). If coverage is partial,
    uncovered vehicles are seen through ``settings.fallback`` instead.
    """
    world = _lagged(history, settings.latency_steps)
    ego = int(np.flatnonzero(world.ids == ego_id)[0])
    idx, off, ahead = _ordered_candidates(ego_id, world.position[ego], world,
                                          world.direction[ego])
    covered = np.array([plan.covers(p) for p in world.position[idx]], dtype=bool)
    conf = np.full(len(idx), settings.roadside_confidence)
    keep = covered & (conf >= settings.confidence_floor)
    entries = _entries(world, idx[keep], ahead[keep], conf[keep],
                       roadside_stream(seed, step),
                       settings.pos_noise_sigma_m, settings.speed_noise_sigma_mps)
    if not covered.all():
        if settings.fallback is None:
            raise PerceptionError("partial roadside coverage needs fallback settings")
        fb_world = _lagged(history, settings.fallback.latency_steps)
        local = _local_entries(ego_id, fb_world, settings.fallback, seed, step)
        # re-express fallback tracks relative to the roadside picture's ego position
        shift = float(world.position[ego]) - _own_position(fb_world, ego_id)
        L = world.geometry.length_m
        uncovered = set(world.ids[idx[~covered]].tolist())
        entries += [replace(e, position_m=(e.position_m + shift) % L)
                    for e in local if e.id in uncovered]
        rank = {int(world.ids[j]): k for k, j in enumerate(idx)}
        entries.sort(key=lambda e: rank.get(e.id, len(rank)))
    return PerceptionSnapshot(ego_id, tuple(entries), settings.latency_steps,
                              float(world.position[ego]))


def forward_offset(entry_pos: float, ego_pos: float, length: float, ahead: bool) -> float:
    """Perceived signed offset of a track from the ego, unwrapped to its side."""
    off = signed_offset(entry_pos - ego_pos, length)
    if ahead and off < -0.25 * length:
        off += length
    elif not ahead and off > 0.25 * length:
        off -= length
    return off


def gv_effective_leader(snapshot: PerceptionSnapshot, ego: VehicleState, lookahead_m: float,
                        ring_length_m: float, lane: int | None = None) -> tuple[float, float]:
    """Gap to the nearest perceived leader and a hazard-aware approach rate.

    The approach rate is taken against the slowest perceived vehicle within
    ``lookahead_m`` ahead of the ego (the leader included), so a guided
    vehicle starts braking for slowdowns hidden behind its leader.

    Raises:
        NoLeaderAhead: nothing is perceived ahead in the lane.
    """
    lane = ego.lane if lane is None else lane
    leader = snapshot.leader(lane)
    if leader is None:
        raise NoLeaderAhead(f"vehicle {ego.id} has no perceived leader in lane {lane}")
    L = ring_length_m
    x = snapshot.ego_position_m
    gap = forward_offset(leader.position_m, x, L, True) - leader.length_m
    slowest = max(leader.speed_mps, 0.0)
    for e in snapshot.entries:
        if e.lane != lane or not e.ahead:
            continue
        off = forward_offset(e.position_m, x, L, True)
        if 0.0 < off <= lookahead_m:
            slowest = min(slowest, max(e.speed_mps, 0.0))
    return gap, ego.speed_mps - slowest
