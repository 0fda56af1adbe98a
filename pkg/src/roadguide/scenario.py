"""Road geometry, driver parameters, scenario configuration and the initial world."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from enum import IntEnum
from typing import Mapping

import numpy as np
from scipy.optimize import brentq

from ._kernels import N_PARAMS
from .perception import PerceptionError, PerceptionSettings, default_perception


class ScenarioError(ValueError):
    pass


class InfeasibleDensity(ScenarioError):
    pass


class ShareMismatch(ScenarioError):
    pass


class SpeedAtOrAboveDesired(ScenarioError):
    pass


class VehicleClass(IntEnum):
    RV = 0
    AV = 1
    GV = 2


@dataclass(frozen=True)
class RoadGeometry:
    length_m: float = 1000.0
    lanes_per_direction: int = 2
    directions: int = 2

    def __post_init__(self):
        if not self.length_m > 0:
            raise ScenarioError("length_m must be > 0")
        if int(self.lanes_per_direction) != self.lanes_per_direction or self.lanes_per_direction < 1:
            raise ScenarioError("lanes_per_direction must be an integer >= 1")
        if self.directions not in (1, 2):
            raise ScenarioError("directions must be 1 or 2")

    @property
    def n_lanes_total(self) -> int:
        return self.directions * self.lanes_per_direction


@dataclass(frozen=True)
class DriverParams:
    """IDM car-following and lane-change parameters of one vehicle class."""

    desired_speed_mps: float = 33.3
    time_headway_s: float = 1.6
    max_accel_mps2: float = 0.73
    comfort_decel_mps2: float = 1.67
    accel_exponent: float = 4.0
    min_gap_m: float = 2.0
    vehicle_length_m: float = 5.0
    politeness: float = 0.2
    change_threshold_mps2: float = 0.1
    safe_decel_mps2: float = 4.0

    def __post_init__(self):
        for name in ("desired_speed_mps", "time_headway_s", "max_accel_mps2",
                     "comfort_decel_mps2", "accel_exponent", "min_gap_m",
                     "vehicle_length_m", "safe_decel_mps2"):
            if not getattr(self, name) > 0:
                raise ScenarioError(f"{name} must be > 0")
        if not 0.0 <= self.politeness <= 1.0:
            raise ScenarioError("politeness must lie in [0, 1]")
        if self.change_threshold_mps2 < 0:
            raise ScenarioError("change_threshold_mps2 must be >= 0")
        if self.safe_decel_mps2 < self.comfort_decel_mps2:
            raise ScenarioError("safe_decel_mps2 must be >= comfort_decel_mps2")

    def as_row(self) -> np.ndarray:
        row = np.array([self.desired_speed_mps, self.time_headway_s, self.max_accel_mps2,
                        self.comfort_decel_mps2, self.accel_exponent, self.min_gap_m,
                        self.vehicle_length_m, self.politeness, self.change_threshold_mps2,
                        self.safe_decel_mps2], dtype=np.float64)
        assert row.shape == (N_PARAMS,)
        return row


def default_params() -> dict[VehicleClass, DriverParams]:
    base = DriverParams()
    return {
        VehicleClass.RV: base,
        VehicleClass.AV: replace(base, time_headway_s=1.2),
        VehicleClass.GV: replace(base, time_headway_s=1.0),
    }


@dataclass(frozen=True)
class ScenarioConfig:
    geometry: RoadGeometry = field(default_factory=RoadGeometry)
    total_vehicles: int = 100
    class_shares: Mapping[VehicleClass, float] = field(
        default_factory=lambda: {VehicleClass.RV: 0.6, VehicleClass.AV: 0.2, VehicleClass.GV: 0.2})
    params_by_class: Mapping[VehicleClass, DriverParams] = field(default_factory=default_params)
    perception_by_class: Mapping[VehicleClass, PerceptionSettings] = field(
        default_factory=lambda: {VehicleClass[k]: v for k, v in default_perception().items()})
    rsu_spacing_m: float = 400.0
    rsu_sensing_radius_m: float = 250.0
    dt: float = 0.25
    steps: int = 4800
    warmup_steps: int = 960
    seed: int = 2023
    lane_change_cooldown_s: float = 4.0
    emergency_decel_mps2: float = 9.0
    ttc_cap_s: float = 100.0

    def __post_init__(self):
        if int(self.total_vehicles) != self.total_vehicles or self.total_vehicles < 1:
            raise ScenarioError("total_vehicles must be an integer >= 1")
        if not self.dt > 0:
            raise ScenarioError("dt must be > 0")
        if not (self.steps > self.warmup_steps >= 0):
            raise ScenarioError("need steps > warmup_steps >= 0")
        if not 0 <= self.seed < 2 ** 64:
            raise ScenarioError("seed must be a 64-bit unsigned integer")
        for cls in VehicleClass:
            if cls not in self.params_by_class:
                raise ScenarioError(f"params_by_class is missing {cls.name}")
            if cls not in self.perception_by_class:
                raise ScenarioError(f"perception_by_class is missing {cls.name}")
        if any(s < 0 for s in self.class_shares.values()):
            raise ScenarioError("class shares must be >= 0")
        if not self.emergency_decel_mps2 > 0 or not self.ttc_cap_s > 0:
            raise ScenarioError("emergency_decel_mps2 and ttc_cap_s must be > 0")
        if self.lane_change_cooldown_s < 0:
            raise ScenarioError("lane_change_cooldown_s must be >= 0")

    def with_shares(self, shares: Mapping[VehicleClass, float]) -> ScenarioConfig:
        return replace(self, class_shares=dict(shares))

    def without_noise(self) -> ScenarioConfig:
        return replace(self, perception_by_class={
            c: s.without_noise() for c, s in self.perception_by_class.items()})

    @property
    def max_latency(self) -> int:
        depth = 1
        for s in self.perception_by_class.values():
            depth = max(depth, s.latency_steps)
            if s.fallback is not None:
                depth = max(depth, s.fallback.latency_steps)
        return depth


@dataclass(frozen=True)
class VehicleState:
    id: int
    vehicle_class: VehicleClass
    direction: int
    lane: int
    position_m: float
    speed_mps: float
    accel_mps2: float


@dataclass(frozen=True, eq=False)
class World:
    """All vehicle states at one instant, stored column-wise and indexed by id."""

    geometry: RoadGeometry
    time_step: int
    ids: np.ndarray
    vehicle_class: np.ndarray
    direction: np.ndarray
    lane: np.ndarray
    position: np.ndarray
    speed: np.ndarray
    accel: np.ndarray
    length: np.ndarray
    cooldown: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, np.ndarray):
                v.setflags(write=False)

    def __len__(self):
        return len(self.ids)

    def index(self, vehicle_id: int) -> int:
        """Storage index of ``vehicle_id``."""
        return int(np.flatnonzero(self.ids == vehicle_id)[0])

    def vehicle(self, i: int) -> VehicleState:
        return VehicleState(int(self.ids[i]), VehicleClass(int(self.vehicle_class[i])),
                            int(self.direction[i]), int(self.lane[i]), float(self.position[i]),
                            float(self.speed[i]), float(self.accel[i]))

    def evolve(self, **changes) -> World:
        return replace(self, **changes)

    def same_state(self, other: World) -> bool:
        return all(np.array_equal(getattr(self, n), getattr(other, n))
                   for n in ("ids", "vehicle_class", "direction", "lane", "position",
                             "speed", "accel", "cooldown")) and self.time_step == other.time_step


def equilibrium_spacing(speed: float, params: DriverParams) -> float:
    """Bumper-to-bumper gap at which IDM acceleration vanishes for ``speed``."""
    v0 = params.desired_speed_mps
    if speed < 0:
        raise ScenarioError("speed must be >= 0")
    if speed >= v0:
        raise SpeedAtOrAboveDesired(f"speed {speed} >= desired speed {v0}")
    num = params.min_gap_m + speed * params.time_headway_s
    return num / math.sqrt(1.0 - (speed / v0) ** params.accel_exponent)


def equilibrium_speed(gap: float, params: DriverParams) -> float:
    """Inverse of :func:`equilibrium_spacing`; 0 for gaps at or below ``min_gap_m``."""
    if gap <= params.min_gap_m:
        return 0.0
    v0 = params.desired_speed_mps
    hi = v0 * (1.0 - 1e-12)
    if equilibrium_spacing(hi, params) <= gap:
        return hi
    return brentq(lambda v: equilibrium_spacing(v, params) - gap, 0.0, hi, xtol=1e-13, rtol=1e-15)


def largest_remainder_counts(shares: Mapping[VehicleClass, float], total: int) -> dict[VehicleClass, int]:
    """Apportion ``total`` vehicles to classes; ties go to the earlier class."""
    s = sum(shares.get(c, 0.0) for c in VehicleClass)
    if abs(s - 1.0) > 1e-9:
        raise ShareMismatch(f"class shares sum to {s!r}, expected 1")
    quota = {c: shares.get(c, 0.0) * total for c in VehicleClass}
    counts = {c: int(math.floor(q + 1e-9)) for c, q in quota.items()}
    left = total - sum(counts.values())
    by_rem = sorted(VehicleClass, key=lambda c: (-(quota[c] - counts[c]), int(c)))
    for c in by_rem[:left]:
        counts[c] += 1
    return counts


def lane_counts(total: int, geometry: RoadGeometry) -> list[int]:
    groups = geometry.n_lanes_total
    return [total // groups + (1 if g < total % groups else 0) for g in range(groups)]


def build_scenario(config: ScenarioConfig) -> World:
    """Construct the world at t = 0.

    Vehicles are spread evenly over directions and lanes and equally spaced
    within each lane, starting at position 0. Ids run direction-major, then
    lane, then position. Class labels are a seeded shuffle of the
    largest-remainder class counts. Each vehicle starts at the equilibrium
    speed of its own class for its initial gap.
    """
    geo = config.geometry
    counts = largest_remainder_counts(config.class_shares, config.total_vehicles)
    present = [c for c in VehicleClass if counts[c] > 0]
    need = max(config.params_by_class[c].vehicle_length_m + config.params_by_class[c].min_gap_m
               for c in present)
    per_lane = lane_counts(config.total_vehicles, geo)
    if max(per_lane) * need > geo.length_m:
        raise InfeasibleDensity(
            f"{config.total_vehicles} vehicles need {max(per_lane)} x {need:g} m per lane "
            f"but a lane is {geo.length_m:g} m")

    labels = np.concatenate([np.full(counts[c], int(c), dtype=np.int8) for c in VehicleClass])
    rng = np.random.default_rng(config.seed)
    labels = rng.permutation(labels)

    n = config.total_vehicles
    direction = np.empty(n, dtype=np.int8)
    lane = np.empty(n, dtype=np.int8)
    position = np.empty(n)
    i = 0
    for g, m in enumerate(per_lane):
        for k in range(m):
            direction[i] = g // geo.lanes_per_direction
            lane[i] = g % geo.lanes_per_direction
            position[i] = k * geo.length_m / m
            i += 1

    length = np.array([config.params_by_class[VehicleClass(c)].vehicle_length_m for c in labels])
    speed = np.empty(n)
    i = 0
    for m in per_lane:
        if m == 0:
            continue
        spacing = geo.length_m / m
        for k in range(m):
            leader = i - k + (k + 1) % m
            p = config.params_by_class[VehicleClass(int(labels[i]))]
            gap = spacing - length[leader] if m > 1 else geo.length_m - length[i]
            speed[i] = min(p.desired_speed_mps, equilibrium_speed(gap, p))
            i += 1

    return World(
        geometry=geo,
        time_step=0,
        ids=np.arange(n, dtype=np.int64),
        vehicle_class=labels,
        direction=direction,
        lane=lane,
        position=position,
        speed=speed,
        accel=np.zeros(n),
        length=length,
        cooldown=np.zeros(n),
    )


# ---------------------------------------------------------------------------
# structured-text (YAML) round trip


class ConfigError(ScenarioError):
    """A configuration value failed to parse or validate; ``field`` names it."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


def _settings_to_dict(s: PerceptionSettings) -> dict:
    d = asdict(s)
    d["range_m"] = None if math.isinf(s.range_m) else s.range_m
    d["fallback"] = _settings_to_dict(s.fallback) if s.fallback is not None else None
    return d


def config_to_dict(config: ScenarioConfig) -> dict:
    return {
        "geometry": asdict(config.geometry),
        "total_vehicles": config.total_vehicles,
        "class_shares": {c.name: float(config.class_shares.get(c, 0.0)) for c in VehicleClass},
        "params_by_class": {c.name: asdict(config.params_by_class[c]) for c in VehicleClass},
        "perception_by_class": {c.name: _settings_to_dict(config.perception_by_class[c])
                                for c in VehicleClass},
        "rsu_spacing_m": config.rsu_spacing_m,
        "rsu_sensing_radius_m": config.rsu_sensing_radius_m,
        "dt": config.dt,
        "steps": config.steps,
        "warmup_steps": config.warmup_steps,
        "seed": config.seed,
        "lane_change_cooldown_s": config.lane_change_cooldown_s,
        "emergency_decel_mps2": config.emergency_decel_mps2,
        "ttc_cap_s": config.ttc_cap_s,
    }


def _build(cls, data, path, base=None):
    if data is None:
        return base if base is not None else cls()
    if not isinstance(data, Mapping):
        raise ConfigError(path, f"expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"{path}.{key}", "unknown field")
        kwargs[key] = value
    try:
        if base is not None:
            return replace(base, **kwargs)
        return cls(**kwargs)
    except (ScenarioError, PerceptionError, TypeError) as exc:
        raise ConfigError(path, str(exc)) from None


def _class_key(name, path):
    try:
        return VehicleClass[str(name)]
    except KeyError:
        raise ConfigError(path, f"unknown vehicle class {name!r}") from None


def _settings_from_dict(data, path, base):
    if data is None:
        return base
    if not isinstance(data, Mapping):
        raise ConfigError(path, "expected a mapping")
    data = dict(data)
    if "range_m" in data and data["range_m"] is None:
        data["range_m"] = math.inf
    if "fallback" in data and data["fallback"] is not None:
        fb_base = base.fallback if base is not None and base.fallback is not None else PerceptionSettings()
        data["fallback"] = _settings_from_dict(data["fallback"], f"{path}.fallback", fb_base)
    return _build(PerceptionSettings, data, path, base)


_SCALARS = {"total_vehicles": int, "rsu_spacing_m": float, "rsu_sensing_radius_m": float,
            "dt": float, "steps": int, "warmup_steps": int, "seed": int,
            "lane_change_cooldown_s": float, "emergency_decel_mps2": float, "ttc_cap_s": float}


def config_from_dict(data: Mapping | None, path: str = "scenario") -> ScenarioConfig:
    """Build a config from a (partial) mapping; missing keys keep defaults."""
    data = dict(data or {})
    default = ScenarioConfig()
    kwargs = {}
    for key, value in data.items():
        here = f"{path}.{key}"
        if key == "geometry":
            kwargs[key] = _build(RoadGeometry, value, here)
        elif key == "class_shares":
            if not isinstance(value, Mapping):
                raise ConfigError(here, "expected a mapping of class name to share")
            shares = {}
            for name, share in value.items():
                if not isinstance(share, (int, float)) or isinstance(share, bool):
                    raise ConfigError(f"{here}.{name}", "share must be a number")
                shares[_class_key(name, f"{here}.{name}")] = float(share)
            kwargs[key] = shares
        elif key == "params_by_class":
            merged = dict(default.params_by_class)
            for name, p in (value or {}).items():
                c = _class_key(name, f"{here}.{name}")
                merged[c] = _build(DriverParams, p, f"{here}.{name}", merged[c])
            kwargs[key] = merged
        elif key == "perception_by_class":
            merged = dict(default.perception_by_class)
            for name, s in (value or {}).items():
                c = _class_key(name, f"{here}.{name}")
                merged[c] = _settings_from_dict(s, f"{here}.{name}", merged[c])
            kwargs[key] = merged
        elif key in _SCALARS:
            typ = _SCALARS[key]
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(here, f"expected a number, got {value!r}")
            if typ is int and int(value) != value:
                raise ConfigError(here, f"expected an integer, got {value!r}")
            kwargs[key] = typ(value)
        else:
            raise ConfigError(here, "unknown field")
    try:
        return ScenarioConfig(**kwargs)
    except (ScenarioError, PerceptionError) as exc:
        raise ConfigError(path, str(exc)) from None
