"""Cost-benefit ledgers for a regular and a smart (roadside-sensing) highway.

All currency amounts are in units of CNY 10,000 ("CNY-10k"). Flows are in
vehicles per year.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from numpy.polynomial import Polynomial

from .scenario import ConfigError

CBA_SCHEMA = "cba.v1"
CNY_PER_UNIT = 10_000.0
HOURS_PER_YEAR = 8760


class CbaError(ValueError):
    pass


class DegenerateFit(CbaError):
    pass


class ZeroDenominator(CbaError):
    pass


class HighwayKind(str, Enum):
    REGULAR = "regular"
    SMART = "smart"


class BcrMode(str, Enum):
    FULL_COST = "full_cost"
    RECURRING_COST = "recurring_cost"


@dataclass(frozen=True)
class HighwayProfile:
    """Physical and cost description of one highway section.

    Attributes:
        length_km: Section length.
        baseline_maintenance_per_km: Regular upkeep in the first ledger year, per km.
        maintenance_step: Baseline fraction added every ``maintenance_period_years``.
        maintenance_period_years: Length of one escalation block.
        smart_overhead_fraction: Extra upkeep of the smart highway relative to regular.
        device_cost_per_km: Roadside equipment deployment cost, paid in the first year.
        device_extra_initial_fraction: Yearly device upkeep as a fraction of deployment cost.
        device_extra_annual_growth: Compound growth of the device upkeep.
        upgrade_cycle_years: Equipment refresh cycle; folded into the device upkeep stream.
    """

    length_km: float = 70.754
    baseline_maintenance_per_km: float = 84.083
    maintenance_step: float = 0.2
    maintenance_period_years: int = 3
    smart_overhead_fraction: float = 0.2
    device_cost_per_km: float = 39.72
    device_extra_initial_fraction: float = 0.1
    device_extra_annual_growth: float = 0.05
    upgrade_cycle_years: int = 5

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise CbaError(f"{f.name} must be >= 0")
        if not self.length_km > 0:
            raise CbaError("length_km must be > 0")
        if self.maintenance_period_years < 1:
            raise CbaError("maintenance_period_years must be >= 1")

    @property
    def deployment_cost(self) -> float:
        return self.length_km * self.device_cost_per_km


@dataclass(frozen=True)
class TrafficModel:
    """Traffic and toll-revenue projection inputs.

    The revenue history used for the quadratic fit is back-cast from the
    anchor year: revenue shrinks at ``revenue_cagr_recent`` back to
    ``revenue_break_year`` and at ``revenue_cagr_early`` before it, while
    flow shrinks at ``flow_growth_rate``.
    """

    anchor_year: int = 2022
    anchor_flow: float = 19.5072e6
    anchor_revenue: float = 50346.49
    flow_growth_rate: float = 0.1114
    capacity_per_hour: float = 4000.0
    flow_cap: float = 35e6
    penetration_step: float = 0.1
    uplift_low: float = 0.03
    uplift_high: float = 0.30
    uplift_threshold: float = 0.5
    history_start_year: int = 2013
    revenue_break_year: int = 2019
    revenue_cagr_recent: float = 0.1343
    revenue_cagr_early: float = 0.1814
    fee_per_km: float = 0.2
    guided_fee_share: float = 0.7

    def __post_init__(self):
        for name in ("anchor_flow", "anchor_revenue", "flow_growth_rate", "capacity_per_hour",
                     "flow_cap", "penetration_step", "uplift_low", "uplift_high",
                     "uplift_threshold", "revenue_cagr_recent", "revenue_cagr_early",
                     "fee_per_km", "guided_fee_share"):
            if getattr(self, name) < 0:
                raise CbaError(f"{name} must be >= 0")
        if self.flow_cap > self.capacity_per_hour * HOURS_PER_YEAR:
            raise CbaError("flow_cap exceeds capacity_per_hour * 8760")
        if self.history_start_year >= self.anchor_year:
            raise CbaError("history_start_year must precede anchor_year")


def maintenance_factor(year_offset: int, step: float = 0.2, period: int = 3) -> float:
    """Upkeep multiplier: ``step`` of the baseline added once per ``period`` years."""
    if year_offset < 0:
        raise CbaError("year_offset must be >= 0")
    return 1.0 + step * (year_offset // period)


def annual_cost(year: int, kind: HighwayKind, profile: HighwayProfile, start_year: int) -> float:
    """Upkeep (plus the one-off deployment for a smart highway in ``start_year``)."""
    offset = year - start_year
    if offset < 0:
        raise CbaError(f"year {year} precedes ledger start {start_year}")
    regular = (profile.length_km * profile.baseline_maintenance_per_km
               * maintenance_factor(offset, profile.maintenance_step,
                                    profile.maintenance_period_years))
    if HighwayKind(kind) is HighwayKind.REGULAR:
        return regular
    deploy = profile.deployment_cost
    device = (deploy * profile.device_extra_initial_fraction
              * (1.0 + profile.device_extra_annual_growth) ** offset)
    cost = regular * (1.0 + profile.smart_overhead_fraction) + device
    if offset == 0:
        cost += deploy
    return cost


def penetration(year: int, model: TrafficModel) -> float:
    return min(model.penetration_step * (year - model.anchor_year), 1.0)


def uplift(p: float, model: TrafficModel) -> float:
    return model.uplift_low if p < model.uplift_threshold else model.uplift_high


def project_flow(year: int, kind: HighwayKind, model: TrafficModel) -> float:
    """Yearly vehicle flow, capped at ``model.flow_cap``."""
    if year < model.anchor_year:
        raise CbaError(f"year {year} precedes anchor year {model.anchor_year}")
    regular = min(model.anchor_flow * (1.0 + model.flow_growth_rate) ** (year - model.anchor_year),
                  model.flow_cap)
    if HighwayKind(kind) is HighwayKind.REGULAR:
        return regular
    return min(regular * (1.0 + uplift(penetration(year, model), model)), model.flow_cap)


def backcast_history(model: TrafficModel) -> list[tuple[float, float]]:
    """(flow, revenue) pairs for ``history_start_year`` .. ``anchor_year``."""
    out = []
    for year in range(model.history_start_year, model.anchor_year + 1):
        flow = model.anchor_flow / (1.0 + model.flow_growth_rate) ** (model.anchor_year - year)
        if year >= model.revenue_break_year:
            rev = model.anchor_revenue / (1.0 + model.revenue_cagr_recent) ** (model.anchor_year - year)
        else:
            at_break = (model.anchor_revenue
                        / (1.0 + model.revenue_cagr_recent) ** (model.anchor_year - model.revenue_break_year))
            rev = at_break / (1.0 + model.revenue_cagr_early) ** (model.revenue_break_year - year)
        out.append((flow, rev))
    return out


@dataclass(frozen=True)
class RevenueCurve:
    """Quadratic toll revenue as a function of yearly flow, floored at zero."""

    coefficients: tuple[float, float, float]

    def __call__(self, flow):
        c0, c1, c2 = self.coefficients
        val = c0 + c1 * np.asarray(flow, dtype=float) + c2 * np.asarray(flow, dtype=float) ** 2
        val = np.maximum(val, 0.0)
        return float(val) if np.ndim(val) == 0 else val


def fit_revenue_curve(history: Sequence[tuple[float, float]]) -> RevenueCurve:
    """Least-squares quadratic through (flow, revenue) points.

    Raises:
        DegenerateFit: fewer than three distinct flow values.
    """
    data = np.asarray(history, dtype=float)
    if data.ndim != 2 or data.shape[1] != 2 or len(np.unique(data[:, 0])) < 3:
        raise DegenerateFit("need at least three distinct flow values for a quadratic")
    poly = Polynomial.fit(data[:, 0], data[:, 1], 2).convert()
    coef = np.zeros(3)
    coef[:len(poly.coef)] = poly.coef
    return RevenueCurve(tuple(float(c) for c in coef))


def guided_fee_revenue(flow: float, p: float, profile: HighwayProfile, fee_per_km: float,
                       share: float = 0.7) -> float:
    """Per-km fee paid by the charged share of guided vehicles, in CNY-10k."""
    if not 0.0 <= p <= 1.0:
        raise CbaError(f"penetration {p} outside [0, 1]")
    return flow * p * share * fee_per_km * profile.length_km / CNY_PER_UNIT


def bcr(total_cost: float, total_net_benefit: float, one_time_deployment: float = 0.0,
        mode: BcrMode = BcrMode.FULL_COST) -> float:
    """Net benefit over cost; ``RECURRING_COST`` leaves the one-off deployment out of the cost."""
    denom = total_cost if BcrMode(mode) is BcrMode.FULL_COST else total_cost - one_time_deployment
    if not denom > 0:
        raise ZeroDenominator(f"denominator {denom} is not positive")
    return total_net_benefit / denom


@dataclass(frozen=True)
class LedgerRow:
    year: int
    flow: float
    gv_penetration: float
    cost: float
    toll_revenue: float
    guided_fee_revenue: float

    @property
    def net(self) -> float:
        return self.toll_revenue + self.guided_fee_revenue - self.cost


@dataclass(frozen=True)
class CbaLedger:
    kind: HighwayKind
    rows: tuple[LedgerRow, ...]
    one_time_deployment: float

    @property
    def total_cost(self) -> float:
        return math.fsum(r.cost for r in self.rows)

    @property
    def total_toll_revenue(self) -> float:
        return math.fsum(r.toll_revenue for r in self.rows)

    @property
    def total_guided_fee_revenue(self) -> float:
        return math.fsum(r.guided_fee_revenue for r in self.rows)

    @property
    def total_net(self) -> float:
        return math.fsum(r.net for r in self.rows)

    def bcr(self, mode: BcrMode) -> float:
        return bcr(self.total_cost, self.total_net, self.one_time_deployment, mode)

    def totals(self) -> dict:
        return {"total_cost": self.total_cost, "total_toll_revenue": self.total_toll_revenue,
                "total_guided_fee_revenue": self.total_guided_fee_revenue,
                "total_net": self.total_net, "one_time_deployment": self.one_time_deployment,
                "bcr_full_cost": self.bcr(BcrMode.FULL_COST),
                "bcr_recurring_cost": self.bcr(BcrMode.RECURRING_COST)}

    def to_csv(self) -> str:
        """Yearly rows, then a blank line and a ``key,value`` footer with totals and BCRs."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LEDGER_COLUMNS)
        for r in self.rows:
            w.writerow([CBA_SCHEMA, self.kind.value, r.year, repr(r.flow), repr(r.gv_penetration),
                        repr(r.cost), repr(r.toll_revenue), repr(r.guided_fee_revenue),
                        repr(r.net)])
        w.writerow([])
        w.writerow(["key", "value"])
        for k, v in self.totals().items():
            w.writerow([k, repr(v)])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv(), encoding="utf-8")
        return path


LEDGER_COLUMNS = ["schema_version", "kind", "year", "flow_vehicles", "gv_penetration",
                  "cost", "toll_revenue", "guided_fee_revenue", "net"]


@dataclass(frozen=True)
class CbaSettings:
    profile: HighwayProfile = field(default_factory=HighwayProfile)
    traffic: TrafficModel = field(default_factory=TrafficModel)
    start_year: int = 2023
    end_year: int = 2036

    def __post_init__(self):
        if self.end_year < self.start_year:
            raise CbaError(f"empty horizon {self.start_year}..{self.end_year}")
        if self.start_year <= self.traffic.anchor_year:
            raise CbaError("horizon must start after the traffic anchor year")


def run_cba(profile: HighwayProfile | None = None, model: TrafficModel | None = None,
            start_year: int = 2023, end_year: int = 2036,
            curve: RevenueCurve | None = None) -> tuple[CbaLedger, CbaLedger]:
    """Regular and smart ledgers over ``start_year`` .. ``end_year`` inclusive."""
    s = CbaSettings(profile or HighwayProfile(), model or TrafficModel(), start_year, end_year)
    profile, model = s.profile, s.traffic
    curve = curve or fit_revenue_curve(backcast_history(model))
    ledgers = []
    for kind in HighwayKind:
        rows = []
        for year in range(start_year, end_year + 1):
            flow = project_flow(year, kind, model)
            p = penetration(year, model) if kind is HighwayKind.SMART else 0.0
            fee = (guided_fee_revenue(flow, p, profile, model.fee_per_km, model.guided_fee_share)
                   if kind is HighwayKind.SMART else 0.0)
            rows.append(LedgerRow(year, flow, p, annual_cost(year, kind, profile, start_year),
                                  float(curve(flow)), fee))
        deploy = profile.deployment_cost if kind is HighwayKind.SMART else 0.0
        ledgers.append(CbaLedger(kind, tuple(rows), deploy))
    return ledgers[0], ledgers[1]


SUMMARY_COLUMNS = ["schema_version", "kind", "total_cost", "total_toll_revenue",
                   "total_guided_fee_revenue", "total_net", "one_time_deployment",
                   "bcr_full_cost", "bcr_recurring_cost"]


def summary_csv(ledgers: Sequence[CbaLedger]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for led in ledgers:
        t = led.totals()
        w.writerow([CBA_SCHEMA, led.kind.value] + [repr(t[c]) for c in SUMMARY_COLUMNS[2:]])
    return buf.getvalue()


def _from_mapping(cls, data: Mapping, path: str):
    if not isinstance(data, Mapping):
        raise ConfigError(path, "expected a mapping")
    known = {f.name for f in fields(cls)}
    defaults = cls()
    kw = {}
    for k, v in data.items():
        if k not in known:
            raise ConfigError(f"{path}.{k}", "unknown field")
        want = type(getattr(defaults, k))
        if isinstance(v, bool) or not isinstance(v, (int, float)) or (want is int and not isinstance(v, int)):
            raise ConfigError(f"{path}.{k}", f"expected {want.__name__}, got {v!r}")
        kw[k] = want(v)
    try:
        return replace(defaults, **kw)
    except CbaError as exc:
        raise ConfigError(path, str(exc)) from None


def cba_settings_from_dict(data: Mapping | None, path: str = "cba") -> CbaSettings:
    """Build settings from a config tree, keeping defaults for absent keys.

    Raises:
        ConfigError: unknown keys, wrong types or an empty horizon, naming the field.
    """
    data = dict(data or {})
    extra = set(data) - {"profile", "traffic", "start_year", "end_year"}
    if extra:
        raise ConfigError(f"{path}.{sorted(extra)[0]}", "unknown field")
    profile = _from_mapping(HighwayProfile, data.get("profile", {}), f"{path}.profile")
    traffic = _from_mapping(TrafficModel, data.get("traffic", {}), f"{path}.traffic")
    years = {}
    for k in ("start_year", "end_year"):
        if k in data:
            v = data[k]
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{path}.{k}", f"expected an integer year, got {v!r}")
            years[k] = v
    try:
        return CbaSettings(profile, traffic, **years)
    except CbaError as exc:
        raise ConfigError(f"{path}.end_year", str(exc)) from None


def cba_settings_to_dict(s: CbaSettings) -> dict:
    return {"profile": {f.name: getattr(s.profile, f.name) for f in fields(s.profile)},
            "traffic": {f.name: getattr(s.traffic, f.name) for f in fields(s.traffic)},
            "start_year": s.start_year, "end_year": s.end_year}
