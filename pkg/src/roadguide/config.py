"""Loading of the single YAML run file shared by all commands.

A run file has up to three top-level sections, all optional::

    scenario:   # ScenarioConfig fields (partial; defaults fill the rest)
    sweep:      # grid definition for the experiment sweeps
    cba:        # highway profile, traffic model and ledger horizon
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import yaml

from .cba import CbaSettings, cba_settings_from_dict, cba_settings_to_dict
from .experiments import DEFAULT_COUNTS, DEFAULT_PENETRATIONS, DEFAULT_REPLICATIONS
from .scenario import ConfigError, ScenarioConfig, config_from_dict, config_to_dict


@dataclass(frozen=True)
class SweepSettings:
    vehicle_counts: tuple[int, ...] = DEFAULT_COUNTS
    penetrations: tuple[float, ...] = DEFAULT_PENETRATIONS
    densities: tuple[int, ...] = DEFAULT_COUNTS
    replications: int = DEFAULT_REPLICATIONS


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    sweep: SweepSettings = field(default_factory=SweepSettings)
    cba: CbaSettings = field(default_factory=CbaSettings)

    def to_dict(self) -> dict:
        return {"scenario": config_to_dict(self.scenario),
                "sweep": {"vehicle_counts": list(self.sweep.vehicle_counts),
                          "penetrations": list(self.sweep.penetrations),
                          "densities": list(self.sweep.densities),
                          "replications": self.sweep.replications},
                "cba": cba_settings_to_dict(self.cba)}


def _number_list(value, path, kind):
    if not isinstance(value, list) or not value:
        raise ConfigError(path, "expected a non-empty list")
    out = []
    for k, v in enumerate(value):
        if isinstance(v, bool) or not isinstance(v, (int, float)) or (kind is int and int(v) != v):
            raise ConfigError(f"{path}[{k}]", f"expected {kind.__name__}, got {v!r}")
        out.append(kind(v))
    return tuple(out)


def sweep_from_dict(data: Mapping | None, path: str = "sweep") -> SweepSettings:
    if data is None:
        return SweepSettings()
    if not isinstance(data, Mapping):
        raise ConfigError(path, "expected a mapping")
    kw = {}
    for key, value in data.items():
        here = f"{path}.{key}"
        if key in ("vehicle_counts", "densities"):
            kw[key] = _number_list(value, here, int)
            if any(n < 1 for n in kw[key]):
                raise ConfigError(here, "vehicle counts must be >= 1")
        elif key == "penetrations":
            kw[key] = _number_list(value, here, float)
            if any(not 0.0 <= p <= 1.0 for p in kw[key]):
                raise ConfigError(here, "penetrations must lie in [0, 1]")
        elif key == "replications":
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(here, f"expected an integer >= 1, got {value!r}")
            kw[key] = value
        else:
            raise ConfigError(here, "unknown field")
    return SweepSettings(**kw)


def run_config_from_dict(data: Mapping | None) -> RunConfig:
    data = {} if data is None else data
    if not isinstance(data, Mapping):
        raise ConfigError("<root>", "expected a mapping with scenario/sweep/cba sections")
    for key in data:
        if key not in ("scenario", "sweep", "cba"):
            raise ConfigError(str(key), "unknown section")
    return RunConfig(scenario=config_from_dict(data.get("scenario")),
                     sweep=sweep_from_dict(data.get("sweep")),
                     cba=cba_settings_from_dict(data.get("cba")))


def load_config(path: str | Path) -> RunConfig:
    """Parse and validate a run file.

    Raises:
        ConfigError: unreadable file, YAML syntax error (with line and column)
            or an invalid field (named by its dotted path).
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f"{path}:{mark.line + 1}:{mark.column + 1}" if mark else str(path)
        raise ConfigError(where, f"YAML syntax error: {exc.problem}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"YAML error: {exc}") from None
    return run_config_from_dict(data)


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)
