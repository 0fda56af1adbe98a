from dataclasses import replace
from pathlib import Path

import pytest

from roadguide.scenario import DriverParams, ScenarioConfig, VehicleClass

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def short_params(cfg: ScenarioConfig) -> ScenarioConfig:
    """Same config with 4.5 m vehicles and a 1.5 m standstill gap for every class."""
    ps = {c: replace(p, vehicle_length_m=4.5, min_gap_m=1.5) for c, p in cfg.params_by_class.items()}
    return replace(cfg, params_by_class=ps)


def small_config(**kw) -> ScenarioConfig:
    base = dict(total_vehicles=40, steps=200, warmup_steps=40, seed=7)
    base.update(kw)
    return ScenarioConfig(**base)


@pytest.fixture
def canonical() -> DriverParams:
    return DriverParams()


@pytest.fixture
def quick_yaml() -> Path:
    return CONFIGS / "quick.yaml"


@pytest.fixture
def full_yaml() -> Path:
    return CONFIGS / "full.yaml"


CLASSES = tuple(VehicleClass)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
