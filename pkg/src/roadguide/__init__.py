"""Ring-road simulation of roadside-guided versus onboard-only automated vehicles,
plus the smart-highway cost-benefit model."""

__version__ = "0.1.0"
