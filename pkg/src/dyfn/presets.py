"""Named simulation fixtures used by the CLI, the tests and the acceptance run."""

from __future__ import annotations

from .errors import ConfigError
from .simulator import DecoderConstants, DriftSpec, SceneSpec, SimulationSpec


def _spec(length: int, drift: DriftSpec, seed: int, kind: str = "plane-room", hw: int = 24, **scene) -> SimulationSpec:
    return SimulationSpec(SceneSpec(kind=kind, height=hw, width=hw, length=length, seed=seed, **scene), drift, DecoderConstants(), seed)


def preset(name: str, seed: int = 0) -> SimulationSpec:
    if name == "standard":
        # 160-frame training and evaluation fixture
        return _spec(
            160,
            DriftSpec(scale_volatility=0.05, shift_volatility=0.02, feature_noise=0.01),
            seed,
            velocity=(0.01, 0.0, 0.005),
            yaw_rate=0.005,
        )
    if name == "long":
        # slow camera, trending drift over 500 frames
        return _spec(
            500,
            DriftSpec(scale_volatility=0.01, shift_volatility=0.005, scale_trend=0.002, feature_noise=0.01),
            seed,
            velocity=(0.004, 0.0, 0.002),
            yaw_rate=0.002,
        )
    if name == "drift50":
        # noise-free features, so per-frame alignment is exact
        return _spec(50, DriftSpec(scale_volatility=0.05), seed)
    if name == "static":
        return _spec(8, DriftSpec(scale_volatility=0.0), seed, velocity=(0.0, 0.0, 0.0), yaw_rate=0.0)
    if name == "tiny":
        return _spec(3, DriftSpec(scale_volatility=0.05, shift_volatility=0.02, feature_noise=0.05, channels=4), seed, hw=8)
    raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")


PRESETS = ("standard", "long", "drift50", "static", "tiny")
