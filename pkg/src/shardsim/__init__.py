"""Sharding-strategy planner and collective-communication simulator for data-parallel training."""

from .core import (
    ClusterSpec,
    ConfigError,
    ModelSpec,
    NetworkSpec,
    Regime,
    ShardLevel,
    Strategy,
    Volume,
    VolumeReport,
    parse_strategy,
    validate_cluster,
)

__all__ = [
    "ClusterSpec",
    "ConfigError",
    "ModelSpec",
    "NetworkSpec",
    "Regime",
    "ShardLevel",
    "Strategy",
    "Volume",
    "VolumeReport",
    "parse_strategy",
    "validate_cluster",
]
__version__ = "0.1.0"
