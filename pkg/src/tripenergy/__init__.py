"""Personalized vehicle energy estimation from GPS trip histories."""

from .config import Config, DataConfig, MetaConfig, ModelConfig, ServeConfig, load_config
from .core import DriverHistory, RoadNetwork, RoadSegment, TrajectoryPoint, Trip
from .model import EnergyModel

__version__ = "0.1.0"

__all__ = [
    "Config",
    "DataConfig",
    "DriverHistory",
    "EnergyModel",
    "MetaConfig",
    "ModelConfig",
    "RoadNetwork",
    "RoadSegment",
    "ServeConfig",
    "TrajectoryPoint",
    "Trip",
    "load_config",
    "__version__",
]
