"""Federated learning simulator with delta-based deanonymization attacks,
defenses, and a reproducible experiment harness."""

__version__ = "0.1.0"

from .config import EXPERIMENT_FAMILIES, ConfigError, ExperimentConfig, build_config
from .deltastore import DeltaManifest, ReprConfig, read_records, represent_delta, write_records
from .federated import DeltaRecord, DeviceState, RoundConfig, run_federated
from .metrics import ScoredPredictions, average_precision, increase_over_chance, mean_ap
from .mitigation import MitigationConfig, TradeoffPoint, tradeoff_curve
from .nn import ModelSpec, OptimizerConfig, ParamVector
from .world import DatasetBundle, Example, UserProfile, WorldConfig, gen_world

__all__ = [
    "EXPERIMENT_FAMILIES",
    "ConfigError",
    "ExperimentConfig",
    "build_config",
    "DeltaManifest",
    "ReprConfig",
    "read_records",
    "represent_delta",
    "write_records",
    "DeltaRecord",
    "DeviceState",
    "RoundConfig",
    "run_federated",
    "ScoredPredictions",
    "average_precision",
    "increase_over_chance",
    "mean_ap",
    "MitigationConfig",
    "TradeoffPoint",
    "tradeoff_curve",
    "ModelSpec",
    "OptimizerConfig",
    "ParamVector",
    "DatasetBundle",
    "Example",
    "UserProfile",
    "WorldConfig",
    "gen_world",
    "__version__",
]
