"""Imbalanced node classification with synthetic nodes, scored edges,
and multi-filter message passing."""

from .errors import (
    GraphRebalError, ShapeError, ContractError, ConfigError,
    IngestionError, SplitError, SamplingError, TrainingDiverged,
)
from .autodiff import Tensor, Adam, backward, parameter, constant
from .graph import Graph, SbmSpec, ImbalanceSpec, from_edge_list, generate_sbm
from .config import HyperParams, ExperimentConfig, load_config
from .pipeline import run_pipeline, evaluate, MetricsReport, PipelineResult

__version__ = "0.1.0"

__all__ = [
    "GraphRebalError", "ShapeError", "ContractError", "ConfigError",
    "IngestionError", "SplitError", "SamplingError", "TrainingDiverged",
    "Tensor", "Adam", "backward", "parameter", "constant",
    "Graph", "SbmSpec", "ImbalanceSpec", "from_edge_list", "generate_sbm",
    "HyperParams", "ExperimentConfig", "load_config",
    "run_pipeline", "evaluate", "MetricsReport", "PipelineResult",
    "__version__",
]
