"""Hydra neighborhood attention, a toy style-based generator built on it, and attention-map tools."""

from .estimators import HydraNeighborhoodAttention, StyleNATGenerator
from .exceptions import (
    ConfigError,
    ContractError,
    DimensionError,
    HydraNATError,
    InvalidPlanError,
    InvalidSpecError,
)
from .generator import GeneratorConfig, build_config_2split, build_config_pyramid
from .hydra import PartitionPlan, count_macs, count_params, hydra_backward, hydra_forward, partition_heads
from .neighborhood import NeighborhoodSpec, build_index_map, dense_masked_attention, na2d_av, na2d_qk

__all__ = [
    "HydraNeighborhoodAttention",
    "StyleNATGenerator",
    "HydraNATError",
    "DimensionError",
    "InvalidSpecError",
    "InvalidPlanError",
    "ConfigError",
    "ContractError",
    "GeneratorConfig",
    "build_config_2split",
    "build_config_pyramid",
    "PartitionPlan",
    "partition_heads",
    "hydra_forward",
    "hydra_backward",
    "count_params",
    "count_macs",
    "NeighborhoodSpec",
    "build_index_map",
    "na2d_qk",
    "na2d_av",
    "dense_masked_attention",
]

__version__ = "0.1.0"
