"""Federated multi-agent implicit mapping.

Agents fit small Fourier-feature MLPs to local traversability grids, ship only
the network parameters to a server, and the aggregated model is rendered,
refined and scored for map quality and A* planning.
"""

from fedmap.encoding import EncoderConfig, FourierEncoder
from fedmap.network import (
    AdamState,
    ModelParams,
    NetworkConfig,
    adam_step,
    backward,
    count_params,
    fit,
    forward,
    init_params,
    mse_loss,
    render,
)
from fedmap.mapping import GridMap, Region, RefineConfig

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "EncoderConfig",
    "FourierEncoder",
    "GridMap",
    "ModelParams",
    "NetworkConfig",
    "RefineConfig",
    "Region",
    "adam_step",
    "backward",
    "count_params",
    "fit",
    "forward",
    "init_params",
    "mse_loss",
    "render",
]
