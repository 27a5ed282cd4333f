"""Cross-enhanced two-stream 3D ConvNets on a synthetic video benchmark."""

from .data import DatasetParams, generate_dataset, make_regime
from .distill import BridgeConfig, DistillDirection, LossWeights
from .flow import FlowField, TvL1Params, compute_flow
from .network import StreamSpec, TapPoint, build_stream, forward
from .optim import OptimizerConfig, Parameter, SgdOptimizer
from .tensor import Tensor

__all__ = [
    "BridgeConfig",
    "DatasetParams",
    "DistillDirection",
    "FlowField",
    "LossWeights",
    "OptimizerConfig",
    "Parameter",
    "SgdOptimizer",
    "StreamSpec",
    "TapPoint",
    "Tensor",
    "TvL1Params",
    "build_stream",
    "compute_flow",
    "forward",
    "generate_dataset",
    "make_regime",
]

__version__ = "0.1.0"
