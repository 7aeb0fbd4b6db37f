"""Convolution-free Mamba segmentation network on a small numpy autodiff core."""
from .autograd import ShapeError, Tensor, backward, no_grad
from .blocks import (DEFAULT_LAYOUT, LIFMBlock, LIFMConfig, Layout, NCMambaBlock, NCMambaConfig,
                     reconcile_layout)
from .aggregators import CSIF, MCA, MSA, AggregatorConfig
from .network import DESK_CONFIG, FULL_CONFIG, TINY_CONFIG, CAMSNet, NetworkConfig
from .params import ParamStore
from .scan import selective_scan, selective_scan_chunked

__version__ = "0.1.0"

__all__ = [
    "AggregatorConfig", "CAMSNet", "CSIF", "DEFAULT_LAYOUT", "DESK_CONFIG", "FULL_CONFIG", "LIFMBlock",
    "LIFMConfig", "Layout", "MCA", "MSA", "NCMambaBlock", "NCMambaConfig", "NetworkConfig", "ParamStore",
    "ShapeError", "TINY_CONFIG", "Tensor", "backward", "no_grad", "reconcile_layout", "selective_scan",
    "selective_scan_chunked",
]
