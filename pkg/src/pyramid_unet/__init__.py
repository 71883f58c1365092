"""Pyramid U-Net for retinal vessel segmentation."""
from .blocks import PSAB, ChannelAttention, ScaledInputTriple
from .network import NetworkConfig, PyramidOutputs, PyramidUNet, build_network, scale_input_pyramid
from .losses import LossWeights, total_loss

__version__ = "0.1.0"
