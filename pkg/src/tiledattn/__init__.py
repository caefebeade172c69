"""Tiled attention: blocked online-softmax kernels, tiling masks and cost-model simulators."""

from .flash import TileConfig, flash_attention
from .hardware import HardwareModel, builtin_profile, load_profile
from .reference import std_attention

__all__ = ["HardwareModel", "TileConfig", "builtin_profile", "flash_attention", "load_profile", "std_attention"]
__version__ = "0.1.0"
