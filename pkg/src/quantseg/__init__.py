"""Quantization-aware suggestive annotation for FCN segmentation."""

from .model import ModelSpec, Prediction, build_model, forward
from .quant import QuantSpec, QuantState, deployed_bits, deployed_bytes, memory_ratio
from .rng import Rng

__version__ = "0.1.0"
