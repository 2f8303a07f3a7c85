"""Quantized-uplink federated learning: quantizer, numpy CNN, codec and driver."""

from .codec import ClientUpdate, Strategy, bit_budget, decode, encode
from .federation import FederationConfig, aggregate, run_federation
from .nn import Architecture, SgdConfig, build_model
from .quant import Mode, QuantSpec, ThresholdMode, dequantize, octav_threshold, quantize

__version__ = "0.1.0"
