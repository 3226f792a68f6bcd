"""Quantization-aware machine unlearning on small fake-quantized MLPs."""

__version__ = "0.1.0"
