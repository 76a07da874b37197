"""Modular real-time semantic segmentation benchmark: encoders x decoders, cost model, harness."""

__version__ = "0.1.0"
