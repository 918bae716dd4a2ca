"""Multi-stream flow matching with a learnable wavelet-packet frequency stream."""

__version__ = "0.1.0"
