"""Streaming CTC transducer with one-step transformer-decoder rescoring of the N-best."""

__version__ = "0.1.0"
