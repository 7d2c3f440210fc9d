"""Diagonal state-space (S4D) models with streaming inference, fixed-point
quantization and a neurocore execution simulator."""

__version__ = "0.1.0"
