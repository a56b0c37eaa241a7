"""Kernelized and deep-kernel EM reconstruction for dynamic PET (2-D, desk scale)."""

__version__ = "0.1.0"
