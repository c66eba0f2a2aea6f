"""Lagrange index scheduling of multi-packet updates over an unreliable uplink."""
from .model import ChannelSpec, ModelError, SourceSpec, SystemSpec, validate_system

__version__ = "0.1.0"

__all__ = ["ChannelSpec", "ModelError", "SourceSpec", "SystemSpec", "validate_system", "__version__"]
