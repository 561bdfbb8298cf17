"""Bound states, two-photon trapping and time-domain simulation for emitters in front of mirrors."""

__version__ = "0.1.0"

from .model import EmitterSpec, SystemSpec, feedback_system, validate  # noqa: E402

__all__ = ["EmitterSpec", "SystemSpec", "feedback_system", "validate", "__version__"]
