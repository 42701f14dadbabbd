"""Decoy-state BB84 star-network simulator and key-rate toolkit."""

__version__ = "0.1.0"

from .model import IntensitySettings, LinkParams, channel_transmittance, preset
from .security import SecurityEstimate, Variant, analytic_estimate
from .session import run_session

__all__ = [
    "IntensitySettings",
    "LinkParams",
    "SecurityEstimate",
    "Variant",
    "analytic_estimate",
    "channel_transmittance",
    "preset",
    "run_session",
]
