"""Deterministic discrete-event network simulator and scenario tooling."""

from .core import SimChannel, SimEndpoint, SimHost, SimNet

__all__ = ["SimNet", "SimHost", "SimEndpoint", "SimChannel"]
