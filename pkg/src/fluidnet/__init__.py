"""Rare-event simulation for linear stochastic fluid networks.

Importance sampling for plain and Markov-modulated shot-noise networks,
with exact moment computations for the modulated case.
"""
from .model import (
    JobLaw,
    ModulatedNetworkSpec,
    NetworkSpec,
    RareTarget,
    SpecError,
    StateSpec,
    validate,
)

__version__ = "0.1.0"

__all__ = [
    "JobLaw",
    "ModulatedNetworkSpec",
    "NetworkSpec",
    "RareTarget",
    "SpecError",
    "StateSpec",
    "validate",
    "__version__",
]
