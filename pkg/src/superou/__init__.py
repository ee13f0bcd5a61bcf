"""Simulation and numerical verification of stable central limit theorems for
supercritical super Ornstein-Uhlenbeck processes with stable branching."""

__version__ = "0.1.0"

from .branching import BranchingMechanism  # noqa: E402
from .ou_spectral import OUParams, SpectralFunction  # noqa: E402
from .kernels import BACKEND  # noqa: E402

__all__ = ["BACKEND", "BranchingMechanism", "OUParams", "SpectralFunction", "__version__"]
