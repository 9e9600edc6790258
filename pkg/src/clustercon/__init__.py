"""Consensus of identical LTI agents over clustered networks using
intermittent, asynchronous output feedback.

Subpackages build the clustered network and its spectral split, assemble the
closed-loop hybrid system, run event-exact simulations of the nominal and
noise-perturbed dynamics, evaluate exponential-stability certificates, and
reproduce the marine-craft rendezvous scenario.
"""

from .network import (
    ClusteredNetwork,
    build_clustered_network,
    random_clustered_network,
)
from .spectral import SpectralDecomposition, decompose, disagreement_coordinate
from .ensemble import EnsembleSystem, GainSet, Plant, build_ensemble

__all__ = [
    "ClusteredNetwork",
    "build_clustered_network",
    "random_clustered_network",
    "SpectralDecomposition",
    "decompose",
    "disagreement_coordinate",
    "EnsembleSystem",
    "GainSet",
    "Plant",
    "build_ensemble",
]

__version__ = "0.1.0"
