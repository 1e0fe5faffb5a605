"""Mixture-of-manifolds inverse modelling on small analytic benchmarks."""
from .nn import Network, NetworkSpec
from .simulators import ARM, SHELL, SINE, get_problem
from .training import TrainSettings
from .inverse import (ForwardModel, MixtureManifoldModel, NASettings, ProposalSet, mmn_infer,
                      na_infer, train_forward, train_mmn)

__all__ = [
    "ARM", "SHELL", "SINE", "ForwardModel", "MixtureManifoldModel", "NASettings", "Network",
    "NetworkSpec", "ProposalSet", "TrainSettings", "get_problem", "mmn_infer", "na_infer",
    "train_forward", "train_mmn",
]
__version__ = "0.1.0"
