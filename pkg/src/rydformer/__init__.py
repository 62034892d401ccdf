"""Learns Rydberg-array measurement distributions with a Hamiltonian-
conditioned encoder-decoder transformer, verified against an
exact-diagonalization oracle."""

from .lattice import (
    ExperimentalSettings,
    InteractionGraph,
    LatticeSpec,
    build_graph,
    interaction_matrix,
    snake_order,
)
from .model import Model, ModelConfig, init_params
from .training import Dataset, TrainConfig, train

__all__ = [
    "Dataset",
    "ExperimentalSettings",
    "InteractionGraph",
    "LatticeSpec",
    "Model",
    "ModelConfig",
    "TrainConfig",
    "build_graph",
    "init_params",
    "interaction_matrix",
    "snake_order",
    "train",
]
