"""Square-lattice geometry, snake-path ordering, and the interaction graph.

Distances are measured in units of the lattice constant, so nearest
neighbors are at distance 1 and the pairwise interaction weight of a
nearest-neighbor bond is exactly 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError


def snake_order(length: int) -> list[tuple[int, int]]:
    """Site coordinates of an ``length x length`` grid along the snake path.

    Row y=0 is traversed left-to-right, row y=1 right-to-left, and so on.
    Consecutive sites are always nearest neighbors, and the parity of the
    snake index equals the checkerboard parity (-1)^(x+y) at every site.
    """
    if length < 1:
        raise InvalidArgumentError(f"lattice size must be >= 1, got {length}")
    coords = []
    for y in range(length):
        xs = range(length) if y % 2 == 0 else range(length - 1, -1, -1)
        coords.extend((x, y) for x in xs)
    return coords


@dataclass(frozen=True)
class LatticeSpec:
    """Open-boundary square lattice of linear size ``length``."""

    length: int
    positions: list[tuple[int, int]] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "positions", snake_order(self.length))

    @property
    def num_sites(self) -> int:
        return self.length * self.length


@dataclass(frozen=True)
class ExperimentalSettings:
    """Hamiltonian knobs: (omega, delta/omega, R_b/a, beta*omega)."""

    delta_over_omega: float
    rb_over_a: float
    beta_omega: float
    omega: float = 1.0

    def __post_init__(self):
        if self.omega <= 0:
            raise InvalidArgumentError(f"omega must be positive, got {self.omega}")
        if self.rb_over_a <= 0:
            raise InvalidArgumentError(f"rb_over_a must be positive, got {self.rb_over_a}")
        if self.beta_omega <= 0:
            raise InvalidArgumentError(f"beta_omega must be positive, got {self.beta_omega}")

    def as_row(self) -> np.ndarray:
        return np.array(
            [self.omega, self.delta_over_omega, self.rb_over_a, self.beta_omega],
            dtype=np.float64,
        )


def interaction_matrix(spec: LatticeSpec) -> np.ndarray:
    """Symmetric pairwise weight matrix with entries 1/dist^6, zero diagonal.

    Sites are indexed in snake order; distances in units of the lattice
    constant, so the maximum off-diagonal entry is 1 (nearest neighbors).
    """
    pos = np.asarray(spec.positions, dtype=np.float64)
    diff = pos[:, None, :] - pos[None, :, :]
    dist2 = np.sum(diff * diff, axis=-1)
    if np.any(dist2[~np.eye(len(pos), dtype=bool)] == 0.0):
        raise InvalidArgumentError("duplicate lattice positions")
    with np.errstate(divide="ignore"):
        weights = 1.0 / dist2**3
    np.fill_diagonal(weights, 0.0)
    return weights


@dataclass(frozen=True)
class InteractionGraph:
    """Encoder input: per-site setting rows plus the pairwise weight matrix."""

    node_features: np.ndarray  # (N, 4), rows in snake order
    edge_weights: np.ndarray   # (N, N) symmetric, zero diagonal

    @property
    def num_sites(self) -> int:
        return self.node_features.shape[0]


def build_graph(spec: LatticeSpec, settings: ExperimentalSettings) -> InteractionGraph:
    """Graph representation of the experimental settings on ``spec``."""
    row = settings.as_row()
    features = np.tile(row, (spec.num_sites, 1))
    return InteractionGraph(node_features=features, edge_weights=interaction_matrix(spec))
