"""Exact-diagonalization oracle for the Rydberg Hamiltonian.

Configurations are length-N bit arrays in snake order; the basis index of a
configuration has snake-site 0 as the least significant bit. This convention
is load-bearing for checkpoint and test reproducibility and must not change.

The Hamiltonian is diagonal + a uniform single-flip coupling of -omega/2,
which keeps the matrix-vector product matrix-free: the diagonal is stored as
a dense 2^N vector and each site's flip term is applied with a reshape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, NumericalFailureError, ResourceLimitError
from .lattice import ExperimentalSettings, InteractionGraph

MAX_SITES_HAMILTONIAN = 24
MAX_SITES_GROUND = 20
MAX_SITES_THERMAL = 12

# Lanczos controls: Krylov cap per spec; basis storage bounded to ~0.5 GB.
LANCZOS_MAX_DIM = 200
LANCZOS_EIG_TOL = 1e-10
_BASIS_BUDGET_ELEMS = 2**26


def index_to_bits(indices, num_sites: int) -> np.ndarray:
    """Basis indices -> (..., N) bit arrays, snake-site 0 = LSB."""
    idx = np.asarray(indices, dtype=np.int64)
    return ((idx[..., None] >> np.arange(num_sites)) & 1).astype(np.uint8)


def bits_to_index(bits) -> np.ndarray:
    """(..., N) bit arrays -> basis indices, snake-site 0 = LSB."""
    b = np.asarray(bits, dtype=np.int64)
    return b @ (1 << np.arange(b.shape[-1], dtype=np.int64))


def validate_bits(bits, num_sites: int) -> np.ndarray:
    arr = np.asarray(bits, dtype=np.uint8)
    if arr.shape[-1] != num_sites:
        raise InvalidArgumentError(
            f"configuration length {arr.shape[-1]} does not match lattice size {num_sites}"
        )
    if not np.all((arr == 0) | (arr == 1)):
        raise InvalidArgumentError("configuration bits must be 0 or 1")
    return arr


@dataclass
class SparseHamiltonian:
    """Diagonal vector plus uniform -omega/2 single-flip coupling."""

    num_sites: int
    diagonal: np.ndarray       # (2^N,)
    coupling: float            # -omega/2, applied between single-flip pairs

    @property
    def dimension(self) -> int:
        return self.diagonal.shape[0]

    def matvec(self, vec: np.ndarray) -> np.ndarray:
        out = self.diagonal * vec
        for site in range(self.num_sites):
            lo = 1 << site
            hi = self.dimension >> (site + 1)
            flipped = vec.reshape(hi, 2, lo)[:, ::-1, :].reshape(self.dimension)
            out += self.coupling * flipped
        return out

    def dense(self) -> np.ndarray:
        if self.num_sites > MAX_SITES_THERMAL:
            raise ResourceLimitError(
                f"dense matrix limited to N <= {MAX_SITES_THERMAL}, got N = {self.num_sites}"
            )
        mat = np.diag(self.diagonal)
        idx = np.arange(self.dimension)
        for site in range(self.num_sites):
            mat[idx, idx ^ (1 << site)] = self.coupling
        return mat


@dataclass
class OracleState:
    """Ground-state amplitudes or a thermal occupation-basis distribution."""

    kind: str                             # "ground" | "thermal"
    num_sites: int
    amplitudes: np.ndarray | None = None  # (2^N,), nonnegative, unit L2 norm
    probabilities: np.ndarray | None = None  # (2^N,), sums to 1
    energy: float | None = None           # ground only
    # Thermal spectrum cache so exact_observables avoids a second eigh.
    _eigenvalues: np.ndarray | None = field(default=None, repr=False)
    _eigenvectors: np.ndarray | None = field(default=None, repr=False)
    _beta_omega: float | None = field(default=None, repr=False)

    def distribution(self) -> np.ndarray:
        if self.kind == "ground":
            return self.amplitudes**2
        return self.probabilities


def diagonal_energy_of_bits(bits, graph: InteractionGraph,
                            settings: ExperimentalSettings) -> np.ndarray:
    """Interaction-minus-detuning energy of (..., N) configurations."""
    arr = np.asarray(bits, dtype=np.float64)
    weighted = (settings.omega * settings.rb_over_a**6) * graph.edge_weights
    detuning = settings.delta_over_omega * settings.omega
    # V has zero diagonal, so the full quadratic form double-counts i<j.
    quad = 0.5 * np.einsum("...i,ij,...j->...", arr, weighted, arr)
    return quad - detuning * arr.sum(axis=-1)


def diagonal_energies(graph: InteractionGraph, settings: ExperimentalSettings) -> np.ndarray:
    """Occupation-basis diagonal of the Hamiltonian, all 2^N entries."""
    num = graph.num_sites
    dim = 1 << num
    diag = np.empty(dim, dtype=np.float64)
    chunk = min(dim, 1 << 14)
    for start in range(0, dim, chunk):
        stop = min(start + chunk, dim)
        bits = index_to_bits(np.arange(start, stop), num)
        diag[start:stop] = diagonal_energy_of_bits(bits, graph, settings)
    return diag


def build_hamiltonian(graph: InteractionGraph, settings: ExperimentalSettings) -> SparseHamiltonian:
    num = graph.num_sites
    if num > MAX_SITES_HAMILTONIAN:
        raise ResourceLimitError(
            f"Hamiltonian limited to N <= {MAX_SITES_HAMILTONIAN}, got N = {num}"
        )
    return SparseHamiltonian(
        num_sites=num,
        diagonal=diagonal_energies(graph, settings),
        coupling=-0.5 * settings.omega,
    )


def _tridiag_eigh(alphas, betas):
    size = len(alphas)
    mat = np.diag(np.asarray(alphas))
    if size > 1:
        off = np.asarray(betas[: size - 1])
        mat += np.diag(off, 1) + np.diag(off, -1)
    return np.linalg.eigh(mat)


def _lanczos_pass(matvec, start, max_dim, tol, residual_target):
    """One restarted-Lanczos pass with full reorthogonalization.

    Returns (ritz_value, ritz_vector, ritz_gap_estimate). Runs until the
    cheap Ritz residual bound |beta * u_last| meets ``residual_target`` and
    the lowest Ritz value has settled within ``tol``, or the cap is hit.
    """
    vec = start / np.linalg.norm(start)
    basis = [vec]
    alphas: list[float] = []
    betas: list[float] = []
    prev_low = np.inf
    work = matvec(vec)
    while True:
        alphas.append(float(vec @ work))
        work = work - alphas[-1] * vec
        if len(alphas) > 1:
            work = work - betas[-1] * basis[-2]
        # Two-sweep full reorthogonalization keeps the basis numerically honest.
        bmat = np.stack(basis, axis=1)
        for _ in range(2):
            work -= bmat @ (bmat.T @ work)
        evals, evecs = _tridiag_eigh(alphas, betas)
        low = evals[0]
        gap = float(evals[1] - evals[0]) if len(evals) > 1 else np.inf
        beta = float(np.linalg.norm(work))
        residual_bound = beta * abs(float(evecs[-1, 0]))
        done = (
            len(alphas) >= max_dim
            or beta < 1e-14
            or (
                residual_bound < residual_target
                and abs(prev_low - low) < tol * max(1.0, abs(low))
            )
        )
        if done:
            ritz = bmat @ evecs[:, 0]
            return float(low), ritz / np.linalg.norm(ritz), gap
        prev_low = low
        betas.append(beta)
        vec = work / beta
        basis.append(vec)
        work = matvec(vec)


def ground_state(ham: SparseHamiltonian, max_restarts: int = 12) -> OracleState:
    """Lowest eigenpair via restarted Lanczos; amplitudes sign-fixed >= 0.

    The sign fix is valid because the Hamiltonian is stoquastic for
    omega > 0 (Perron-Frobenius), which also guarantees the all-positive
    start vector overlaps the ground state.
    """
    if ham.num_sites > MAX_SITES_GROUND:
        raise ResourceLimitError(
            f"ground_state limited to N <= {MAX_SITES_GROUND}, got N = {ham.num_sites}"
        )
    dim = ham.dimension
    max_dim = min(LANCZOS_MAX_DIM, dim, max(20, _BASIS_BUDGET_ELEMS // dim))
    scale = max(1.0, float(np.max(np.abs(ham.diagonal))) + abs(ham.coupling) * ham.num_sites)
    residual_tol = 1e-11 * scale

    vec = np.full(dim, 1.0 / np.sqrt(dim))
    energy = np.inf
    gap = np.inf
    residual = np.inf
    for restart in range(max_restarts):
        energy, vec, pass_gap = _lanczos_pass(
            ham.matvec, vec, max_dim, LANCZOS_EIG_TOL, residual_tol
        )
        if restart == 0:
            gap = pass_gap
        residual = float(np.linalg.norm(ham.matvec(vec) - energy * vec))
        if residual <= residual_tol:
            break
    else:
        raise NumericalFailureError(
            f"Lanczos did not converge: residual {residual:.3e} > {residual_tol:.3e} "
            f"after {max_restarts} restarts"
        )
    if gap < 1e-10:
        raise NumericalFailureError(
            f"ground state looks degenerate (Ritz gap {gap:.3e}); refusing to pick a vector"
        )
    # Global sign then clip the tiny negative round-off left by Lanczos.
    if vec.sum() < 0:
        vec = -vec
    vec = np.maximum(vec, 0.0)
    vec /= np.linalg.norm(vec)
    return OracleState(kind="ground", num_sites=ham.num_sites, amplitudes=vec, energy=energy)


def thermal_diagonal(ham: SparseHamiltonian, beta_omega: float) -> OracleState:
    """Occupation-basis Gibbs distribution p(sigma) from the full spectrum."""
    if ham.num_sites > MAX_SITES_THERMAL:
        raise ResourceLimitError(
            f"thermal_diagonal limited to N <= {MAX_SITES_THERMAL}, got N = {ham.num_sites}"
        )
    if beta_omega < 0:
        raise InvalidArgumentError(f"beta_omega must be >= 0, got {beta_omega}")
    evals, evecs = np.linalg.eigh(ham.dense())
    log_weights = -beta_omega * (evals - evals[0])
    weights = np.exp(log_weights)
    weights /= weights.sum()
    probs = (evecs**2) @ weights
    probs = np.maximum(probs, 0.0)
    probs /= probs.sum()
    return OracleState(
        kind="thermal",
        num_sites=ham.num_sites,
        probabilities=probs,
        _eigenvalues=evals,
        _eigenvectors=evecs,
        _beta_omega=beta_omega,
    )


def sample_born(state: OracleState, count: int, seed: int) -> np.ndarray:
    """i.i.d. draws from the state's occupation distribution, (count, N) bits."""
    if count < 1:
        raise InvalidArgumentError(f"count must be >= 1, got {count}")
    probs = state.distribution()
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    uniforms = np.random.default_rng(seed).random(count)
    indices = np.searchsorted(cdf, uniforms, side="right")
    return index_to_bits(indices, state.num_sites)


def staggered_all_configs(num_sites: int) -> np.ndarray:
    """m_stag(sigma) for every basis index: |sum_i (-1)^i (n_i - 1/2)| / N."""
    dim = 1 << num_sites
    signs = np.where(np.arange(num_sites) % 2 == 0, 1.0, -1.0)
    acc = np.full(dim, -0.5 * signs.sum())
    for site in range(num_sites):
        bit = (np.arange(dim) >> site) & 1
        acc += signs[site] * bit
    return np.abs(acc) / num_sites


def _flip_site(vec: np.ndarray, site: int) -> np.ndarray:
    dim = vec.shape[0]
    lo = 1 << site
    return vec.reshape(dim >> (site + 1), 2, lo)[:, ::-1, :].reshape(dim)


def exact_observables(state: OracleState, ham: SparseHamiltonian) -> tuple[float, float, float]:
    """(energy, site-averaged sigma-x, staggered magnetization), noise-free."""
    num = ham.num_sites
    probs = state.distribution()
    staggered = float(staggered_all_configs(num) @ probs)
    if state.kind == "ground":
        psi = state.amplitudes
        sigma_x = sum(float(psi @ _flip_site(psi, s)) for s in range(num)) / num
        return float(state.energy), sigma_x, staggered
    evals, evecs = state._eigenvalues, state._eigenvectors
    if evals is None:
        evals, evecs = np.linalg.eigh(ham.dense())
    log_weights = -state._beta_omega * (evals - evals[0])
    weights = np.exp(log_weights)
    weights /= weights.sum()
    energy = float(weights @ evals)
    sigma_x = 0.0
    for site in range(num):
        flipped = _flip_site_matrix(evecs, site)
        sigma_x += float(weights @ np.einsum("sk,sk->k", evecs, flipped))
    return energy, sigma_x / num, staggered


def _flip_site_matrix(mat: np.ndarray, site: int) -> np.ndarray:
    dim = mat.shape[0]
    lo = 1 << site
    return mat.reshape(dim >> (site + 1), 2, lo, -1)[:, ::-1].reshape(mat.shape)
