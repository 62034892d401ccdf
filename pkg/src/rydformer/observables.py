"""Estimators of physical quantities from sampled configurations.

Off-diagonal estimators need wavefunction amplitude ratios; any object with
a ``log_psi(configs) -> (M,)`` method works as the amplitude provider, and
two are supplied: the trained model (log psi = log p / 2) and the exact
ground state. Ratios are always formed in log space.

Samples here are i.i.d. (autoregressive or Born draws), so error bars are
plain standard errors with no autocorrelation correction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import InvalidArgumentError, NumericalFailureError
from .exact import OracleState, bits_to_index, diagonal_energy_of_bits, validate_bits
from .lattice import ExperimentalSettings, InteractionGraph
from .model import Model


class AmplitudeProvider(Protocol):
    def log_psi(self, configs: np.ndarray) -> np.ndarray: ...


class OracleGroundProvider:
    """Amplitudes of an exact ground state, looked up by basis index."""

    def __init__(self, state: OracleState):
        if state.kind != "ground":
            raise InvalidArgumentError("oracle provider needs a ground state")
        self.num_sites = state.num_sites
        with np.errstate(divide="ignore"):
            self._log_amp = np.log(state.amplitudes)

    def log_psi(self, configs: np.ndarray) -> np.ndarray:
        return self._log_amp[bits_to_index(configs)]

    def psi(self, config) -> float:
        return float(np.exp(self.log_psi(np.atleast_2d(config))[0]))


class ModelProvider:
    """Positive-wavefunction reading of a trained model: log psi = log p / 2."""

    _CHUNK = 8192

    def __init__(self, model: Model, graph: InteractionGraph):
        self.model = model
        self.graph = graph
        self.num_sites = graph.num_sites

    def log_psi(self, configs: np.ndarray) -> np.ndarray:
        configs = np.atleast_2d(configs)
        out = np.empty(configs.shape[0])
        for start in range(0, configs.shape[0], self._CHUNK):
            stop = min(start + self._CHUNK, configs.shape[0])
            out[start:stop] = self.model.log_prob(self.graph, configs[start:stop])
        return 0.5 * out

    def psi(self, config) -> float:
        return float(np.exp(self.log_psi(config)[0]))


@dataclass(frozen=True)
class ObservableEstimate:
    mean: float
    std_error: float
    sample_count: int


def _estimate(values: np.ndarray) -> ObservableEstimate:
    count = values.shape[0]
    spread = float(values.std(ddof=1)) if count > 1 else 0.0
    return ObservableEstimate(float(values.mean()), spread / np.sqrt(count), count)


def staggered_values(samples: np.ndarray) -> np.ndarray:
    """Per-sample |sum_i (-1)^i (n_i - 1/2)| / N with i in snake order."""
    arr = np.asarray(samples, dtype=np.float64)
    num = arr.shape[-1]
    signs = np.where(np.arange(num) % 2 == 0, 1.0, -1.0)
    return np.abs((arr - 0.5) @ signs) / num


def staggered_magnetization(samples) -> ObservableEstimate:
    samples = np.atleast_2d(np.asarray(samples))
    if samples.size == 0:
        raise InvalidArgumentError("staggered_magnetization needs at least one sample")
    validate_bits(samples, samples.shape[-1])
    return _estimate(staggered_values(samples))


def ssf_set(config) -> np.ndarray:
    """The N single-spin-flip partners of ``config``, row i flips site i."""
    bits = np.asarray(config, dtype=np.uint8)
    flips = np.tile(bits, (bits.shape[0], 1))
    idx = np.arange(bits.shape[0])
    flips[idx, idx] ^= 1
    return flips


def _flip_stack(samples: np.ndarray) -> np.ndarray:
    """(S, N) -> (S, N, N): row [s, i] is sample s with site i flipped."""
    count, num = samples.shape
    stack = np.repeat(samples[:, None, :], num, axis=1)
    idx = np.arange(num)
    stack[:, idx, idx] ^= 1
    return stack


def _ssf_ratio_sums(samples: np.ndarray, provider: AmplitudeProvider) -> np.ndarray:
    """sum over single-flip partners of psi(sigma')/psi(sigma), per sample."""
    count, num = samples.shape
    log_base = provider.log_psi(samples)
    if np.any(np.isneginf(log_base)):
        raise NumericalFailureError("zero amplitude on a sampled configuration")
    log_flip = provider.log_psi(_flip_stack(samples).reshape(count * num, num))
    ratios = np.exp(log_flip.reshape(count, num) - log_base[:, None])
    return ratios.sum(axis=1)


def sigma_x(samples, provider: AmplitudeProvider) -> ObservableEstimate:
    """Site-averaged x-magnetization from single-spin-flip amplitude ratios."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.uint8))
    return _estimate(_ssf_ratio_sums(samples, provider) / samples.shape[1])


def local_energy_values(samples, provider: AmplitudeProvider,
                        graph: InteractionGraph,
                        settings: ExperimentalSettings) -> np.ndarray:
    """Per-sample diagonal energy minus (omega/2) * sum of flip ratios."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.uint8))
    diag = diagonal_energy_of_bits(samples, graph, settings)
    return diag - 0.5 * settings.omega * _ssf_ratio_sums(samples, provider)


def local_energy(config, provider: AmplitudeProvider, graph: InteractionGraph,
                 settings: ExperimentalSettings) -> float:
    return float(local_energy_values(config, provider, graph, settings)[0])


def energy(samples, provider: AmplitudeProvider, graph: InteractionGraph,
           settings: ExperimentalSettings) -> ObservableEstimate:
    return _estimate(local_energy_values(samples, provider, graph, settings))
