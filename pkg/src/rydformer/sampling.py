"""Autoregressive generation of measurement configurations.

Both samplers route every token through the same DecodeStepKernel so the
arithmetic per conditional is identical call for call:

* ``sample`` is the naive path: for each site it replays the whole prefix
  from scratch, costing O(N^3) attention-score evaluations per sample.
* ``sample_cached`` stores the per-layer key/value arrays and feeds each
  token once, costing O(N^2).

Shared seeds therefore give bit-identical outputs. Draws come from
counter-based per-sample Philox streams keyed by (seed, sample index), so
results do not depend on chunking or generation order. Site k is drawn as
``uniform[k] < p(sigma_k = 1 | prefix)``.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import InvalidArgumentError
from .lattice import InteractionGraph
from .model import BOS_TOKEN, DecodeStepKernel, Model

CHUNK = 16384


def new_counter() -> dict[str, int]:
    """Attention-score evaluation counters for complexity instrumentation."""
    return {"self_scores": 0, "cross_scores": 0}


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix64(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer, vectorized over uint64 arrays
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _per_sample_uniforms(seed: int, start_index: int, count: int, num_sites: int) -> np.ndarray:
    """Counter-based uniforms: value (sample_index, site) depends only on seed.

    Sampling order and chunking therefore never change the draws; parallel
    generation across samples stays reproducible.
    """
    with np.errstate(over="ignore"):
        samples = np.uint64(start_index) + np.arange(count, dtype=np.uint64)
        sites = np.arange(num_sites, dtype=np.uint64)
        base = _mix64(np.uint64(seed % (1 << 64)) ^ _GOLDEN)
        counters = samples[:, None] * _GOLDEN + sites[None, :] + np.uint64(1)
        z = _mix64(base ^ _mix64(counters))
    return (z >> np.uint64(11)).astype(np.float64) * (2.0**-53)


def _context_values(model: Model, graph: InteractionGraph) -> np.ndarray:
    with T.no_grad():
        return model.context(graph).values


def sample(model: Model, graph: InteractionGraph, count: int, seed: int,
           counter: dict | None = None) -> np.ndarray:
    """Naive autoregressive sampling; (count, N) bit array."""
    return _generate(model, graph, count, seed, cached=False, counter=counter)


def sample_cached(model: Model, graph: InteractionGraph, count: int, seed: int,
                  counter: dict | None = None) -> np.ndarray:
    """Key/value-cached sampling; bit-identical to ``sample`` per seed."""
    return _generate(model, graph, count, seed, cached=True, counter=counter)


def _generate(model, graph, count, seed, cached, counter):
    if count < 1:
        raise InvalidArgumentError(f"count must be >= 1, got {count}")
    num_sites = graph.num_sites
    context = _context_values(model, graph)
    out = np.empty((count, num_sites), dtype=np.uint8)
    for start in range(0, count, CHUNK):
        batch = min(CHUNK, count - start)
        uniforms = _per_sample_uniforms(seed, start, batch, num_sites)
        kernel = DecodeStepKernel(model, context, batch, counter=counter)
        bits = np.empty((batch, num_sites), dtype=np.int64)
        if cached:
            tokens = np.full(batch, BOS_TOKEN, dtype=np.int64)
            for site in range(num_sites):
                probs = kernel.step(tokens)
                bits[:, site] = uniforms[:, site] < probs[:, 1]
                tokens = bits[:, site]
        else:
            for site in range(num_sites):
                kernel.reset()
                probs = kernel.step(np.full(batch, BOS_TOKEN, dtype=np.int64))
                for j in range(site):
                    probs = kernel.step(bits[:, j])
                bits[:, site] = uniforms[:, site] < probs[:, 1]
        out[start:start + batch] = bits
    return out
