"""Data-driven training: NLL loss, AdamW, cosine warm restarts, epoch loop.

Loss is normalized per token (per site), which keeps values comparable
across lattice sizes. Batches are homogeneous: every batch comes from one
dataset, i.e. one (lattice, settings) pair, so the encoder context is
computed once per batch and shared.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import InvalidArgumentError, NumericalFailureError
from .lattice import ExperimentalSettings, InteractionGraph, LatticeSpec, build_graph
from .model import DropoutState, Model


@dataclass
class TrainConfig:
    epochs: int
    seed: int
    datasets: list[str] = field(default_factory=list)
    batch_size: int = 256
    learning_rate: float = 0.001
    eta_min: float = 1e-5
    t0: float = 1.0
    t_mult: float = 2.0
    dropout: float = 0.1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    # Shard-cycling depth from the reference hyperparameter table; desk-scale
    # runs load everything into memory, so this knob is carried but unused.
    dataset_buffer: int = 50
    out_dir: str | None = None
    resume: str | None = None

    def __post_init__(self):
        if not 0 < self.eta_min < self.learning_rate:
            raise InvalidArgumentError(
                f"need 0 < eta_min < learning_rate, got {self.eta_min} vs {self.learning_rate}"
            )
        if self.t0 < 1 or self.t_mult < 1:
            raise InvalidArgumentError(f"need t0 >= 1 and t_mult >= 1, got {self.t0}, {self.t_mult}")


@dataclass
class Dataset:
    """Measurement records plus the settings that generated them."""

    lattice: LatticeSpec
    settings: ExperimentalSettings
    records: np.ndarray                  # (num_samples, N) uint8
    generator_kind: str = "unknown"
    generator_seed: int = 0

    def __post_init__(self):
        self.records = np.asarray(self.records, dtype=np.uint8)
        if self.records.ndim != 2 or self.records.shape[1] != self.lattice.num_sites:
            raise InvalidArgumentError(
                f"records shape {self.records.shape} does not match N={self.lattice.num_sites}"
            )

    @property
    def num_samples(self) -> int:
        return self.records.shape[0]


def nll_loss(model: Model, graph: InteractionGraph, bits: np.ndarray, drop=None) -> T.Tensor:
    """Mean negative log-likelihood per token over one homogeneous batch."""
    bits = np.atleast_2d(np.asarray(bits, dtype=np.int64))
    if bits.shape[0] == 0:
        raise InvalidArgumentError("empty batch")
    if bits.shape[1] != graph.num_sites:
        raise InvalidArgumentError(
            f"batch sequence length {bits.shape[1]} != lattice sites {graph.num_sites}"
        )
    context = model.context(graph, drop)
    log_probs = model.log_prob_traced(context, bits, drop)
    return T.scale(T.reduce_sum(log_probs), -1.0 / (bits.shape[0] * bits.shape[1]))


def lr_schedule(step_in_epochs: float, config: TrainConfig) -> float:
    """Cosine annealing with warm restarts; period k has length t0 * t_mult^k."""
    t = float(step_in_epochs)
    if t < 0:
        raise InvalidArgumentError(f"schedule time must be >= 0, got {t}")
    t0, mult = config.t0, config.t_mult
    if mult == 1.0:
        cycle = math.floor(t / t0)
        start = cycle * t0
        length = t0
    else:
        cycle = math.floor(math.log(t / t0 * (mult - 1.0) + 1.0, mult))
        start = t0 * (mult**cycle - 1.0) / (mult - 1.0)
        length = t0 * mult**cycle
        # float rounding can land us one cycle off near a boundary
        while start > t:
            cycle -= 1
            length = t0 * mult**cycle
            start -= length
        while t >= start + length:
            start += length
            cycle += 1
            length = t0 * mult**cycle
    frac = (t - start) / length
    return config.eta_min + (config.learning_rate - config.eta_min) * 0.5 * (
        1.0 + math.cos(math.pi * frac)
    )


class AdamW:
    """Decoupled-weight-decay Adam over the model's named parameters."""

    EPS = 1e-8

    def __init__(self, params: dict[str, T.Tensor], config: TrainConfig):
        self.params = params
        self.config = config
        self.count = 0
        self.moment1 = {n: np.zeros_like(p.values) for n, p in params.items()}
        self.moment2 = {n: np.zeros_like(p.values) for n, p in params.items()}

    def step(self, lr: float) -> None:
        cfg = self.config
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericalFailureError(f"non-finite gradient in {name}; step aborted")
        self.count += 1
        bias1 = 1.0 - cfg.beta1**self.count
        bias2 = 1.0 - cfg.beta2**self.count
        for name, p in self.params.items():
            grad = p.grad if p.grad is not None else np.zeros_like(p.values)
            m = self.moment1[name]
            v = self.moment2[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * grad
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * grad * grad
            p.values -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.EPS)
            p.values -= lr * cfg.weight_decay * p.values
            p.grad = None


def adamw_step(optimizer: AdamW, lr: float) -> None:
    optimizer.step(lr)


def dataset_digest(datasets: list[Dataset]) -> str:
    import hashlib

    h = hashlib.sha256()
    for ds in datasets:
        h.update(
            f"{ds.lattice.length}|{ds.settings.as_row().tobytes().hex()}|"
            f"{ds.num_samples}|{ds.generator_kind}|{ds.generator_seed};".encode()
        )
    return h.hexdigest()[:16]


def train(
    datasets: list[Dataset],
    model: Model,
    config: TrainConfig,
    checkpoint_hook=None,
    metrics_hook=None,
) -> list[dict]:
    """Epoch loop; returns per-epoch metric rows.

    ``checkpoint_hook(model, epoch)`` is called after every epoch (the CLI
    uses it to write checkpoint files); ``metrics_hook(row)`` after every
    epoch row. A non-finite loss aborts the run, leaving the parameters of
    the last completed epoch untouched in the latest checkpoint.
    """
    if not datasets:
        raise InvalidArgumentError("no datasets")
    graphs = [build_graph(ds.lattice, ds.settings) for ds in datasets]
    optimizer = AdamW(model.params, config)
    rng = np.random.default_rng(config.seed)
    model.dataset_digest = dataset_digest(datasets)
    metrics: list[dict] = []
    batches_per_epoch = sum(
        (ds.num_samples + config.batch_size - 1) // config.batch_size for ds in datasets
    )
    for epoch in range(config.epochs):
        start_time = time.perf_counter()
        plan = []
        for i, ds in enumerate(datasets):
            order = rng.permutation(ds.num_samples)
            for lo in range(0, ds.num_samples, config.batch_size):
                plan.append((i, order[lo:lo + config.batch_size]))
        rng.shuffle(plan)
        token_loss_sum = 0.0
        sample_count = 0
        lr = config.learning_rate
        for batch_index, (ds_index, rows) in enumerate(plan):
            lr = lr_schedule(epoch + batch_index / batches_per_epoch, config)
            drop = DropoutState(config.dropout, config.seed, model.step)
            bits = datasets[ds_index].records[rows]
            loss = nll_loss(model, graphs[ds_index], bits, drop)
            value = float(loss.values)
            if not math.isfinite(value):
                raise NumericalFailureError(
                    f"non-finite loss at epoch {epoch}, step {model.step}; "
                    "last completed epoch checkpoint retained"
                )
            T.backward(loss)
            optimizer.step(lr)
            model.step += 1
            token_loss_sum += value * len(rows)
            sample_count += len(rows)
        row = {
            "epoch": epoch,
            "step": model.step,
            "loss_per_token": token_loss_sum / sample_count,
            "lr": lr,
            "seconds": time.perf_counter() - start_time,
        }
        metrics.append(row)
        if metrics_hook is not None:
            metrics_hook(row)
        if checkpoint_hook is not None:
            checkpoint_hook(model, epoch)
    return metrics


def eval_loss_per_token(model: Model, dataset: Dataset, batch_size: int = 1024) -> float:
    """Dropout-off NLL per token over a whole dataset."""
    graph = build_graph(dataset.lattice, dataset.settings)
    with T.no_grad():
        context = model.context(graph)
        total = 0.0
        for lo in range(0, dataset.num_samples, batch_size):
            bits = dataset.records[lo:lo + batch_size].astype(np.int64)
            total += float(model.log_prob_traced(context, bits).values.sum())
    return -total / (dataset.num_samples * dataset.lattice.num_sites)
