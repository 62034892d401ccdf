"""Dataset, checkpoint, and config file formats.

All floats in JSON/CSV are printed with 17 significant digits so a
write -> read -> write cycle is byte-identical.

Dataset file: one JSON header line, then one record line per sample
(characters '0'/'1', length N, snake order).

Checkpoint file: one JSON header line (config, step, seed, digest, and a
parameter manifest with names/shapes/byte offsets), then the little-endian
float64 payloads concatenated in manifest order.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import ArtifactMismatchError, InvalidArgumentError
from .lattice import ExperimentalSettings, LatticeSpec
from .model import Model, ModelConfig, param_manifest
from .tensor import Tensor
from .training import Dataset, TrainConfig

DATASET_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1


def format_float(x: float) -> str:
    return format(float(x), ".17g")


def dumps(obj) -> str:
    """JSON with floats at 17 significant digits, insertion-ordered keys."""
    if isinstance(obj, dict):
        items = ", ".join(f"{json.dumps(str(k))}: {dumps(v)}" for k, v in obj.items())
        return "{" + items + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(dumps(v) for v in obj) + "]"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_float(obj)
    if obj is None:
        return "null"
    return json.dumps(obj)


# ---------------------------------------------------------------------------
# dataset files


def dataset_header(dataset: Dataset) -> dict:
    return {
        "format_version": DATASET_FORMAT_VERSION,
        "L": dataset.lattice.length,
        "omega": dataset.settings.omega,
        "delta_over_omega": dataset.settings.delta_over_omega,
        "rb_over_a": dataset.settings.rb_over_a,
        "beta_omega": dataset.settings.beta_omega,
        "num_samples": dataset.num_samples,
        "order": "snake",
        "generator": {"kind": dataset.generator_kind, "seed": dataset.generator_seed},
    }


def write_dataset(path: str, dataset: Dataset) -> None:
    digits = np.array(["0", "1"])
    with open(path, "w", encoding="ascii") as fh:
        fh.write(dumps(dataset_header(dataset)) + "\n")
        for row in dataset.records:
            fh.write("".join(digits[row]) + "\n")


def read_dataset(path: str) -> Dataset:
    with open(path, "r", encoding="ascii") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as err:
            raise InvalidArgumentError(
                f"{path}: bad dataset header at line {err.lineno}, column {err.colno}"
            ) from err
        lattice = LatticeSpec(int(header["L"]))
        settings = ExperimentalSettings(
            omega=header["omega"],
            delta_over_omega=header["delta_over_omega"],
            rb_over_a=header["rb_over_a"],
            beta_omega=header["beta_omega"],
        )
        count = int(header["num_samples"])
        num = lattice.num_sites
        records = np.empty((count, num), dtype=np.uint8)
        for i in range(count):
            line = fh.readline().strip()
            if len(line) != num or set(line) - {"0", "1"}:
                raise InvalidArgumentError(f"{path}: bad record at line {i + 2}")
            records[i] = np.frombuffer(line.encode("ascii"), dtype=np.uint8) - ord("0")
    gen = header.get("generator", {})
    return Dataset(
        lattice=lattice,
        settings=settings,
        records=records,
        generator_kind=gen.get("kind", "unknown"),
        generator_seed=int(gen.get("seed", 0)),
    )


# ---------------------------------------------------------------------------
# checkpoint files


def write_checkpoint(path: str, model: Model) -> None:
    manifest = []
    offset = 0
    for name, p in model.params.items():
        manifest.append({"name": name, "shape": list(p.values.shape), "offset": offset})
        offset += p.values.size * 8
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.config.to_dict(),
        "step": model.step,
        "seed": model.seed,
        "dataset_digest": model.dataset_digest,
        "parameter_count": model.parameter_count(),
        "manifest": manifest,
    }
    with open(path, "wb") as fh:
        fh.write(dumps(header).encode("ascii") + b"\n")
        for p in model.params.values():
            fh.write(np.ascontiguousarray(p.values, dtype="<f8").tobytes())


def read_checkpoint(path: str) -> Model:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise InvalidArgumentError(f"{path}: unreadable checkpoint header: {err}") from err
    config = ModelConfig(**header["config"])
    expected = param_manifest(config)
    params: dict[str, Tensor] = {}
    mismatched = []
    for entry in header["manifest"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        if name not in expected or expected[name] != shape:
            mismatched.append(name)
            continue
        size = int(np.prod(shape)) if shape else 1
        raw = np.frombuffer(payload, dtype="<f8", count=size, offset=offset)
        params[name] = Tensor(raw.reshape(shape).copy(), requires_grad=True)
    missing = [n for n in expected if n not in params]
    if mismatched or missing:
        raise ArtifactMismatchError(
            f"{path}: checkpoint does not match architecture; "
            f"unexpected/misshaped: {sorted(mismatched)}, missing: {sorted(missing)}"
        )
    return Model(
        config=config,
        params=params,
        step=int(header["step"]),
        seed=int(header["seed"]),
        dataset_digest=header.get("dataset_digest", ""),
    )


# ---------------------------------------------------------------------------
# train config, metrics CSV


def read_train_config(path: str) -> TrainConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as err:
        raise InvalidArgumentError(
            f"{path}: malformed JSON at line {err.lineno}, column {err.colno}"
        ) from err
    known = set(TrainConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise InvalidArgumentError(f"{path}: unknown config fields {sorted(unknown)}")
    try:
        return TrainConfig(**raw)
    except TypeError as err:
        raise InvalidArgumentError(f"{path}: {err}") from err


METRICS_COLUMNS = ("epoch", "step", "loss_per_token", "lr", "seconds")


def format_metrics_row(row: dict) -> str:
    cells = []
    for col in METRICS_COLUMNS:
        value = row[col]
        cells.append(str(value) if isinstance(value, int) else format_float(value))
    return ",".join(cells)


class MetricsWriter:
    """Append-only CSV log, one row per epoch."""

    def __init__(self, path: str, append: bool = False):
        self.path = path
        if not append:
            with open(path, "w", encoding="ascii") as fh:
                fh.write(",".join(METRICS_COLUMNS) + "\n")

    def __call__(self, row: dict) -> None:
        with open(self.path, "a", encoding="ascii") as fh:
            fh.write(format_metrics_row(row) + "\n")
