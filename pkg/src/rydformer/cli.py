"""Command-line surface.

Exit codes: 0 success, 2 user/config error, 3 checkpoint/architecture
mismatch, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import secrets
import sys

import numpy as np

from . import fileio, observables, sampling
from .errors import (
    ArtifactMismatchError,
    InvalidArgumentError,
    NumericalFailureError,
    ResourceLimitError,
)
from .exact import (
    MAX_SITES_GROUND,
    MAX_SITES_THERMAL,
    build_hamiltonian,
    exact_observables,
    ground_state,
    sample_born,
    thermal_diagonal,
)
from .lattice import ExperimentalSettings, LatticeSpec, build_graph
from .model import ModelConfig, init_params
from .tensor import gradcheck
from .training import Dataset, eval_loss_per_token, nll_loss, train

ENUMERATE_MAX_SITES = 12


def _resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    drawn = secrets.randbits(32)
    print(f"seed: {drawn}", file=sys.stderr)
    return drawn


def _settings(args) -> ExperimentalSettings:
    return ExperimentalSettings(
        delta_over_omega=args.delta, rb_over_a=args.rb, beta_omega=args.beta
    )


def _oracle_state(lattice, settings, thermal: bool):
    graph = build_graph(lattice, settings)
    ham = build_hamiltonian(graph, settings)
    if thermal:
        return thermal_diagonal(ham, settings.beta_omega), graph, ham
    return ground_state(ham), graph, ham


def cmd_gen_data(args) -> int:
    seed = _resolve_seed(args.seed)
    lattice = LatticeSpec(args.L)
    num = lattice.num_sites
    if args.thermal and num > MAX_SITES_THERMAL:
        raise ResourceLimitError(
            f"thermal generation capped at N <= {MAX_SITES_THERMAL}, got N = {num}"
        )
    if not args.thermal and num > MAX_SITES_GROUND:
        raise ResourceLimitError(
            f"ground-state generation capped at N <= {MAX_SITES_GROUND}, got N = {num}"
        )
    settings = _settings(args)
    state, _, _ = _oracle_state(lattice, settings, args.thermal)
    records = sample_born(state, args.samples, seed)
    dataset = Dataset(
        lattice=lattice,
        settings=settings,
        records=records,
        generator_kind="ed-thermal" if args.thermal else "ed-ground",
        generator_seed=seed,
    )
    fileio.write_dataset(args.out, dataset)
    print(f"wrote {args.samples} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = fileio.read_train_config(args.config)
    datasets = []
    for path in config.datasets:
        if not os.path.exists(path):
            raise InvalidArgumentError(f"dataset not found: {path}")
        datasets.append(fileio.read_dataset(path))
    if config.resume:
        model = fileio.read_checkpoint(config.resume)
    else:
        model = init_params(ModelConfig(dropout=config.dropout), config.seed)
    out_dir = config.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    writer = fileio.MetricsWriter(metrics_path, append=bool(config.resume))

    def save(model_state, epoch):
        fileio.write_checkpoint(
            os.path.join(out_dir, f"checkpoint_epoch{epoch:04d}.ckpt"), model_state
        )
        fileio.write_checkpoint(os.path.join(out_dir, "checkpoint_latest.ckpt"), model_state)

    train(datasets, model, config, checkpoint_hook=save, metrics_hook=writer)
    print(f"trained {config.epochs} epochs; metrics in {metrics_path}")
    return 0


def cmd_sample(args) -> int:
    seed = _resolve_seed(args.seed)
    model = fileio.read_checkpoint(args.checkpoint)
    lattice = LatticeSpec(args.L)
    settings = _settings(args)
    graph = build_graph(lattice, settings)
    sampler = sampling.sample if args.naive else sampling.sample_cached
    records = sampler(model, graph, args.samples, seed)
    dataset = Dataset(
        lattice=lattice, settings=settings, records=records,
        generator_kind="model-naive" if args.naive else "model-cached",
        generator_seed=seed,
    )
    fileio.write_dataset(args.out, dataset)
    print(f"wrote {args.samples} samples to {args.out}")
    return 0


def cmd_estimate(args) -> int:
    model = fileio.read_checkpoint(args.checkpoint)
    dataset = fileio.read_dataset(args.data)
    graph = build_graph(dataset.lattice, dataset.settings)
    samples = dataset.records
    if args.observable == "stag":
        est = observables.staggered_magnetization(samples)
    else:
        provider = observables.ModelProvider(model, graph)
        if args.observable == "sx":
            est = observables.sigma_x(samples, provider)
        else:
            est = observables.energy(samples, provider, graph, dataset.settings)
    print(fileio.dumps({
        "observable": args.observable,
        "mean": est.mean,
        "std_error": est.std_error,
        "n_samples": est.sample_count,
    }))
    return 0


def cmd_enumerate(args) -> int:
    model = fileio.read_checkpoint(args.checkpoint)
    lattice = LatticeSpec(args.L)
    if lattice.num_sites > ENUMERATE_MAX_SITES:
        raise ResourceLimitError(
            f"enumerate capped at N <= {ENUMERATE_MAX_SITES}, got N = {lattice.num_sites}"
        )
    settings = _settings(args)
    graph = build_graph(lattice, settings)
    from .exact import index_to_bits

    bits = index_to_bits(np.arange(1 << lattice.num_sites), lattice.num_sites)
    log_probs = model.log_prob(graph, bits)
    print(fileio.dumps({
        "total_mass": float(np.exp(log_probs).sum()),
        "max_log_prob": float(log_probs.max()),
        "min_log_prob": float(log_probs.min()),
        "num_configurations": int(bits.shape[0]),
    }))
    return 0


def cmd_gradcheck(args) -> int:
    seed = _resolve_seed(args.seed)
    rng = np.random.default_rng(seed)
    model = init_params(ModelConfig(), seed)
    lattice = LatticeSpec(args.L)
    settings = ExperimentalSettings(delta_over_omega=1.1, rb_over_a=1.15, beta_omega=16.0)
    graph = build_graph(lattice, settings)
    bits = rng.integers(0, 2, size=(1, lattice.num_sites))

    report = gradcheck(
        lambda: nll_loss(model, graph, bits),
        model.params,
        h=1e-5,
        tol=args.tol,
        max_coords_per_tensor=args.coords_per_tensor,
        seed=seed,
    )
    width = max(len(n) for n in report["tensors"])
    for name, info in report["tensors"].items():
        flag = "ok" if info["max_rel_error"] < args.tol else "FAIL"
        print(f"{name:<{width}}  max_rel_err={info['max_rel_error']:.3e}  "
              f"checked={info['checked']}  skipped={info['skipped']}  {flag}")
    print(f"overall max_rel_err={report['max_rel_error']:.3e} "
          f"{'PASS' if report['pass'] else 'FAIL'}")
    if not report["pass"]:
        raise NumericalFailureError(
            f"gradcheck failed: max relative error {report['max_rel_error']:.3e}"
        )
    return 0


def _parse_range(spec: str) -> np.ndarray:
    try:
        lo, hi, num = spec.split(":")
        return np.linspace(float(lo), float(hi), int(num))
    except ValueError as err:
        raise InvalidArgumentError(f"bad range '{spec}', expected lo:hi:count") from err


def cmd_sweep(args) -> int:
    seed = _resolve_seed(args.seed)
    model = fileio.read_checkpoint(args.checkpoint)
    lattice = LatticeSpec(args.L)
    num = lattice.num_sites
    if args.delta_range:
        grid = _parse_range(args.delta_range)
        varied = "delta_over_omega"
    else:
        grid = _parse_range(args.t_range)
        varied = "T_over_omega"
    rows = []
    for i, value in enumerate(grid):
        if varied == "delta_over_omega":
            settings = ExperimentalSettings(
                delta_over_omega=float(value), rb_over_a=args.rb, beta_omega=args.beta
            )
            thermal = False
            oracle_ok = num <= MAX_SITES_GROUND
        else:
            if value <= 0:
                raise InvalidArgumentError(f"temperatures must be positive, got {value}")
            settings = ExperimentalSettings(
                delta_over_omega=args.delta, rb_over_a=args.rb, beta_omega=1.0 / float(value)
            )
            thermal = True
            oracle_ok = num <= MAX_SITES_THERMAL
        graph = build_graph(lattice, settings)
        samples = sampling.sample_cached(model, graph, args.samples, seed + i)
        provider = observables.ModelProvider(model, graph)
        energy_est = observables.energy(samples, provider, graph, settings)
        sx_est = observables.sigma_x(samples, provider)
        stag_est = observables.staggered_magnetization(samples)
        row = {
            varied: float(value),
            "energy": energy_est.mean, "energy_err": energy_est.std_error,
            "sx": sx_est.mean, "sx_err": sx_est.std_error,
            "stag": stag_est.mean, "stag_err": stag_est.std_error,
        }
        if oracle_ok:
            state, graph_o, ham = _oracle_state(lattice, settings, thermal)
            exact_e, exact_sx, exact_stag = exact_observables(state, ham)
            row.update(energy_exact=exact_e, sx_exact=exact_sx, stag_exact=exact_stag)
        rows.append(row)
    columns = list(rows[0].keys())
    with open(args.out, "w", encoding="ascii") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(fileio.format_float(row[c]) for c in columns) + "\n")
    print(f"wrote sweep over {len(grid)} points to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rydformer",
        description="Learn and verify Rydberg-array measurement distributions.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a dataset from the ED oracle")
    p.add_argument("--L", type=int, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--rb", type=float, required=True)
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--thermal", action="store_true",
                   help="sample the finite-temperature diagonal instead of the ground state")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw configurations from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--L", type=int, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--rb", type=float, required=True)
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--naive", action="store_true", help="use the uncached O(N^3) sampler")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("estimate", help="estimate an observable on a dataset")
    p.add_argument("--observable", choices=("energy", "sx", "stag"), required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("enumerate", help="normalization audit over all configurations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--L", type=int, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--rb", type=float, required=True)
    p.add_argument("--beta", type=float, required=True)
    p.set_defaults(func=cmd_enumerate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--L", type=int, default=2)
    p.add_argument("--seed", type=int)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--coords-per-tensor", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="observable sweep and CSV export")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--L", type=int, required=True)
    p.add_argument("--rb", type=float, required=True)
    p.add_argument("--beta", type=float, default=16.0)
    p.add_argument("--delta", type=float, default=1.1)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--delta-range", help="lo:hi:count sweep over detuning")
    group.add_argument("--t-range", help="lo:hi:count sweep over temperature")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ArtifactMismatchError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except NumericalFailureError as err:
        print(f"error: {err}", file=sys.stderr)
        return 4
    except (InvalidArgumentError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
