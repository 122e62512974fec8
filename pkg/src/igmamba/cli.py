"""Command-line entry point: inspect, train, eval, map, report.

``--threads`` caps the BLAS pools, which are sized when numpy first loads, so
the raw argument list is scanned and the environment set before anything that
imports numpy. All other igmamba imports are deferred into the handlers for
the same reason.

Exit codes: 0 success, 2 missing or malformed input files (argparse errors
share this code), 3 invalid configuration, 4 checkpoint incompatible with the
running code.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CONFIG = 3
EXIT_COMPAT = 4

THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

# config-file keys, grouped by which dataclass they feed
MODEL_KEYS = {
    "patch_size": int,
    "pca_dim": int,
    "embed_dim": int,
    "num_stages": int,
    "blocks_per_stage": int,
    "downsample_m": int,
    "downsample_s": int,
    "ssm_state": int,
    "expand": int,
    "ffn_ratio": int,
    "num_classes": int,
    "grouping_mode": str,
    "operator_mode": str,
}
TRAIN_KEYS = {
    "learning_rate": float,
    "epochs": int,
    "batch_size": int,
    "beta1": float,
    "beta2": float,
    "eps": float,
}
RUN_KEYS = {"seed": int, "trials": int}


def _apply_thread_limit(argv):
    value = None
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            value = argv[i + 1]
        elif arg.startswith("--threads="):
            value = arg.split("=", 1)[1]
    if value is not None and value.isdigit() and int(value) > 0:
        for var in THREAD_ENV_VARS:
            os.environ[var] = value


def build_parser():
    parser = argparse.ArgumentParser(
        prog="igmamba",
        description="Grouped state-space classifier for hyperspectral scenes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def model_flags(p):
        p.add_argument("--config", type=Path, help="key=value file; flags override it")
        p.add_argument("--seed", type=int, help="base RNG seed")
        p.add_argument("--patch", type=int, help="square patch side (odd)")
        p.add_argument("--pca", type=int, help="spectral channels kept after PCA")
        p.add_argument("--embed-dim", type=int, help="feature width, multiple of 4")
        p.add_argument("--stages", type=int, help="hierarchy depth")
        p.add_argument("--downsample", metavar="M,S", help="pool kernel and stride")
        p.add_argument(
            "--grouping", choices=("interval", "adjacent", "all"), help="channel grouping"
        )
        p.add_argument(
            "--operators",
            choices=("cascade", "spatial_only", "spectral_only"),
            help="which scan operators run in a block",
        )
        p.add_argument("--threads", type=int, help="cap BLAS threads (applied pre-import)")

    p = sub.add_parser("inspect", help="summarize a scene file")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--threads", type=int)

    p = sub.add_parser("train", help="train over one or more seeds")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--trials", type=int, help="number of consecutive seeds")
    model_flags(p)

    p = sub.add_parser("eval", help="score a checkpoint on the test split")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--seed", type=int, help="split seed (match the training run)")
    p.add_argument("--out", type=Path, help="also write metrics JSON here")
    p.add_argument("--threads", type=int)

    p = sub.add_parser("map", help="render a classification map as PPM")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--threads", type=int)

    p = sub.add_parser("report", help="parameter and MAC breakdown for a config")
    model_flags(p)
    return parser


def parse_config_file(path):
    """Flat key=value lines; blank lines and # comments allowed."""
    from igmamba.errors import DataFormatError

    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    mapping = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise DataFormatError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
        key, value = stripped.split("=", 1)
        mapping[key.strip()] = value.strip()
    return mapping


def _coerce(mapping, schema, label):
    from igmamba.errors import ConfigError

    out = {}
    for key, value in mapping.items():
        if key not in schema:
            continue
        try:
            out[key] = schema[key](value)
        except ValueError:
            raise ConfigError(f"{label} key {key}: cannot read {value!r} as {schema[key].__name__}")
    return out


def resolve_settings(args):
    """Defaults, then config file, then flags. Returns (model kwargs, train
    kwargs, run dict)."""
    from igmamba.errors import ConfigError

    file_map = parse_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = set(file_map) - set(MODEL_KEYS) - set(TRAIN_KEYS) - set(RUN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    model = _coerce(file_map, MODEL_KEYS, "model")
    train = _coerce(file_map, TRAIN_KEYS, "train")
    run = {"seed": 0, "trials": 1}
    run.update(_coerce(file_map, RUN_KEYS, "run"))

    flag_to_key = {
        "patch": "patch_size",
        "pca": "pca_dim",
        "embed_dim": "embed_dim",
        "stages": "num_stages",
        "grouping": "grouping_mode",
        "operators": "operator_mode",
    }
    for flag, key in flag_to_key.items():
        value = getattr(args, flag, None)
        if value is not None:
            model[key] = value
    downsample = getattr(args, "downsample", None)
    if downsample is not None:
        parts = downsample.split(",")
        if len(parts) != 2 or not all(p.strip().lstrip("-").isdigit() for p in parts):
            raise ConfigError(f"--downsample needs M,S integers, got {downsample!r}")
        model["downsample_m"], model["downsample_s"] = (int(p) for p in parts)
    if getattr(args, "seed", None) is not None:
        run["seed"] = args.seed
    if getattr(args, "trials", None) is not None:
        run["trials"] = args.trials
    if run["trials"] < 1:
        raise ConfigError(f"trials must be >= 1, got {run['trials']}")
    return model, train, run


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _prepare_patches(dataset, patch_size, pca_dim, split_seed):
    """Scene file to a stratified PatchSet: PCA, normalize, patch, split."""
    from igmamba.data import (
        extract_patches,
        load_hsif,
        pca_reduce,
        standard_train_counts,
        stratified_split,
    )

    if not Path(dataset).exists():
        raise FileNotFoundError(f"dataset not found: {dataset}")
    cube = load_hsif(dataset)
    reduced = pca_reduce(cube, pca_dim)
    patches = extract_patches(reduced, patch_size)
    return cube, stratified_split(patches, standard_train_counts(patches), split_seed)


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def cmd_inspect(args):
    from igmamba.data import load_hsif

    if not args.dataset.exists():
        raise FileNotFoundError(f"dataset not found: {args.dataset}")
    cube = load_hsif(args.dataset)
    print(f"scene: {args.dataset}")
    print(f"extent: {cube.height} x {cube.width} pixels, {cube.bands} bands")
    print(f"classes: {cube.num_classes}, labeled pixels: {cube.labeled_total()}")
    for name, count in zip(cube.class_names, cube.class_counts()):
        print(f"  {name}: {int(count)}")
    return EXIT_OK


def cmd_train(args):
    import numpy as np

    from igmamba.data import load_hsif
    from igmamba.network import Model, ModelConfig, save_checkpoint
    from igmamba.train import TrainConfig, evaluate, train

    model_kwargs, train_kwargs, run = resolve_settings(args)
    if not args.dataset.exists():
        raise FileNotFoundError(f"dataset not found: {args.dataset}")
    num_classes = load_hsif(args.dataset).num_classes
    model_kwargs["num_classes"] = num_classes
    config = ModelConfig(**model_kwargs)
    config.validate()
    seeds = [run["seed"] + i for i in range(run["trials"])]

    args.out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "dataset": str(args.dataset),
        "dataset_sha256": _sha256(args.dataset),
        "model_config": json.loads(config.canonical_json()),
        "config_hash": config.config_hash(),
        "train_config": dict(sorted(TrainConfig(**train_kwargs).__dict__.items())),
        "seeds": seeds,
        "out": str(args.out),
    }
    _write_json(args.out / "manifest.json", manifest)

    collected = []
    for seed in seeds:
        _, split = _prepare_patches(args.dataset, config.patch_size, config.pca_dim, seed)
        model = Model(config, np.random.default_rng(seed))
        tc = TrainConfig(**dict(train_kwargs, seed=seed))
        train(
            model,
            split,
            tc,
            on_epoch=lambda e, loss: print(
                f"seed {seed} epoch {e}/{tc.epochs} loss {loss:.4f}", flush=True
            ),
        )
        metrics = evaluate(model, split, split.test_indices)
        save_checkpoint(model, args.out / f"seed{seed}.ckpt")
        _write_json(
            args.out / f"metrics_seed{seed}.json",
            metrics.as_dict(seed=seed, config_hash=config.config_hash()),
        )
        collected.append(metrics)
        print(
            f"seed {seed}: oa {metrics.oa:.4f} aa {metrics.aa:.4f} kappa {metrics.kappa:.4f}",
            flush=True,
        )

    summary = {}
    for field in ("oa", "aa", "kappa"):
        values = np.array([getattr(m, field) for m in collected])
        summary[field] = {"mean": float(values.mean()), "std": float(values.std())}
    summary["seeds"] = seeds
    _write_json(args.out / "summary.json", summary)
    print(
        "summary: "
        + " ".join(f"{k} {v['mean']:.4f}+-{v['std']:.4f}" for k, v in summary.items() if k != "seeds")
    )
    return EXIT_OK


def cmd_eval(args):
    from igmamba.network import load_checkpoint
    from igmamba.train import evaluate

    if not args.checkpoint.exists():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    model = load_checkpoint(args.checkpoint)
    seed = args.seed if args.seed is not None else 0
    config = model.config
    _, split = _prepare_patches(args.dataset, config.patch_size, config.pca_dim, seed)
    metrics = evaluate(model, split, split.test_indices)
    print(f"oa {metrics.oa:.4f} aa {metrics.aa:.4f} kappa {metrics.kappa:.4f}")
    if args.out is not None:
        _write_json(args.out, metrics.as_dict(seed=seed, config_hash=config.config_hash()))
    return EXIT_OK


def cmd_map(args):
    import numpy as np

    from igmamba.data import extract_patches, load_hsif, pca_reduce
    from igmamba.network import load_checkpoint
    from igmamba.train import predict, prediction_map, render_map

    if not args.checkpoint.exists():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    model = load_checkpoint(args.checkpoint)
    if not args.dataset.exists():
        raise FileNotFoundError(f"dataset not found: {args.dataset}")
    config = model.config
    cube = load_hsif(args.dataset)
    patches = extract_patches(pca_reduce(cube, config.pca_dim), config.patch_size)
    indices = np.arange(len(patches))
    preds = predict(model, patches, indices)
    render_map(prediction_map(patches, indices, preds), args.out)
    print(f"wrote {args.out} ({cube.height} x {cube.width})")
    return EXIT_OK


def cmd_report(args):
    import numpy as np

    from igmamba.network import Model, ModelConfig, count_params, flop_breakdown

    model_kwargs, _, run = resolve_settings(args)
    config = ModelConfig(**model_kwargs)
    config.validate()
    params = count_params(Model(config, np.random.default_rng(run["seed"])))
    grouped = flop_breakdown(config)
    wide = flop_breakdown(config, grouping="all")
    print(f"configuration hash: {config.config_hash()}")
    print(f"trainable parameters: {params}")
    print(f"{'component':<26}{config.grouping_mode:>14}{'all':>14}")
    for key in grouped:
        print(f"{key:<26}{grouped[key]:>14}{wide[key]:>14}")
    total_g, total_w = sum(grouped.values()), sum(wide.values())
    print(f"{'total':<26}{total_g:>14}{total_w:>14}")
    proj_g = sum(v for k, v in grouped.items() if k.endswith("scan_proj"))
    proj_w = sum(v for k, v in wide.items() if k.endswith("scan_proj"))
    print(f"scan projection MACs: {proj_g} vs {proj_w} ({proj_g / proj_w:.3f}x)")
    return EXIT_OK


COMMANDS = {
    "inspect": cmd_inspect,
    "train": cmd_train,
    "eval": cmd_eval,
    "map": cmd_map,
    "report": cmd_report,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_thread_limit(argv)

    from igmamba.errors import CompatibilityError, ConfigError, DataFormatError

    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except DataFormatError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except CompatibilityError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_COMPAT


if __name__ == "__main__":
    sys.exit(main())
