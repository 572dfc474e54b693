#!/usr/bin/env python3
# cli.py

"""
Main entry point for windgen.
Generates synthetic wind-profile data, trains GMM/DDPM/FM generators,
samples conditioned profiles, and runs the evaluation and holdout grids.
"""

import argparse
import json
import logging
import os
import sys
from typing import Dict, List, Optional

import torch

from checkpoint import load_model, save_model
from config import ConfigError, RunConfig, dump_run_config, load_config, load_run_config
from data import (
    COMPASS_TOKENS, ConditionLabel, Dataset, DirectionSet, SpeedBins, condition_grid, load_dataset,
    profiles_from_array, synth_generate, write_dataset,
)
from evaluation import (
    EvalReport, conditional_report, emit_gmm_curves, emit_report, kfold_generalization, sample_profiles,
    unconditional_report,
)
from gmm import DEFAULT_MAX_DRAWS, GmmPipeline
from logging_config import setup_logging
from trainer import train_model

VERSION = "0.1.0"
CHECKPOINT_NAMES = {"gmm": "model-gmm.json", "ddpm": "model-ddpm.ckpt", "fm": "model-fm.ckpt"}


# --- Shared helpers ---

def _threads(config: Optional[RunConfig], env: Dict) -> int:
    if config is not None and config.threads:
        return config.threads
    return env['THREADS']


def _out_dir(args, config: Optional[RunConfig]) -> str:
    out = args.out or (config.out_dir if config else "runs")
    os.makedirs(out, exist_ok=True)
    return out


def _run_dataset(config: RunConfig, env: Dict) -> Dataset:
    bins = SpeedBins(config.speed_bin_edges)
    if config.dataset_path is not None:
        if not os.path.exists(config.dataset_path):
            raise FileNotFoundError(f"dataset {config.dataset_path} does not exist")
        return load_dataset(config.dataset_path, bins=bins, dirs=DirectionSet(), data_tz=env['DATA_TZ'])
    return synth_generate(config.synth, bins, DirectionSet())


def _experiment_grid(config: RunConfig, dataset: Dataset) -> List[ConditionLabel]:
    return condition_grid(dataset.speed_bins, dataset.directions, config.directions)


def _speed_only_grid(dataset: Dataset) -> List[ConditionLabel]:
    """One any-direction label per speed bin present in the data."""
    return [ConditionLabel(b, None) for b in sorted({lbl.speed_bin for lbl in dataset.labels()})]


def write_manifest(out_dir: str, command: str, config: Optional[RunConfig], seed, outputs: List[str]) -> str:
    """Provenance record; contains no wall-clock data so identical runs write identical bytes."""
    manifest = {
        "command": command,
        "version": VERSION,
        "seed": seed,
        "config_sha256": config.digest() if config else None,
        "config": config.to_dict() if config else None,
        "outputs": sorted(os.path.relpath(p, out_dir) for p in outputs),
    }
    if config is not None:
        run_file = os.path.join(out_dir, "run.env")
        with open(run_file, "w") as fh:
            fh.write(dump_run_config(config))
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
    return path


# --- Subcommands ---

def cmd_synth(args, config: RunConfig, env: Dict) -> List[str]:
    if config.synth is None:
        raise ConfigError(["synth needs SYNTH_* keys in the run config"])
    dataset = synth_generate(config.synth, SpeedBins(config.speed_bin_edges), DirectionSet())
    path = os.path.join(_out_dir(args, config), "dataset.csv")
    write_dataset(dataset, path)
    return [path]


def cmd_train(args, config: RunConfig, env: Dict) -> List[str]:
    kind = args.model or config.model_kind
    out = _out_dir(args, config)
    dataset = _run_dataset(config, env)
    model = train_model(kind, dataset, config)
    outputs = [save_model(model, os.path.join(out, CHECKPOINT_NAMES[kind]))]
    if isinstance(model, GmmPipeline):
        outputs += emit_gmm_curves(model, out)
    return outputs


def cmd_sample(args, config: Optional[RunConfig], env: Dict) -> List[str]:
    model = load_model(args.checkpoint)
    condition = ConditionLabel.parse(args.condition, model.speed_bins, model.directions)
    seed = args.seed if args.seed is not None else (config.seed if config else 0)
    max_draws = config.gmm_max_draws if config else DEFAULT_MAX_DRAWS
    x = sample_profiles(model, condition, args.n, seed, max_draws=max_draws)
    macro = model.speed_bins.representative(condition.speed_bin)
    samples = Dataset(
        profiles=profiles_from_array(x, condition, macro_speed=macro),
        altitudes=model.altitudes,
        speed_bins=model.speed_bins,
        directions=model.directions,
    )
    path = os.path.join(_out_dir(args, config), "samples.csv")
    write_dataset(samples, path, include_timestamp=False)
    return [path]


def _model_names(models) -> List[str]:
    names = []
    for model in models:
        kind = getattr(model, "kind", "gmm")
        names.append(kind if kind not in names else f"{kind}-{len(names)}")
    return names


def cmd_eval(args, config: RunConfig, env: Dict) -> List[str]:
    out = _out_dir(args, config)
    workers = _threads(config, env)
    dataset = _run_dataset(config, env)
    models = [load_model(path) for path in args.checkpoint]
    named = dict(zip(_model_names(models), models))

    report = unconditional_report(named, dataset, config.seed, k=config.kl_neighbors, workers=workers)
    grid = _experiment_grid(config, dataset) + _speed_only_grid(dataset)
    for name, model in named.items():
        report.conditional += conditional_report(
            model, dataset, grid, config.eval_samples_per_condition, config.seed, name=name,
            k=config.kl_neighbors, workers=workers, min_support=config.min_support,
            max_draws=config.gmm_max_draws,
        )
    report.metadata = {"command": "eval", "seed": config.seed, "version": VERSION,
                       "config_sha256": config.digest(), "models": sorted(named)}
    outputs = emit_report(report, out)
    for model in models:
        if isinstance(model, GmmPipeline):
            outputs += emit_gmm_curves(model, out)
    return outputs


def cmd_kfold(args, config: RunConfig, env: Dict) -> List[str]:
    kind = args.model or config.model_kind
    out = _out_dir(args, config)
    dataset = _run_dataset(config, env)
    grid = _experiment_grid(config, dataset)

    def fold_trainer(train: Dataset, seed: int):
        return train_model(kind, train, config, seed)

    report = EvalReport(altitudes=dataset.altitudes, speed_bins=dataset.speed_bins, directions=dataset.directions)
    report.kfold_grid = kfold_generalization(fold_trainer, dataset, grid, config.seed, k=config.kl_neighbors,
                                             workers=_threads(config, env), max_draws=config.gmm_max_draws)
    report.metadata = {"command": "kfold", "model_kind": kind, "seed": config.seed, "version": VERSION,
                       "config_sha256": config.digest()}
    return emit_report(report, out)


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "kfold": cmd_kfold,
}


def _help_epilog() -> str:
    lines = ["speed bins (default edges, m/s):"]
    lines += ["  " + row for row in SpeedBins().describe()]
    lines.append("directions (wind blowing FROM): " + " ".join(COMPASS_TOKENS))
    lines.append("conditions are written DIRECTION:SPEED_BIN, e.g. SW:2; *:2 means any direction")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="KEY=VALUE run file")
    common.add_argument("--seed", type=int, help="overrides SEED")
    common.add_argument("--out", help="output directory, overrides OUT_DIR")
    common.add_argument("--threads", type=int, help="thread cap, overrides THREADS")

    parser = argparse.ArgumentParser(
        prog="windgen",
        description="Conditional wind-profile generators (GMM, DDPM, flow matching).",
        epilog=_help_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)
    kwargs = dict(parents=[common], epilog=_help_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)

    sub.add_parser("synth", help="generate a synthetic log-law dataset", **kwargs)
    train = sub.add_parser("train", help="train a generator", **kwargs)
    train.add_argument("--model", choices=sorted(CHECKPOINT_NAMES), help="overrides MODEL_KIND")
    sample = sub.add_parser("sample", help="sample profiles for one condition", **kwargs)
    sample.add_argument("--checkpoint", required=True)
    sample.add_argument("--condition", required=True, help="DIRECTION:SPEED_BIN, e.g. SW:1")
    sample.add_argument("-n", type=int, required=True, help="number of profiles")
    evaluate = sub.add_parser("eval", help="evaluate one or more checkpoints against the dataset", **kwargs)
    evaluate.add_argument("--checkpoint", action="append", required=True)
    kfold = sub.add_parser("kfold", help="condition-holdout generalization grid", **kwargs)
    kfold.add_argument("--model", choices=sorted(CHECKPOINT_NAMES), help="overrides MODEL_KIND")
    return parser


def _resolve_config(args) -> Optional[RunConfig]:
    overrides = dict(seed=args.seed, out_dir=args.out, threads=args.threads)
    if args.config is None:
        if args.command != "sample":
            raise ConfigError([f"{args.command} needs --config"])
        return None
    return load_run_config(args.config, **overrides)


def run(argv=None) -> List[str]:
    args = build_parser().parse_args(argv)
    env = load_config()
    setup_logging(env['LOG_FILE'], env['LOG_LEVEL'])
    config = _resolve_config(args)
    torch.set_num_threads(args.threads or _threads(config, env))
    logging.info("[%s] version=%s config=%s seed=%s", args.command, VERSION, args.config,
                 config.seed if config else args.seed)

    outputs = COMMANDS[args.command](args, config, env)
    out = _out_dir(args, config)
    seed = config.seed if config else args.seed
    outputs.append(write_manifest(out, args.command, config, seed, outputs))
    for path in outputs:
        print(path)
    return outputs


def main(argv=None) -> int:
    try:
        run(argv)
        return 0
    except Exception as e:
        logging.exception("[main] Fatal error: %s", e)
        print(f"error kind={type(e).__name__} message={json.dumps(str(e))}", file=sys.stderr)
        return 2 if isinstance(e, ConfigError) else 1


if __name__ == "__main__":
    sys.exit(main())
