"""Command line: ``timed {gen-data,train,sample,eval,ablate}``.

Success prints a one-line JSON summary on stdout. Failures print a one-line
JSON error on stderr and exit 1; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..data import Dataset
from ..evaluation import pca_project, write_projection_csv, write_projection_svg, write_scores_csv
from ..numerics import Rng
from .checkpoint import CheckpointError, save_checkpoint
from .config import RunConfig, builtin_config, load_config
from .runs import GEN_STREAM, ablate, evaluate_samples, write_ablation_csv
from .training import Trainer, build_dataset, truncate_log


class UsageError(Exception):
    pass


def _global_flags(p: argparse.ArgumentParser, default) -> None:
    p.add_argument("--config", default=default, help="JSON config path, or a preset name (desk, paper)")
    p.add_argument("--seed", type=int, default=default)
    p.add_argument("--out", default=default)
    p.add_argument("-v", "--verbose", action="store_true", default=default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="timed", description="Diffusion time-series generator with an autoregressive supervisor.")
    _global_flags(parser, None)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help):
        p = sub.add_parser(name, help=help)
        # repeated so global flags also work after the subcommand
        _global_flags(p, argparse.SUPPRESS)
        return p

    command("gen-data", "build the configured dataset and cache it")
    p = command("train", "run training stages")
    p.add_argument("--stage", choices=["1", "2", "3", "all"], default="all")
    p.add_argument("--from-scratch", action="store_true", help="allow stage 3 without pretrained checkpoints")
    p.add_argument("--resume", action="store_true", help="continue from the last per-epoch checkpoint")
    p = command("sample", "generate sequences from the trained model")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--denormalize", action="store_true")
    command("eval", "score generated samples and export a PCA projection")
    p = command("ablate", "train and score every ablation variant")
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    return parser


def resolve_config(args) -> RunConfig:
    name = args.config
    if name is None:
        config = builtin_config("desk")
    elif Path(name).suffix == "" and not Path(name).exists():
        try:
            config = builtin_config(name)
        except FileNotFoundError:
            raise UsageError(f"no such config preset: {name}") from None
    else:
        if not Path(name).is_file():
            raise UsageError(f"config file not found: {name}")
        config = load_config(name)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["out"] = args.out
    return config.with_updates(**updates) if updates else config


def write_samples_csv(path, samples: np.ndarray, feature_names) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "t", *feature_names])
        for i, seq in enumerate(samples):
            for t, row in enumerate(seq):
                w.writerow([i, t, *(repr(float(v)) for v in row)])


def _dataset_tensors(ds: Dataset, samples=None) -> dict[str, np.ndarray]:
    return {
        "samples": ds.samples if samples is None else samples,
        "stats/min": np.asarray(ds.stats[0], dtype=np.float32),
        "stats/max": np.asarray(ds.stats[1], dtype=np.float32),
    }


def _model_path(out: Path) -> Path:
    path = out / "model.bin"
    if not path.exists():
        raise CheckpointError(f"no trained model at {path}; run `timed train` first")
    return path


def cmd_gen_data(config: RunConfig, args, out: Path) -> dict:
    ds = build_dataset(config)
    save_checkpoint(out / "data.bin", _dataset_tensors(ds))
    write_samples_csv(out / "data.csv", ds.samples, ds.feature_names)
    return {"dataset": ds.name, "shape": list(ds.shape), "path": str(out / "data.bin")}


def cmd_train(config: RunConfig, args, out: Path) -> dict:
    data = build_dataset(config)
    stages = [1, 2, 3] if args.stage == "all" else [int(args.stage)]
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.to_json())
    if args.resume:
        if not (out / "resume.bin").exists():
            raise CheckpointError(f"nothing to resume: {out / 'resume.bin'} does not exist")
        trainer = Trainer.from_checkpoint(out / "resume.bin", config, data, out_dir=out)
        truncate_log(out / "train_log.csv", trainer.progress)
    elif stages[0] == 1:
        log_path = out / "train_log.csv"
        if log_path.exists():
            log_path.unlink()
        trainer = Trainer(config, data, out_dir=out)
    else:
        previous = out / f"stage{stages[0] - 1}.bin"
        if previous.exists():
            trainer = Trainer.from_checkpoint(previous, config, data, out_dir=out)
        elif args.from_scratch:
            trainer = Trainer(config, data, out_dir=out)
        else:
            raise CheckpointError(f"stage {stages[0]} needs {previous}; train earlier stages first or pass --from-scratch")
        if stages[0] == 3 and not args.from_scratch:
            need1 = 0 if config.ablation.disable_asl else config.epochs[0]
            if trainer.progress[0] < need1 or trainer.progress[1] < config.epochs[1]:
                raise CheckpointError(f"stage 3 needs completed stages 1 and 2 (progress {trainer.progress[:2]}); pass --from-scratch to override")
    for s in stages:
        trainer.run_stage(s)
    trainer.save(out / "model.bin")
    return {"stages": stages, "progress": trainer.progress, "steps": trainer.step, "log": str(out / "train_log.csv")}


def _generate(config: RunConfig, out: Path, n: int, denormalize: bool = False):
    data = build_dataset(config)
    trainer = Trainer.from_checkpoint(_model_path(out), config, data)
    return data, trainer.generate(n, Rng(config.seed).spawn(GEN_STREAM), denormalize=denormalize)


def cmd_sample(config: RunConfig, args, out: Path) -> dict:
    n = args.n or config.eval.n_samples or config.dataset.n
    if n < 1:
        raise UsageError("--n must be positive")
    data, samples = _generate(config, out, n, args.denormalize)
    write_samples_csv(out / "samples.csv", samples, data.feature_names)
    save_checkpoint(out / "samples.bin", _dataset_tensors(data, samples))
    return {"shape": list(samples.shape), "path": str(out / "samples.csv")}


def cmd_eval(config: RunConfig, args, out: Path) -> dict:
    n = config.eval.n_samples or config.dataset.n
    data, samples = _generate(config, out, n)
    reports = evaluate_samples(config, data, samples)
    write_scores_csv(out / "scores.csv", reports)
    proj = pca_project(data, samples)
    write_projection_csv(out / "projection.csv", proj)
    write_projection_svg(out / "projection.svg", proj)
    return {r.metric: {"mean": r.mean, "std": r.std} for r in reports}


def cmd_ablate(config: RunConfig, args, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    results = ablate(config, repeats=args.repeats, workers=args.workers, out_dir=out)
    write_ablation_csv(out / "ablation.csv", results)
    return {r.label: {"discriminative": float(np.mean(r.discriminative)), "predictive": float(np.mean(r.predictive))} for r in results}


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        config = resolve_config(args)
        out = Path(config.out)
        out.mkdir(parents=True, exist_ok=True)
        summary = COMMANDS[args.command](config, args, out)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as one machine-readable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, "out": str(out), **summary}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
