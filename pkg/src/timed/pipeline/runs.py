"""Scoring sweeps and the ablation table."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..data import Dataset
from ..evaluation import GruTraining, ScoreReport, discriminative_score, mmd_metric, predictive_score
from ..numerics import Rng
from .config import RunConfig
from .training import Trainer, build_dataset

# row label -> ablation flag switched on (None is the full model)
ABLATION_VARIANTS = {
    "TIMED": None,
    "w/o ASL": "disable_asl",
    "w/o MMD": "disable_mmd",
    "w/o MA": "disable_mask",
    "w/o WC": "disable_wc",
}

GEN_STREAM = 11
SCORE_STREAM = 12


def gru_settings(config: RunConfig) -> GruTraining:
    e = config.eval
    return GruTraining(steps=e.gru_steps, batch_size=e.gru_batch, lr=e.gru_lr)


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def evaluate_samples(config: RunConfig, real: Dataset, synth, workers: int = 1) -> list[ScoreReport]:
    """Discriminative, predictive and MMD scores over ``config.eval.repeats`` seeded repeats."""
    gru = gru_settings(config)
    root = Rng(config.seed).spawn(SCORE_STREAM)

    def one(r: int):
        rng = root.spawn(r)
        return (
            discriminative_score(real, synth, rng.spawn(0), gru),
            predictive_score(real, synth, rng.spawn(1), gru),
            mmd_metric(real, synth, rng.spawn(2), config.weights.mmd_sigma),
        )

    results = _map(one, range(config.eval.repeats), workers)
    fp = f"{config.fingerprint()}/{gru.fingerprint()}"
    return [ScoreReport.from_values(m, [r[i] for r in results], fp) for i, m in enumerate(("discriminative", "predictive", "mmd"))]


@dataclass
class VariantResult:
    label: str
    discriminative: list[float]
    predictive: list[float]


def variant_config(config: RunConfig, label: str) -> RunConfig:
    flag = ABLATION_VARIANTS[label]
    return config if flag is None else config.with_updates(**{f"ablation.{flag}": True})


def run_variant(config: RunConfig, real: Dataset, n_samples: int | None = None, out_dir=None) -> np.ndarray:
    """Train all stages from scratch and return generated samples."""
    trainer = Trainer(config, real, out_dir=out_dir)
    trainer.train()
    n = n_samples or config.eval.n_samples or len(real)
    return trainer.generate(n, Rng(config.seed).spawn(GEN_STREAM))


def ablate(
    config: RunConfig,
    real: Dataset | None = None,
    repeats: int | None = None,
    workers: int = 1,
    out_dir=None,
    variants=tuple(ABLATION_VARIANTS),
) -> list[VariantResult]:
    """Ablation variants trained and scored with paired seeds ``seed + r``."""
    real = real if real is not None else build_dataset(config)
    repeats = repeats or config.eval.repeats
    gru = gru_settings(config)
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise ValueError(f"unknown ablation variants {unknown}; choose from {list(ABLATION_VARIANTS)}")
    jobs = [(label, r) for label in variants for r in range(repeats)]

    def one(job):
        label, r = job
        cfg = variant_config(config, label).with_updates(seed=config.seed + r)
        sub = None if out_dir is None else Path(out_dir) / "ablate" / f"{label.replace('/', '').replace(' ', '_')}_{r}"
        synth = run_variant(cfg, real, out_dir=sub)
        rng = Rng(config.seed + r).spawn(SCORE_STREAM)
        return discriminative_score(real, synth, rng.spawn(0), gru), predictive_score(real, synth, rng.spawn(1), gru)

    scores = dict(zip(jobs, _map(one, jobs, workers)))
    return [
        VariantResult(label, [scores[(label, r)][0] for r in range(repeats)], [scores[(label, r)][1] for r in range(repeats)])
        for label in variants
    ]


def write_ablation_csv(path, results: list[VariantResult]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "discriminative_mean", "discriminative_std", "predictive_mean", "predictive_std", "repeats"])
        for res in results:
            d, p = np.asarray(res.discriminative), np.asarray(res.predictive)
            w.writerow([res.label, repr(float(d.mean())), repr(float(d.std())), repr(float(p.mean())), repr(float(p.std())), len(d)])
